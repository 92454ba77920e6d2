use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::fmt::Write as _;

use super::{
    link_name, protocol_costs, BlockedBlock, Deadlock, InstrEvent, SimConfig, SimReport, Timeline, TransferEvent,
    WaitReason,
};
use crate::ir::{IrOp, IrProgram};
use crate::lowering::Opcode;
use crate::model::{LinkClass, Rank, Topology, BYTES_PER_MB};

/// Relative slack when deciding that a shared transfer has finished.
const EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
enum EventKind {
    Wake(usize),
    AlphaDone(usize),
    PairCheck { pair: (Rank, Rank), version: u64 },
}

#[derive(Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // earliest first in a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Start,
    Recv,
    Local,
    Send,
    /// Waiting for an event, then continuing with the inner phase.
    Busy(After),
    Finish,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum After {
    Send,
    Finish,
}

struct TBlock<'a> {
    rank: Rank,
    tb: usize,
    ops: &'a [IrOp],
    send: Option<(Rank, Rank, u32)>,
    recv: Option<(Rank, Rank, u32)>,
    pos: usize,
    phase: Phase,
    op_start: f64,
}

struct Transfer {
    conn: (Rank, Rank, u32),
    started: bool,
    class: LinkClass,
    bytes: f64,
    work: f64,
    left: f64,
    start: f64,
}

#[derive(Default)]
struct Pair {
    active: Vec<usize>,
    last: f64,
    version: u64,
}

#[derive(Default)]
struct Fifo {
    /// `(transfer, delivered)` in send order, including messages in flight.
    entries: VecDeque<(usize, bool)>,
    /// Every transfer ever pushed, in order; they stream one at a time.
    sent: Vec<usize>,
    streamed: usize,
    streaming: bool,
}

struct Engine<'a> {
    topo: &'a Topology,
    cfg: &'a SimConfig,
    tiles: usize,
    slots: usize,
    alpha_scale: f64,
    beta_scale: f64,
    blocks: Vec<TBlock<'a>>,
    index: HashMap<(Rank, usize), usize>,
    fifos: HashMap<(Rank, Rank, u32), Fifo>,
    transfers: Vec<Transfer>,
    pairs: HashMap<(Rank, Rank), Pair>,
    nic_free: Vec<f64>,
    heap: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    timeline: Timeline,
    max_fifo: usize,
    makespan: f64,
}

impl<'a> Engine<'a> {
    fn schedule(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event { time, seq: self.seq, kind });
    }

    fn total(&self, b: usize) -> usize {
        self.tiles * self.blocks[b].ops.len()
    }

    fn op_bytes(&self, op: &IrOp, tile: usize) -> f64 {
        op.count as f64 * self.cfg.tile_chunk_bytes(tile)
    }

    fn dep_ready(&self, b: usize, op: &IrOp, tile: usize) -> Option<WaitReason> {
        let rank = self.blocks[b].rank;
        for d in &op.deps {
            let ok = self.index.get(&(rank, d.tb)).is_some_and(|&i| {
                let len = self.blocks[i].ops.len();
                self.blocks[i].pos > tile * len + d.step
            });
            if !ok {
                return Some(WaitReason::Dep { tb: d.tb, step: d.step });
            }
        }
        None
    }

    fn waiting_on(&self, b: usize) -> WaitReason {
        let blk = &self.blocks[b];
        let len = blk.ops.len();
        let (tile, step) = (blk.pos / len, blk.pos % len);
        match blk.phase {
            Phase::Start => self.dep_ready(b, &blk.ops[step], tile).unwrap_or(WaitReason::MissingPeer),
            Phase::Recv => blk.recv.map_or(WaitReason::MissingPeer, |c| WaitReason::Recv { peer: c.0, channel: c.2 }),
            _ => blk.send.map_or(WaitReason::MissingPeer, |c| WaitReason::Send { peer: c.1, channel: c.2 }),
        }
    }

    /// Moves block `b` forward as far as it can go at the current time.
    fn advance(&mut self, b: usize) -> bool {
        let mut moved = false;
        loop {
            if self.blocks[b].pos >= self.total(b) {
                return moved;
            }
            let len = self.blocks[b].ops.len();
            let (tile, step) = (self.blocks[b].pos / len, self.blocks[b].pos % len);
            let op = &self.blocks[b].ops[step];
            match self.blocks[b].phase {
                Phase::Start => {
                    if self.dep_ready(b, op, tile).is_some() {
                        return moved;
                    }
                    self.blocks[b].op_start = self.now;
                    self.blocks[b].phase = if op.opcode.receives() {
                        Phase::Recv
                    } else if op.opcode.sends() {
                        Phase::Send
                    } else {
                        Phase::Local
                    };
                }
                Phase::Recv => {
                    let Some(conn) = self.blocks[b].recv else { return moved };
                    let ready = self.fifos.get(&conn).and_then(|f| f.entries.front()).is_some_and(|e| e.1);
                    if !ready {
                        return moved;
                    }
                    self.fifos.get_mut(&conn).expect("non-empty").entries.pop_front();
                    let reduces = matches!(
                        op.opcode,
                        Opcode::RecvReduceCopy | Opcode::RecvReduceCopySend | Opcode::RecvReduceSend
                    );
                    let cost = if reduces { self.gamma_cost(op, tile) } else { 0.0 };
                    let next = if op.opcode.sends() { After::Send } else { After::Finish };
                    self.wait_or(b, cost, next);
                }
                Phase::Local => {
                    let cost = if op.opcode == Opcode::Reduce { self.gamma_cost(op, tile) } else { 0.0 };
                    self.wait_or(b, cost, After::Finish);
                }
                Phase::Send => {
                    let Some(conn) = self.blocks[b].send else { return moved };
                    let fifo = self.fifos.entry(conn).or_default();
                    if fifo.entries.len() >= self.slots {
                        return moved;
                    }
                    let id = self.transfers.len();
                    fifo.entries.push_back((id, false));
                    self.max_fifo = self.max_fifo.max(fifo.entries.len());
                    // the push completes the send; the bytes travel on their own
                    self.start_transfer(conn, self.op_bytes(op, tile));
                    self.blocks[b].phase = Phase::Finish;
                }
                Phase::Busy(_) => return moved,
                Phase::Finish => {
                    let blk = &mut self.blocks[b];
                    self.timeline.instructions.push(InstrEvent {
                        rank: blk.rank,
                        tb: blk.tb,
                        step,
                        tile,
                        opcode: op.opcode.as_str(),
                        start_us: blk.op_start,
                        end_us: self.now,
                    });
                    blk.pos += 1;
                    blk.phase = Phase::Start;
                    self.makespan = self.makespan.max(self.now);
                }
            }
            moved = true;
        }
    }

    fn gamma_cost(&self, op: &IrOp, tile: usize) -> f64 {
        self.op_bytes(op, tile) / BYTES_PER_MB * self.topo.reduce_gamma
    }

    fn wait_or(&mut self, b: usize, cost: f64, next: After) {
        if cost > 0.0 {
            self.blocks[b].phase = Phase::Busy(next);
            self.schedule(self.now + cost, EventKind::Wake(b));
        } else {
            self.blocks[b].phase = match next {
                After::Send => Phase::Send,
                After::Finish => Phase::Finish,
            };
        }
    }

    fn start_transfer(&mut self, conn: (Rank, Rank, u32), bytes: f64) {
        let class = self.topo.link_class(conn.0, conn.1);
        let link = self.topo.link(class);
        let alpha = link.alpha_us * self.alpha_scale;
        let work = bytes / BYTES_PER_MB * link.beta_us_per_mb * self.beta_scale;
        // a NIC starts one inter-node message at a time
        let begin = if class == LinkClass::Inter {
            let t = self.now.max(self.nic_free[conn.0]);
            self.nic_free[conn.0] = t + alpha;
            t
        } else {
            self.now
        };
        let id = self.transfers.len();
        self.transfers.push(Transfer { conn, started: false, class, bytes, work, left: work, start: self.now });
        self.fifos.entry(conn).or_default().sent.push(id);
        self.schedule(begin + alpha, EventKind::AlphaDone(id));
    }

    /// Starts the next message of `conn` once its predecessor has arrived
    /// and its own startup is over.
    fn stream_next(&mut self, conn: (Rank, Rank, u32)) {
        let f = self.fifos.get_mut(&conn).expect("pushed");
        if f.streaming || f.streamed >= f.sent.len() {
            return;
        }
        let t = f.sent[f.streamed];
        if !self.transfers[t].started {
            return;
        }
        f.streaming = true;
        f.streamed += 1;
        let pair = (conn.0, conn.1);
        self.settle(pair);
        self.pairs.get_mut(&pair).expect("settled").active.push(t);
        self.reschedule(pair);
    }

    fn settle(&mut self, pair: (Rank, Rank)) {
        let p = self.pairs.entry(pair).or_default();
        let n = p.active.len();
        if n > 0 {
            let share = (self.now - p.last) / n as f64;
            for &t in &p.active {
                self.transfers[t].left -= share;
            }
        }
        p.last = self.now;
    }

    fn reschedule(&mut self, pair: (Rank, Rank)) {
        let p = self.pairs.get_mut(&pair).expect("settled");
        p.version += 1;
        let n = p.active.len();
        if let Some(min) = p.active.iter().map(|&t| self.transfers[t].left).min_by(f64::total_cmp) {
            let version = p.version;
            self.schedule(self.now + min.max(0.0) * n as f64, EventKind::PairCheck { pair, version });
        }
    }

    fn handle(&mut self, kind: EventKind) {
        match kind {
            EventKind::Wake(b) => {
                if let Phase::Busy(next) = self.blocks[b].phase {
                    self.blocks[b].phase = match next {
                        After::Send => Phase::Send,
                        After::Finish => Phase::Finish,
                    };
                }
            }
            EventKind::AlphaDone(t) => {
                self.transfers[t].started = true;
                self.stream_next(self.transfers[t].conn);
            }
            EventKind::PairCheck { pair, version } => {
                if self.pairs.get(&pair).is_none_or(|p| p.version != version) {
                    return;
                }
                self.settle(pair);
                let p = self.pairs.get_mut(&pair).expect("settled");
                let (done, rest): (Vec<usize>, Vec<usize>) = p
                    .active
                    .iter()
                    .partition(|&&t| self.transfers[t].left <= EPS * self.transfers[t].work.max(1.0));
                p.active = rest;
                for t in done {
                    self.deliver(t);
                }
                self.reschedule(pair);
            }
        }
    }

    fn deliver(&mut self, t: usize) {
        let tr = &self.transfers[t];
        if let Some(f) = self.fifos.get_mut(&tr.conn) {
            f.streaming = false;
            if let Some(e) = f.entries.iter_mut().find(|e| e.0 == t) {
                e.1 = true;
            }
        }
        self.timeline.transfers.push(TransferEvent {
            src: tr.conn.0,
            dst: tr.conn.1,
            channel: tr.conn.2,
            link: link_name(tr.class),
            bytes: tr.bytes,
            start_us: tr.start,
            end_us: self.now,
        });
        self.makespan = self.makespan.max(self.now);
        self.stream_next(tr.conn);
    }

    fn sweep_blocks(&mut self) {
        loop {
            let mut moved = false;
            for b in 0..self.blocks.len() {
                moved |= self.advance(b);
            }
            if !moved {
                break;
            }
        }
    }
}

/// Link utilization per class: transferred bytes weighted by the link's
/// per-byte cost, over makespan times the number of distinct GPU pairs used.
fn utilization(transfers: &[Transfer], makespan: f64, class: LinkClass) -> f64 {
    let mut busy = 0.0;
    let mut pairs = BTreeSet::new();
    for t in transfers.iter().filter(|t| t.class == class) {
        busy += t.work;
        pairs.insert((t.conn.0, t.conn.1));
    }
    if pairs.is_empty() || makespan <= 0.0 {
        0.0
    } else {
        busy / (makespan * pairs.len() as f64)
    }
}

struct TimedRun {
    report: SimReport,
    util_intra: f64,
    util_inter: f64,
}

fn simulate(ir: &IrProgram, topo: &Topology, cfg: &SimConfig) -> TimedRun {
    let costs = protocol_costs(ir.protocol);
    let mut blocks = Vec::new();
    let mut index = HashMap::new();
    for g in &ir.gpus {
        for t in &g.threadblocks {
            index.insert((g.rank, t.id), blocks.len());
            blocks.push(TBlock {
                rank: g.rank,
                tb: t.id,
                ops: &t.ops,
                send: t.send_peer.map(|p| (g.rank, p, t.channel)),
                recv: t.recv_peer.map(|p| (p, g.rank, t.channel)),
                pos: 0,
                phase: Phase::Start,
                op_start: 0.0,
            });
        }
    }
    let mut e = Engine {
        topo,
        cfg,
        tiles: cfg.tiles(),
        slots: cfg.slots_for(ir.protocol),
        alpha_scale: costs.alpha_scale,
        beta_scale: costs.beta_scale,
        blocks,
        index,
        fifos: HashMap::new(),
        transfers: Vec::new(),
        pairs: HashMap::new(),
        nic_free: vec![0.0; ir.gpus.len().max(topo.ranks())],
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        timeline: Timeline::default(),
        max_fifo: 0,
        makespan: 0.0,
    };
    let mut steps = 0usize;
    e.sweep_blocks();
    while let Some(ev) = e.heap.pop() {
        e.now = ev.time;
        e.handle(ev.kind);
        // drain simultaneous events before letting blocks react
        while e.heap.peek().is_some_and(|n| n.time <= e.now) {
            let n = e.heap.pop().expect("peeked");
            e.handle(n.kind);
            steps += 1;
        }
        e.sweep_blocks();
        steps += 1;
        if steps >= cfg.max_steps {
            break;
        }
    }
    let blocked: Vec<BlockedBlock> = (0..e.blocks.len())
        .filter(|&b| e.blocks[b].pos < e.total(b))
        .map(|b| {
            let len = e.blocks[b].ops.len();
            BlockedBlock {
                rank: e.blocks[b].rank,
                tb: e.blocks[b].tb,
                step: e.blocks[b].pos % len,
                reason: e.waiting_on(b),
            }
        })
        .collect();
    let completed = blocked.is_empty();
    let makespan = e.makespan;
    let util_intra = utilization(&e.transfers, makespan, LinkClass::Intra);
    let util_inter = utilization(&e.transfers, makespan, LinkClass::Inter);
    let fuel_exhausted = !e.heap.is_empty();
    TimedRun {
        report: SimReport {
            completed,
            deadlock: (!completed).then_some(Deadlock { blocked, fuel_exhausted }),
            races: Vec::new(),
            postcondition: None,
            errors: Vec::new(),
            final_state: None,
            makespan_us: Some(makespan),
            timeline: e.timeline,
            steps,
            max_fifo: e.max_fifo,
        },
        util_intra,
        util_inter,
    }
}

/// Discrete-event run: every block walks its instructions once per tile.
/// A send completes once its message occupies a slot; the message then pays
/// a startup cost and shares its GPU pair's bandwidth until delivery.
pub fn run_timed(ir: &IrProgram, topo: &Topology, cfg: &SimConfig) -> SimReport {
    simulate(ir, topo, cfg).report
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub size_bytes: u64,
    pub makespan_us: f64,
    pub util_intra: f64,
    pub util_inter: f64,
}

/// One timed run per buffer size; `size` is the byte size of each rank's
/// input buffer.
pub fn sweep(ir: &IrProgram, topo: &Topology, sizes: &[u64], cfg: &SimConfig) -> Vec<SweepRow> {
    let chunks = ir.nchunks.input.max(1) as f64;
    sizes
        .iter()
        .map(|&size| {
            let run_cfg = SimConfig { chunk_bytes: size as f64 / chunks, ..cfg.clone() };
            let run = simulate(ir, topo, &run_cfg);
            SweepRow {
                size_bytes: size,
                makespan_us: run.report.makespan_us.unwrap_or(0.0),
                util_intra: run.util_intra,
                util_inter: run.util_inter,
            }
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("size_bytes,makespan_us,util_intra,util_inter\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", r.size_bytes, r.makespan_us, r.util_intra, r.util_inter);
    }
    out
}
