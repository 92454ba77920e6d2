use std::collections::{HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Access, BlockedBlock, Deadlock, InstrEvent, Race, SimConfig, SimReport, Timeline, WaitReason};
use crate::ir::{IrOp, IrProgram};
use crate::lowering::{Loc, Opcode};
use crate::model::{check_postcondition, reduce_values, Buffer, BufferState, ChunkValue, CollectiveSpec, Rank};

type Clock = Vec<u32>;

fn join(into: &mut Clock, other: &Clock) {
    for (a, b) in into.iter_mut().zip(other) {
        *a = (*a).max(*b);
    }
}

struct Message {
    values: Vec<ChunkValue>,
    clock: Clock,
}

#[derive(Default)]
struct Connection {
    fifo: VecDeque<Message>,
    pushes: usize,
    pop_clocks: Vec<Clock>,
}

#[derive(Clone, Copy)]
struct Stamp {
    block: usize,
    clock: u32,
    access: Access,
}

#[derive(Default)]
struct SlotHistory {
    write: Option<Stamp>,
    reads: Vec<Stamp>,
}

struct Block {
    rank: Rank,
    tb: usize,
    send: Option<(Rank, Rank, u32)>,
    recv: Option<(Rank, Rank, u32)>,
    /// Completed instructions; doubles as the block's semaphore.
    pc: usize,
    /// Value a fused instruction still has to push.
    pending: Option<Vec<ChunkValue>>,
}

struct Machine<'a> {
    ir: &'a IrProgram,
    slots: usize,
    blocks: Vec<Block>,
    index: HashMap<(Rank, usize), usize>,
    conns: HashMap<(Rank, Rank, u32), Connection>,
    clocks: Vec<Clock>,
    /// Clock of each block right after each completed step.
    history: Vec<Vec<Clock>>,
    state: BufferState,
    slots_seen: HashMap<(Rank, Buffer, usize), SlotHistory>,
    races: Vec<Race>,
    errors: Vec<String>,
    timeline: Timeline,
    max_fifo: usize,
    actions: usize,
}

impl<'a> Machine<'a> {
    fn op(&self, b: usize) -> Option<&'a IrOp> {
        let blk = &self.blocks[b];
        self.ir.gpus[blk.rank].threadblocks[blk.tb].ops.get(blk.pc)
    }

    fn has_space(&self, conn: (Rank, Rank, u32)) -> bool {
        self.conns.get(&conn).map_or(0, |c| c.fifo.len()) < self.slots
    }

    fn waiting_on(&self, b: usize) -> Option<WaitReason> {
        let blk = &self.blocks[b];
        let op = self.op(b)?;
        let send_wait = || match blk.send {
            None => Some(WaitReason::MissingPeer),
            Some(c) if !self.has_space(c) => Some(WaitReason::Send { peer: c.1, channel: c.2 }),
            Some(_) => None,
        };
        if blk.pending.is_some() {
            return send_wait();
        }
        for d in &op.deps {
            let done = self.index.get(&(blk.rank, d.tb)).map_or(0, |&i| self.blocks[i].pc);
            if done <= d.step {
                return Some(WaitReason::Dep { tb: d.tb, step: d.step });
            }
        }
        if op.opcode.receives() {
            return match blk.recv {
                None => Some(WaitReason::MissingPeer),
                Some(c) if self.conns.get(&c).is_none_or(|q| q.fifo.is_empty()) => {
                    Some(WaitReason::Recv { peer: c.0, channel: c.2 })
                }
                Some(_) => None,
            };
        }
        if op.opcode.sends() {
            return send_wait();
        }
        None
    }

    fn normalize(&self, buffer: Buffer) -> Buffer {
        if self.state.in_place && buffer == Buffer::Output {
            Buffer::Input
        } else {
            buffer
        }
    }

    fn touch(&mut self, b: usize, loc: Loc, count: usize, write: bool) {
        let rank = self.blocks[b].rank;
        let buffer = self.normalize(loc.buffer);
        let me = Stamp {
            block: b,
            clock: self.clocks[b][b],
            access: Access { tb: self.blocks[b].tb, step: self.blocks[b].pc, write },
        };
        for index in loc.index..loc.index + count {
            let h = self.slots_seen.entry((rank, buffer, index)).or_default();
            let clock = &self.clocks[b];
            let unordered = |s: &Stamp| s.block != b && clock[s.block] < s.clock;
            let mut conflicts: Vec<Stamp> = h.write.iter().copied().filter(unordered).collect();
            if write {
                conflicts.extend(h.reads.iter().copied().filter(unordered));
            }
            for other in conflicts {
                self.races.push(Race { rank, buffer, index, first: other.access, second: me.access });
            }
            if write {
                h.write = Some(me);
                h.reads.clear();
            } else {
                h.reads.retain(|s| s.block != b);
                h.reads.push(me);
            }
        }
    }

    fn read(&mut self, b: usize, loc: Loc, count: usize) -> Vec<ChunkValue> {
        self.touch(b, loc, count, false);
        let rank = self.blocks[b].rank;
        (0..count).map(|k| self.state.get(rank, loc.buffer, loc.index + k).clone()).collect()
    }

    fn write(&mut self, b: usize, loc: Loc, values: Vec<ChunkValue>) {
        self.touch(b, loc, values.len(), true);
        let rank = self.blocks[b].rank;
        for (k, v) in values.into_iter().enumerate() {
            self.state.set(rank, loc.buffer, loc.index + k, v);
        }
    }

    fn reduce(&mut self, b: usize, xs: &[ChunkValue], ys: &[ChunkValue]) -> Vec<ChunkValue> {
        xs.iter()
            .zip(ys)
            .map(|(x, y)| {
                reduce_values(x, y).unwrap_or_else(|e| {
                    let blk = &self.blocks[b];
                    self.errors.push(format!("rank {} tb {} step {}: {e}", blk.rank, blk.tb, blk.pc));
                    ChunkValue::Uninitialized
                })
            })
            .collect()
    }

    fn push(&mut self, b: usize, values: Vec<ChunkValue>) {
        let key = self.blocks[b].send.expect("checked before acting");
        let conn = self.conns.entry(key).or_default();
        if conn.pushes >= self.slots {
            join(&mut self.clocks[b], &conn.pop_clocks[conn.pushes - self.slots]);
        }
        conn.pushes += 1;
        conn.fifo.push_back(Message { values, clock: self.clocks[b].clone() });
        self.max_fifo = self.max_fifo.max(conn.fifo.len());
    }

    fn pop(&mut self, b: usize, count: usize) -> Vec<ChunkValue> {
        let key = self.blocks[b].recv.expect("checked before acting");
        let conn = self.conns.get_mut(&key).expect("checked before acting");
        let msg = conn.fifo.pop_front().expect("checked before acting");
        join(&mut self.clocks[b], &msg.clock);
        conn.pop_clocks.push(self.clocks[b].clone());
        if msg.values.len() != count {
            let blk = &self.blocks[b];
            self.errors.push(format!(
                "rank {} tb {} step {}: received {} chunks but expected {count}",
                blk.rank,
                blk.tb,
                blk.pc,
                msg.values.len()
            ));
        }
        let mut v = msg.values;
        v.resize(count, ChunkValue::Uninitialized);
        v
    }

    fn complete(&mut self, b: usize, op: &IrOp) {
        let blk = &mut self.blocks[b];
        self.timeline.instructions.push(InstrEvent {
            rank: blk.rank,
            tb: blk.tb,
            step: op.step,
            tile: 0,
            opcode: op.opcode.as_str(),
            start_us: self.actions as f64,
            end_us: self.actions as f64,
        });
        blk.pc += 1;
        self.history[b].push(self.clocks[b].clone());
    }

    fn act(&mut self, b: usize) {
        let op = self.op(b).expect("runnable block has an instruction");
        self.clocks[b][b] += 1;
        if let Some(values) = self.blocks[b].pending.take() {
            self.push(b, values);
            self.complete(b, op);
            return;
        }
        let rank = self.blocks[b].rank;
        for d in &op.deps {
            let i = self.index[&(rank, d.tb)];
            let seen = self.history[i][d.step].clone();
            join(&mut self.clocks[b], &seen);
        }
        let src = op.src.unwrap_or(Loc::new(Buffer::Input, 0));
        let dst = op.dst.unwrap_or(Loc::new(Buffer::Input, 0));
        let n = op.count;
        match op.opcode {
            Opcode::Nop => {}
            Opcode::Send => {
                let v = self.read(b, src, n);
                self.push(b, v);
            }
            Opcode::Copy => {
                let v = self.read(b, src, n);
                self.write(b, dst, v);
            }
            Opcode::Reduce => {
                let cur = self.read(b, dst, n);
                let v = self.read(b, src, n);
                let r = self.reduce(b, &cur, &v);
                self.write(b, dst, r);
            }
            Opcode::Recv => {
                let v = self.pop(b, n);
                self.write(b, dst, v);
            }
            Opcode::RecvCopySend => {
                let v = self.pop(b, n);
                self.write(b, dst, v.clone());
                self.blocks[b].pending = Some(v);
            }
            Opcode::RecvReduceCopy | Opcode::RecvReduceCopySend | Opcode::RecvReduceSend => {
                let incoming = self.pop(b, n);
                let local = self.read(b, src, n);
                let r = self.reduce(b, &local, &incoming);
                if op.opcode.writes_dst() {
                    self.write(b, dst, r.clone());
                }
                if op.opcode.sends() {
                    self.blocks[b].pending = Some(r);
                }
            }
        }
        if self.blocks[b].pending.is_none() {
            self.complete(b, op);
        }
    }
}

/// Interprets `ir` with a pseudo-random interleaving of its thread blocks,
/// detecting deadlocks and unordered slot accesses, and checks the final
/// output buffers against `spec`.
pub fn run_functional(ir: &IrProgram, spec: &CollectiveSpec, cfg: &SimConfig) -> SimReport {
    let mut blocks = Vec::new();
    let mut index = HashMap::new();
    for g in &ir.gpus {
        for t in &g.threadblocks {
            index.insert((g.rank, t.id), blocks.len());
            blocks.push(Block {
                rank: g.rank,
                tb: t.id,
                send: t.send_peer.map(|p| (g.rank, p, t.channel)),
                recv: t.recv_peer.map(|p| (p, g.rank, t.channel)),
                pc: 0,
                pending: None,
            });
        }
    }
    let n = blocks.len();
    let scratch = vec![ir.nchunks.scratch; spec.ranks];
    let mut m = Machine {
        ir,
        slots: cfg.slots_for(ir.protocol),
        blocks,
        index,
        conns: HashMap::new(),
        clocks: vec![vec![0; n]; n],
        history: vec![Vec::new(); n],
        state: BufferState::initial(spec, &scratch),
        slots_seen: HashMap::new(),
        races: Vec::new(),
        errors: Vec::new(),
        timeline: Timeline::default(),
        max_fifo: 0,
        actions: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut runnable = Vec::with_capacity(n);
    let mut fuel_exhausted = false;
    loop {
        runnable.clear();
        runnable.extend((0..n).filter(|&b| m.op(b).is_some() && m.waiting_on(b).is_none()));
        if runnable.is_empty() {
            break;
        }
        if m.actions >= cfg.max_steps {
            fuel_exhausted = true;
            break;
        }
        let b = runnable[rng.gen_range(0..runnable.len())];
        m.act(b);
        m.actions += 1;
    }
    let blocked: Vec<BlockedBlock> = (0..n)
        .filter(|&b| m.op(b).is_some())
        .map(|b| BlockedBlock {
            rank: m.blocks[b].rank,
            tb: m.blocks[b].tb,
            step: m.blocks[b].pc,
            reason: m.waiting_on(b).unwrap_or(WaitReason::Dep { tb: m.blocks[b].tb, step: m.blocks[b].pc }),
        })
        .collect();
    let completed = blocked.is_empty();
    let postcondition = completed.then(|| check_postcondition(spec, &m.state));
    SimReport {
        completed,
        deadlock: (!completed).then_some(Deadlock { blocked, fuel_exhausted }),
        races: m.races,
        postcondition,
        errors: m.errors,
        final_state: Some(m.state),
        makespan_us: None,
        timeline: m.timeline,
        steps: m.actions,
        max_fifo: m.max_fifo,
    }
}
