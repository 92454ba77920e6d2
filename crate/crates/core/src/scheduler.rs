//! Channel and thread-block assignment, cross-block synchronization and the
//! static FIFO-slot check.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};

use thiserror::Error;

use crate::ir::{ChunkCounts, Connection, Dep, IrGpu, IrOp, IrProgram, IrThreadBlock, OpAddr, Protocol, SizeRange};
use crate::lowering::{InstrDag, Opcode};
use crate::model::{Buffer, CollectiveSpec, Rank, Topology};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("no channel below {max} keeps rank {rank}'s connections exclusive")]
    ChannelBudgetExceeded { rank: Rank, max: u32 },
    #[error("channel directives on rank {rank} put two peers on one connection of channel {channel}")]
    ChannelConflict { rank: Rank, channel: u32 },
    #[error("rank {rank} needs {blocks} thread blocks but only {max} are available")]
    ThreadBlockBudgetExceeded { rank: Rank, blocks: usize, max: usize },
    #[error("thread block hints must be given for every remote operation or for none (instruction {instr} has none)")]
    PartialHints { instr: usize },
    #[error("thread block {tb} on rank {rank}: {detail}")]
    HintConflict { rank: Rank, tb: usize, detail: String },
    #[error("no global order keeps every connection first-in first-out ({pending} instructions left)")]
    OrderStall { pending: usize },
    #[error("instruction graph has a cycle")]
    Cycle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub max_channels: u32,
    pub max_threadblocks: usize,
    /// Maximum cross-block dependencies carried by one instruction.
    pub max_deps: usize,
    pub protocol: Protocol,
    pub size_range: SizeRange,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            max_channels: 32,
            max_threadblocks: 108,
            max_deps: 4,
            protocol: Protocol::Simple,
            size_range: SizeRange::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn for_topology(topo: &Topology) -> Self {
        ScheduleConfig {
            max_channels: topo.max_channels,
            max_threadblocks: topo.max_threadblocks,
            ..Default::default()
        }
    }
}

/// Peers a thread block may connect to on one channel.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Group {
    sends: BTreeSet<Rank>,
    recvs: BTreeSet<Rank>,
}

impl Group {
    fn valid(&self) -> bool {
        self.sends.len() <= 1 && self.recvs.len() <= 1
    }
}

/// Connection groups per `(rank, channel)`: instructions that must share a
/// thread block because they share a connection.
#[derive(Default)]
struct Groups {
    by_slot: HashMap<(Rank, u32), Vec<Group>>,
}

impl Groups {
    /// Adds the peers of one instruction; returns the merged group.
    fn add(groups: &mut Vec<Group>, send: Option<Rank>, recv: Option<Rank>) -> Group {
        let mut merged = Group::default();
        merged.sends.extend(send);
        merged.recvs.extend(recv);
        let mut i = 0;
        while i < groups.len() {
            let g = &groups[i];
            let hit = send.is_some_and(|p| g.sends.contains(&p)) || recv.is_some_and(|p| g.recvs.contains(&p));
            if hit {
                let g = groups.swap_remove(i);
                merged.sends.extend(g.sends);
                merged.recvs.extend(g.recvs);
            } else {
                i += 1;
            }
        }
        groups.push(merged.clone());
        merged
    }

    /// Tries to place every `(rank, send, recv)` on `channel`; commits only on success.
    fn try_place(&mut self, links: &[(Rank, Option<Rank>, Option<Rank>)], channel: u32) -> Result<(), Rank> {
        let mut staged: HashMap<Rank, Vec<Group>> = HashMap::new();
        for &(rank, send, recv) in links {
            let groups = staged
                .entry(rank)
                .or_insert_with(|| self.by_slot.get(&(rank, channel)).cloned().unwrap_or_default());
            if !Groups::add(groups, send, recv).valid() {
                return Err(rank);
            }
        }
        for (rank, groups) in staged {
            self.by_slot.insert((rank, channel), groups);
        }
        Ok(())
    }

    fn group_of(&self, rank: Rank, channel: u32, send: Option<Rank>, recv: Option<Rank>) -> Option<&Group> {
        self.by_slot.get(&(rank, channel))?.iter().find(|g| {
            send.is_some_and(|p| g.sends.contains(&p)) || recv.is_some_and(|p| g.recvs.contains(&p))
        })
    }
}

fn union_find_root(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Chains of communicating instructions: connected components of the
/// communication edges. Fused instructions join their incoming and outgoing
/// transfers into one chain.
fn comm_chains(idag: &InstrDag) -> Vec<Vec<usize>> {
    let n = idag.nodes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for &(a, b) in &idag.comm_edges {
        let (ra, rb) = (union_find_root(&mut parent, a), union_find_root(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut chains: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for v in 0..n {
        let n = &idag.nodes[v];
        if n.send_peer.is_some() || n.recv_peer.is_some() {
            let r = union_find_root(&mut parent, v);
            chains.entry(r).or_default().push(v);
        }
    }
    chains.into_values().collect()
}

/// Channel of every communicating instruction (`None` for local ones).
pub fn assign_channels(idag: &InstrDag, max_channels: u32) -> Result<Vec<Option<u32>>, ScheduleError> {
    let mut groups = Groups::default();
    assign_channels_into(idag, max_channels, &mut groups)
}

fn assign_channels_into(
    idag: &InstrDag,
    max_channels: u32,
    groups: &mut Groups,
) -> Result<Vec<Option<u32>>, ScheduleError> {
    let chains = comm_chains(idag);
    let mut channel = vec![None; idag.nodes.len()];
    let links = |chain: &[usize]| -> Vec<(Rank, Option<Rank>, Option<Rank>)> {
        chain.iter().map(|&v| (idag.nodes[v].rank, idag.nodes[v].send_peer, idag.nodes[v].recv_peer)).collect()
    };
    let preset = |chain: &[usize]| chain.iter().find_map(|&v| idag.nodes[v].channel);
    for chain in chains.iter().filter(|c| preset(c).is_some()) {
        let ch = preset(chain).unwrap_or(0);
        if ch >= max_channels {
            let rank = idag.nodes[chain[0]].rank;
            return Err(ScheduleError::ChannelBudgetExceeded { rank, max: max_channels });
        }
        groups
            .try_place(&links(chain), ch)
            .map_err(|rank| ScheduleError::ChannelConflict { rank, channel: ch })?;
        for &v in chain {
            channel[v] = Some(ch);
        }
    }
    for chain in chains.iter().filter(|c| preset(c).is_none()) {
        let l = links(chain);
        let mut placed = None;
        let mut last_rank = idag.nodes[chain[0]].rank;
        for ch in 0..max_channels {
            match groups.try_place(&l, ch) {
                Ok(()) => {
                    placed = Some(ch);
                    break;
                }
                Err(rank) => last_rank = rank,
            }
        }
        let ch = placed.ok_or(ScheduleError::ChannelBudgetExceeded { rank: last_rank, max: max_channels })?;
        for &v in chain {
            channel[v] = Some(ch);
        }
    }
    Ok(channel)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub send_peer: Option<Rank>,
    pub recv_peer: Option<Rank>,
    pub channel: u32,
    /// Instruction ids in execution order.
    pub instrs: Vec<usize>,
}

/// Placement of every instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    /// `blocks[rank][tb]`
    pub blocks: Vec<Vec<BlockLayout>>,
    /// `(rank, tb, position)` per instruction id.
    pub place: Vec<(Rank, usize, usize)>,
    /// The global topological order the blocks were filled in.
    pub order: Vec<usize>,
}

/// Creates thread blocks, sorts instructions globally and places each one.
pub fn assign_threadblocks(idag: &InstrDag, cfg: &ScheduleConfig) -> Result<Layout, ScheduleError> {
    let mut groups = Groups::default();
    let channel = assign_channels_into(idag, cfg.max_channels, &mut groups)?;
    let n = idag.nodes.len();
    let ranks = idag.ranks;

    let comm_nodes: Vec<usize> =
        (0..n).filter(|&v| idag.nodes[v].send_peer.is_some() || idag.nodes[v].recv_peer.is_some()).collect();
    let hinted = comm_nodes.iter().filter(|&&v| idag.nodes[v].tb_hint.is_some()).count();
    if hinted > 0 && hinted < comm_nodes.len() {
        let instr = *comm_nodes.iter().find(|&&v| idag.nodes[v].tb_hint.is_none()).unwrap_or(&0);
        return Err(ScheduleError::PartialHints { instr });
    }
    let manual = hinted > 0;

    // block of every communicating instruction
    let mut blocks: Vec<Vec<BlockLayout>> = vec![Vec::new(); ranks];
    let mut block_of: Vec<Option<usize>> = vec![None; n];
    if manual {
        type Peers = (BTreeSet<Rank>, BTreeSet<Rank>, BTreeSet<u32>);
        let mut spec: Vec<BTreeMap<usize, Peers>> = vec![BTreeMap::new(); ranks];
        for v in 0..n {
            let node = &idag.nodes[v];
            if let Some(tb) = node.tb_hint {
                let e = spec[node.rank].entry(tb as usize).or_default();
                e.0.extend(node.send_peer);
                e.1.extend(node.recv_peer);
                e.2.extend(channel[v]);
                block_of[v] = Some(tb as usize);
            }
        }
        for (rank, tbs) in spec.into_iter().enumerate() {
            let count = tbs.keys().next_back().map_or(0, |&k| k + 1);
            let mut layout = vec![BlockLayout { send_peer: None, recv_peer: None, channel: 0, instrs: vec![] }; count];
            let mut owners: HashMap<(bool, Rank, u32), usize> = HashMap::new();
            for (tb, (sends, recvs, chans)) in tbs {
                let conflict = |detail: String| ScheduleError::HintConflict { rank, tb, detail };
                if sends.len() > 1 || recvs.len() > 1 {
                    return Err(conflict(format!("send peers {sends:?} and receive peers {recvs:?}")));
                }
                if chans.len() > 1 {
                    return Err(conflict(format!("channels {chans:?}")));
                }
                let ch = chans.into_iter().next().unwrap_or(0);
                let (sp, rp) = (sends.into_iter().next(), recvs.into_iter().next());
                for (dir, peer) in [(true, sp), (false, rp)] {
                    if let Some(p) = peer {
                        if let Some(other) = owners.insert((dir, p, ch), tb) {
                            return Err(conflict(format!("connection to {p} on channel {ch} also used by block {other}")));
                        }
                    }
                }
                layout[tb] = BlockLayout { send_peer: sp, recv_peer: rp, channel: ch, instrs: vec![] };
            }
            blocks[rank] = layout;
        }
    } else {
        let mut keyed: Vec<BTreeMap<(u32, i64, i64), usize>> = vec![BTreeMap::new(); ranks];
        for &v in &comm_nodes {
            let node = &idag.nodes[v];
            let ch = channel[v].unwrap_or(0);
            let g = groups
                .group_of(node.rank, ch, node.send_peer, node.recv_peer)
                .expect("placed instruction belongs to a group");
            let key = (
                ch,
                g.sends.iter().next().map_or(-1, |&p| p as i64),
                g.recvs.iter().next().map_or(-1, |&p| p as i64),
            );
            let next = keyed[node.rank].len();
            keyed[node.rank].entry(key).or_insert(next);
        }
        for rank in 0..ranks {
            // ids follow the sorted tuple order
            let keys: Vec<(u32, i64, i64)> = keyed[rank].keys().copied().collect();
            for (tb, key) in keys.iter().enumerate() {
                keyed[rank].insert(*key, tb);
                let peer = |p: i64| (p >= 0).then_some(p as Rank);
                blocks[rank].push(BlockLayout {
                    send_peer: peer(key.1),
                    recv_peer: peer(key.2),
                    channel: key.0,
                    instrs: vec![],
                });
            }
        }
        for &v in &comm_nodes {
            let node = &idag.nodes[v];
            let ch = channel[v].unwrap_or(0);
            let g = groups.group_of(node.rank, ch, node.send_peer, node.recv_peer).expect("grouped");
            let key = (
                ch,
                g.sends.iter().next().map_or(-1, |&p| p as i64),
                g.recvs.iter().next().map_or(-1, |&p| p as i64),
            );
            block_of[v] = Some(keyed[node.rank][&key]);
        }
    }

    let order = global_order(idag, &channel)?;

    let mut place = vec![(0, 0, 0); n];
    let mut last_pos: Vec<Vec<Option<usize>>> = blocks.iter().map(|b| vec![None; b.len()]).collect();
    for (pos, &v) in order.iter().enumerate() {
        let rank = idag.nodes[v].rank;
        let tb = match block_of[v] {
            Some(tb) => tb,
            None => {
                let hint = idag.nodes[v].tb_hint.map(|t| t as usize);
                match hint {
                    Some(tb) => {
                        while blocks[rank].len() <= tb {
                            blocks[rank].push(BlockLayout { send_peer: None, recv_peer: None, channel: 0, instrs: vec![] });
                            last_pos[rank].push(None);
                        }
                        tb
                    }
                    None if blocks[rank].is_empty() => {
                        blocks[rank].push(BlockLayout { send_peer: None, recv_peer: None, channel: 0, instrs: vec![] });
                        last_pos[rank].push(None);
                        0
                    }
                    // the block whose latest instruction is earliest
                    None => (0..blocks[rank].len())
                        .min_by_key(|&tb| (last_pos[rank][tb].map_or(-1, |p| p as i64), tb))
                        .unwrap_or(0),
                }
            }
        };
        place[v] = (rank, tb, blocks[rank][tb].instrs.len());
        blocks[rank][tb].instrs.push(v);
        last_pos[rank][tb] = Some(pos);
    }
    for (rank, b) in blocks.iter().enumerate() {
        if b.len() > cfg.max_threadblocks {
            return Err(ScheduleError::ThreadBlockBudgetExceeded { rank, blocks: b.len(), max: cfg.max_threadblocks });
        }
    }
    Ok(Layout { blocks, place, order })
}

/// Topological order by (fewest hops so far, most hops remaining, trace
/// position), restricted so that receives on every connection come in the
/// order their sends were issued.
/// A global topological order in which every connection receives in the
/// order it sends. When the greedy pass stalls because a receive at the head
/// of a connection waits on a receive queued behind some head, the send of
/// the waited-on receive is pinned ahead of that head's send and the pass
/// restarts. Pinned edges join sends of one connection, which share a block.
fn global_order(idag: &InstrDag, channel: &[Option<u32>]) -> Result<Vec<usize>, ScheduleError> {
    let n = idag.nodes.len();
    if idag.topological_order().is_none() {
        return Err(ScheduleError::Cycle);
    }
    let mut edges: Vec<(usize, usize)> = idag.comm_edges.iter().chain(&idag.proc_edges).copied().collect();
    loop {
        match greedy_order(idag, channel, &edges) {
            Ok(order) => return Ok(order),
            Err(stall) => {
                let pending = n - stall.placed;
                let Some(pin) = stall.pin else {
                    return Err(ScheduleError::OrderStall { pending });
                };
                edges.push(pin);
                if !is_acyclic(n, &edges) {
                    return Err(ScheduleError::OrderStall { pending });
                }
            }
        }
    }
}

fn is_acyclic(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut succ = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for &(a, b) in edges {
        succ[a].push(b);
        indeg[b] += 1;
    }
    let mut ready: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = ready.pop() {
        seen += 1;
        for &w in &succ[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push(w);
            }
        }
    }
    seen == n
}

struct Stall {
    placed: usize,
    /// Send-to-send edge that resolves the stall.
    pin: Option<(usize, usize)>,
}

fn greedy_order(idag: &InstrDag, channel: &[Option<u32>], edges: &[(usize, usize)]) -> Result<Vec<usize>, Stall> {
    let n = idag.nodes.len();
    let depth = idag.comm_depth();
    let rev = idag.comm_rev_depth();
    let mut succ = vec![Vec::new(); n];
    let mut preds = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for &(a, b) in edges {
        succ[a].push(b);
        preds[b].push(a);
        indeg[b] += 1;
    }
    let mut partner_of_send: HashMap<usize, usize> = HashMap::new();
    let mut send_of_recv: HashMap<usize, usize> = HashMap::new();
    let mut conn_of_recv: HashMap<usize, (Rank, Rank, u32)> = HashMap::new();
    for &(a, b) in &idag.comm_edges {
        partner_of_send.insert(a, b);
        send_of_recv.insert(b, a);
        conn_of_recv.insert(b, (idag.nodes[a].rank, idag.nodes[b].rank, channel[b].unwrap_or(0)));
    }
    let key = |v: usize| Reverse((depth[v], Reverse(rev[v]), idag.nodes[v].trace_order, v));
    let mut heap = BinaryHeap::new();
    let mut queues: BTreeMap<(Rank, Rank, u32), VecDeque<usize>> = BTreeMap::new();
    let mut data_ready = vec![false; n];
    let at_head = |v: usize, queues: &BTreeMap<(Rank, Rank, u32), VecDeque<usize>>| match conn_of_recv.get(&v) {
        Some(c) => queues.get(c).and_then(|q| q.front()) == Some(&v),
        None => true,
    };
    for v in 0..n {
        if indeg[v] == 0 {
            data_ready[v] = true;
            heap.push(key(v));
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut done = vec![false; n];
    while let Some(Reverse((_, _, _, v))) = heap.pop() {
        order.push(v);
        done[v] = true;
        if let Some(&r) = partner_of_send.get(&v) {
            queues.entry(conn_of_recv[&r]).or_default().push_back(r);
        }
        if let Some(c) = conn_of_recv.get(&v) {
            let q = queues.get_mut(c).expect("queued");
            q.pop_front();
            if let Some(&next) = q.front() {
                if data_ready[next] {
                    heap.push(key(next));
                }
            }
        }
        for &s in &succ[v] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                data_ready[s] = true;
                if at_head(s, &queues) {
                    heap.push(key(s));
                }
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }

    // where each queued receive sits: (head of its queue, is it the head)
    let mut position: HashMap<usize, (usize, bool)> = HashMap::new();
    for q in queues.values() {
        if let Some(&head) = q.front() {
            for (k, &r) in q.iter().enumerate() {
                position.insert(r, (head, k == 0));
            }
        }
    }
    for q in queues.values() {
        let Some(&head) = q.front() else { continue };
        if data_ready[head] {
            continue;
        }
        // pending ancestors of the stuck head, nearest first
        let mut seen = vec![false; n];
        let mut stack = vec![head];
        while let Some(v) = stack.pop() {
            for &p in &preds[v] {
                if done[p] || seen[p] {
                    continue;
                }
                seen[p] = true;
                if let Some(&(blocker, false)) = position.get(&p) {
                    return Err(Stall { placed: order.len(), pin: Some((send_of_recv[&p], send_of_recv[&blocker])) });
                }
                stack.push(p);
            }
        }
    }
    Err(Stall { placed: order.len(), pin: None })
}

/// Turns cross-block processing edges into semaphore waits and emits the
/// program. Instructions needing more than `max_deps` waits get `nop`
/// instructions in front of them carrying the excess.
pub fn insert_syncs(
    idag: &InstrDag,
    layout: &Layout,
    spec: &CollectiveSpec,
    cfg: &ScheduleConfig,
) -> IrProgram {
    let n = idag.nodes.len();
    let mut preds = vec![Vec::new(); n];
    for &(a, b) in &idag.proc_edges {
        preds[b].push(a);
    }
    let max_deps = cfg.max_deps.max(1);
    // deps in terms of (tb, instruction id), before nop insertion
    let mut pending: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (rank, blocks) in layout.blocks.iter().enumerate() {
        for (tb, block) in blocks.iter().enumerate() {
            let mut waited: BTreeMap<usize, usize> = BTreeMap::new();
            for &v in &block.instrs {
                let mut need: BTreeMap<usize, usize> = BTreeMap::new();
                for &p in &preds[v] {
                    let (pr, ptb, ppos) = layout.place[p];
                    debug_assert_eq!(pr, rank);
                    if ptb == tb {
                        continue;
                    }
                    let e = need.entry(ptb).or_insert(ppos);
                    *e = (*e).max(ppos);
                }
                need.retain(|dtb, pos| waited.get(dtb).is_none_or(|w| *w < *pos));
                for (&dtb, &pos) in &need {
                    waited.insert(dtb, pos);
                    pending[v].push((dtb, blocks[dtb].instrs[pos]));
                }
            }
        }
    }
    let mut has_dep = vec![false; n];
    for deps in &pending {
        for &(_, target) in deps {
            has_dep[target] = true;
        }
    }

    // final steps after nop insertion
    let mut step_of = vec![0usize; n];
    // (instruction or nop, deps as (tb, instruction)) per block
    type Shape = Vec<(Option<usize>, Vec<(usize, usize)>)>;
    let mut shapes: Vec<Vec<Shape>> = Vec::new();
    for blocks in &layout.blocks {
        let mut per_rank = Vec::new();
        for block in blocks {
            let mut ops: Shape = Vec::new();
            for &v in &block.instrs {
                let mut deps = pending[v].clone();
                while deps.len() > max_deps {
                    let rest = deps.split_off(max_deps);
                    ops.push((None, deps));
                    deps = rest;
                }
                step_of[v] = ops.len();
                ops.push((Some(v), deps));
            }
            per_rank.push(ops);
        }
        shapes.push(per_rank);
    }

    let mut scratch = 0usize;
    for node in &idag.nodes {
        for l in [node.src, node.dst] {
            if l.buffer == Buffer::Scratch {
                scratch = scratch.max(l.index + node.count);
            }
        }
    }

    let gpus = shapes
        .into_iter()
        .enumerate()
        .map(|(rank, per_rank)| IrGpu {
            rank,
            threadblocks: per_rank
                .into_iter()
                .enumerate()
                .map(|(tb, ops)| {
                    let b = &layout.blocks[rank][tb];
                    let ops = ops
                        .into_iter()
                        .enumerate()
                        .map(|(step, (v, deps))| {
                            let deps = deps.into_iter().map(|(dtb, t)| Dep { tb: dtb, step: step_of[t] }).collect();
                            match v {
                                None => IrOp {
                                    step,
                                    opcode: Opcode::Nop,
                                    src: None,
                                    dst: None,
                                    count: 0,
                                    deps,
                                    has_dep: false,
                                },
                                Some(v) => {
                                    let node = &idag.nodes[v];
                                    IrOp {
                                        step,
                                        opcode: node.opcode,
                                        src: Some(node.src),
                                        dst: Some(node.dst),
                                        count: node.count,
                                        deps,
                                        has_dep: has_dep[v],
                                    }
                                }
                            }
                        })
                        .collect();
                    IrThreadBlock { id: tb, send_peer: b.send_peer, recv_peer: b.recv_peer, channel: b.channel, ops }
                })
                .collect(),
        })
        .collect();

    IrProgram {
        name: idag.name.clone(),
        collective: spec.kind,
        protocol: cfg.protocol,
        inplace: spec.in_place,
        nchunks: ChunkCounts { input: spec.input_chunks, output: spec.output_chunks, scratch },
        size_range: cfg.size_range,
        gpus,
    }
}

/// Runs channel assignment, thread-block assignment and synchronization insertion.
pub fn schedule(idag: &InstrDag, spec: &CollectiveSpec, cfg: &ScheduleConfig) -> Result<IrProgram, ScheduleError> {
    let layout = assign_threadblocks(idag, cfg)?;
    Ok(insert_syncs(idag, &layout, spec, cfg))
}

/// A connection whose `s`-slot buffer can fill up in a way that closes a
/// waiting cycle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotViolation {
    pub sender: (Rank, usize),
    pub receiver: (Rank, usize),
    pub channel: u32,
    /// Step of the first send in the sender block that may wait forever.
    pub send_step: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SlotReport {
    pub violations: Vec<SlotViolation>,
    /// The program deadlocks even with unbounded slots.
    pub cyclic_without_slots: bool,
}

impl SlotReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty() && !self.cyclic_without_slots
    }
}

/// Statically checks that no execution can deadlock with `slots` FIFO slots
/// per connection.
///
/// Every instruction becomes two events: its receive half (or start) and its
/// completion (which includes any push). Edges encode block order, semaphore
/// waits, the k-th push preceding the k-th pop, and the k-th pop preceding
/// push k+`slots`. The program can stall exactly when this graph has a cycle.
pub fn check_slots(ir: &IrProgram, slots: usize) -> SlotReport {
    let mut base = HashMap::new();
    let mut next = 0usize;
    for g in &ir.gpus {
        for t in &g.threadblocks {
            base.insert((g.rank, t.id), next);
            next += 2 * t.ops.len();
        }
    }
    let start = |r: Rank, tb: usize, s: usize| base[&(r, tb)] + 2 * s;
    let done = |r: Rank, tb: usize, s: usize| base[&(r, tb)] + 2 * s + 1;
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut sends: BTreeMap<Connection, Vec<OpAddr>> = BTreeMap::new();
    let mut recvs: BTreeMap<Connection, Vec<OpAddr>> = BTreeMap::new();
    for g in &ir.gpus {
        for t in &g.threadblocks {
            for o in &t.ops {
                edges.push((start(g.rank, t.id, o.step), done(g.rank, t.id, o.step)));
                if o.step > 0 {
                    edges.push((done(g.rank, t.id, o.step - 1), start(g.rank, t.id, o.step)));
                }
                for d in &o.deps {
                    if base.contains_key(&(g.rank, d.tb)) && d.step < ir.gpus[g.rank].threadblocks[d.tb].ops.len() {
                        edges.push((done(g.rank, d.tb, d.step), start(g.rank, t.id, o.step)));
                    }
                }
                if o.opcode.sends() {
                    if let Some(p) = t.send_peer {
                        sends.entry((g.rank, p, t.channel)).or_default().push((g.rank, t.id, o.step));
                    }
                }
                if o.opcode.receives() {
                    if let Some(p) = t.recv_peer {
                        recvs.entry((p, g.rank, t.channel)).or_default().push((g.rank, t.id, o.step));
                    }
                }
            }
        }
    }
    let mut capacity_edges = Vec::new();
    for (conn, s) in &sends {
        let empty = Vec::new();
        let r = recvs.get(conn).unwrap_or(&empty);
        for (k, &(sr, stb, ss)) in s.iter().enumerate() {
            if let Some(&(rr, rtb, rs)) = r.get(k) {
                edges.push((done(sr, stb, ss), start(rr, rtb, rs)));
            }
            if k >= slots {
                if let Some(&(rr, rtb, rs)) = r.get(k - slots) {
                    capacity_edges.push((start(rr, rtb, rs), done(sr, stb, ss), *conn, (sr, stb, ss), (rr, rtb)));
                }
            }
        }
    }
    let mut report = SlotReport::default();
    if has_cycle(next, &edges) {
        report.cyclic_without_slots = true;
        return report;
    }
    let mut all = edges.clone();
    all.extend(capacity_edges.iter().map(|c| (c.0, c.1)));
    if !has_cycle(next, &all) {
        return report;
    }
    let mut succ = vec![Vec::new(); next];
    for &(a, b) in &all {
        succ[a].push(b);
    }
    let mut seen_conn = BTreeSet::new();
    for (from, to, conn, sender, receiver) in capacity_edges {
        if seen_conn.contains(&conn) {
            continue;
        }
        // the capacity edge lies on a cycle when its head reaches its tail
        if reaches(&succ, to, from) {
            seen_conn.insert(conn);
            report.violations.push(SlotViolation {
                sender: (sender.0, sender.1),
                receiver,
                channel: conn.2,
                send_step: sender.2,
            });
        }
    }
    report
}

fn has_cycle(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut succ = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for &(a, b) in edges {
        succ[a].push(b);
        indeg[b] += 1;
    }
    let mut queue: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = queue.pop() {
        seen += 1;
        for &s in &succ[v] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                queue.push(s);
            }
        }
    }
    seen != n
}

fn reaches(succ: &[Vec<usize>], from: usize, to: usize) -> bool {
    let mut seen = vec![false; succ.len()];
    let mut stack = vec![from];
    while let Some(v) = stack.pop() {
        if v == to {
            return true;
        }
        if std::mem::replace(&mut seen[v], true) {
            continue;
        }
        stack.extend(succ[v].iter().copied());
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{Directives, ProgramBuilder};
    use crate::ir::validate;
    use crate::lowering::{fuse, lower};
    use crate::model::{allreduce_spec, CollectiveSpec};

    fn ring(r: usize, parallel: u32) -> (InstrDag, CollectiveSpec) {
        let mut b = ProgramBuilder::new("ring", allreduce_spec(r, r).unwrap());
        b.parallelize(parallel, |b, _| {
            for lane in 0..r {
                let mut c = b.chunk((lane + 1) % r, Buffer::Input, lane, 1)?;
                for step in 1..r {
                    let d = b.chunk((lane + 1 + step) % r, Buffer::Input, lane, 1)?;
                    c = b.reduce(&d, &c, Directives::default())?;
                }
                for step in 1..r {
                    c = b.copy(&c, (lane + step) % r, Buffer::Input, lane, Directives::default())?;
                }
            }
            Ok(())
        })
        .unwrap();
        let dag = b.finalize();
        let spec = dag.spec.clone();
        (fuse(&lower(&dag)), spec)
    }

    #[test]
    fn single_ring_is_one_block_per_gpu() {
        let (idag, spec) = ring(4, 1);
        let ir = schedule(&idag, &spec, &ScheduleConfig::default()).unwrap();
        assert!(ir.gpus.iter().all(|g| g.threadblocks.len() == 1));
        assert_eq!(ir.channels(), BTreeSet::from([0]));
        assert!(validate(&ir, &Topology::single_node(4)).is_ok());
        assert!(check_slots(&ir, 1).is_ok());
    }

    #[test]
    fn parallel_instances_get_disjoint_blocks() {
        let (idag, spec) = ring(4, 2);
        let ir = schedule(&idag, &spec, &ScheduleConfig::default()).unwrap();
        for g in &ir.gpus {
            assert_eq!(g.threadblocks.len(), 2);
            let chans: BTreeSet<u32> = g.threadblocks.iter().map(|t| t.channel).collect();
            assert_eq!(chans.len(), 2);
        }
    }

    #[test]
    fn local_only_program_has_one_peerless_block() {
        let mut b = ProgramBuilder::new("local", CollectiveSpec::custom(1, 2, 2, true));
        let c = b.chunk(0, Buffer::Input, 0, 1).unwrap();
        b.copy(&c, 0, Buffer::Scratch, 0, Directives::default()).unwrap();
        let dag = b.finalize();
        let ir = schedule(&lower(&dag), &dag.spec, &ScheduleConfig::default()).unwrap();
        assert_eq!(ir.gpus[0].threadblocks.len(), 1);
        assert_eq!(ir.gpus[0].threadblocks[0].send_peer, None);
    }

    #[test]
    fn explicit_channels_are_kept() {
        let mut b = ProgramBuilder::new("ch", CollectiveSpec::custom(2, 2, 2, true));
        let c = b.chunk(0, Buffer::Input, 0, 1).unwrap();
        b.copy(&c, 1, Buffer::Scratch, 0, Directives::channel(0)).unwrap();
        let c = b.chunk(0, Buffer::Input, 1, 1).unwrap();
        b.copy(&c, 1, Buffer::Scratch, 1, Directives::channel(1)).unwrap();
        let dag = b.finalize();
        let ir = schedule(&lower(&dag), &dag.spec, &ScheduleConfig::default()).unwrap();
        let chans: Vec<u32> = ir.gpus[0].threadblocks.iter().map(|t| t.channel).collect();
        assert_eq!(chans, vec![0, 1]);
    }

    #[test]
    fn channel_budget() {
        let mut b = ProgramBuilder::new("ch", CollectiveSpec::custom(2, 1, 1, true));
        let c = b.chunk(0, Buffer::Input, 0, 1).unwrap();
        b.copy(&c, 1, Buffer::Scratch, 0, Directives::channel(3)).unwrap();
        let dag = b.finalize();
        let cfg = ScheduleConfig { max_channels: 2, ..Default::default() };
        assert!(matches!(
            schedule(&lower(&dag), &dag.spec, &cfg),
            Err(ScheduleError::ChannelBudgetExceeded { .. })
        ));
    }

    #[test]
    fn partial_and_conflicting_hints() {
        let mut b = ProgramBuilder::new("h", CollectiveSpec::custom(3, 2, 2, true));
        let c = b.chunk(0, Buffer::Input, 0, 1).unwrap();
        b.copy(&c, 1, Buffer::Scratch, 0, Directives::threadblocks(0, 0)).unwrap();
        let c = b.chunk(0, Buffer::Input, 1, 1).unwrap();
        b.copy(&c, 2, Buffer::Scratch, 0, Directives::default()).unwrap();
        let dag = b.finalize();
        assert!(matches!(
            schedule(&lower(&dag), &dag.spec, &ScheduleConfig::default()),
            Err(ScheduleError::PartialHints { .. })
        ));

        // two send peers in one manual block
        let mut b = ProgramBuilder::new("h", CollectiveSpec::custom(3, 2, 2, true));
        let c = b.chunk(0, Buffer::Input, 0, 1).unwrap();
        b.copy(&c, 1, Buffer::Scratch, 0, Directives::threadblocks(0, 0)).unwrap();
        let c = b.chunk(0, Buffer::Input, 1, 1).unwrap();
        b.copy(&c, 2, Buffer::Scratch, 0, Directives::threadblocks(0, 0)).unwrap();
        let dag = b.finalize();
        assert!(matches!(
            schedule(&lower(&dag), &dag.spec, &ScheduleConfig::default()),
            Err(ScheduleError::HintConflict { rank: 0, tb: 0, .. })
        ));
    }

    #[test]
    fn manual_hints_set_block_ids() {
        let mut b = ProgramBuilder::new("h", CollectiveSpec::custom(2, 2, 2, true));
        let c = b.chunk(0, Buffer::Input, 0, 1).unwrap();
        b.copy(&c, 1, Buffer::Scratch, 0, Directives::threadblocks(1, 0)).unwrap();
        let dag = b.finalize();
        let ir = schedule(&lower(&dag), &dag.spec, &ScheduleConfig::default()).unwrap();
        assert_eq!(ir.gpus[0].threadblocks.len(), 2);
        assert_eq!(ir.gpus[0].threadblocks[1].send_peer, Some(1));
        assert!(ir.gpus[0].threadblocks[0].ops.is_empty());
    }

    #[test]
    fn threadblock_budget() {
        let (idag, spec) = ring(4, 2);
        let cfg = ScheduleConfig { max_threadblocks: 1, ..Default::default() };
        assert!(matches!(
            schedule(&idag, &spec, &cfg),
            Err(ScheduleError::ThreadBlockBudgetExceeded { blocks: 2, max: 1, .. })
        ));
    }

    #[test]
    fn unfused_forwarding_crosses_blocks_with_a_dep() {
        let mut b = ProgramBuilder::new("fwd", CollectiveSpec::custom(3, 1, 1, true));
        let c = b.chunk(0, Buffer::Input, 0, 1).unwrap();
        let c = b.copy(&c, 1, Buffer::Input, 0, Directives::default()).unwrap();
        b.copy(&c, 2, Buffer::Input, 0, Directives::default()).unwrap();
        let dag = b.finalize();
        let ir = schedule(&lower(&dag), &dag.spec, &ScheduleConfig::default()).unwrap();
        let g1 = &ir.gpus[1];
        assert_eq!(g1.threadblocks.len(), 2);
        let deps: Vec<_> = g1.threadblocks.iter().flat_map(|t| &t.ops).flat_map(|o| &o.deps).collect();
        assert_eq!(deps.len(), 1);
        assert!(validate(&ir, &Topology::single_node(3)).is_ok());
    }

    #[test]
    fn excess_deps_become_nops() {
        // rank 0 receives five chunks on five blocks, then one local copy reads all of them
        let mut b = ProgramBuilder::new("fan", CollectiveSpec::custom(6, 6, 6, true));
        for q in 1..6 {
            let c = b.chunk(q, Buffer::Input, 0, 1).unwrap();
            b.copy(&c, 0, Buffer::Scratch, q, Directives::default()).unwrap();
        }
        let c = b.chunk(0, Buffer::Scratch, 1, 5).unwrap();
        b.copy(&c, 0, Buffer::Output, 1, Directives::default()).unwrap();
        let dag = b.finalize();
        let cfg = ScheduleConfig { max_deps: 2, ..Default::default() };
        let ir = schedule(&lower(&dag), &dag.spec, &cfg).unwrap();
        assert!(ir.count_opcode(Opcode::Nop) >= 1);
        assert!(ir.ops().all(|(_, _, o)| o.deps.len() <= 2));
        assert!(validate(&ir, &Topology::single_node(6)).is_ok());
    }
}
