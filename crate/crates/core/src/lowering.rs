//! Instruction DAG: lowering of chunk operations into point-to-point
//! instructions and the receive/send fusion peepholes.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use crate::dag::{escape, ChunkDag, ChunkOpKind, Span};
use crate::model::{Buffer, Rank};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Send,
    Recv,
    Copy,
    Reduce,
    RecvReduceCopy,
    RecvReduceCopySend,
    RecvReduceSend,
    RecvCopySend,
    Nop,
}

impl Opcode {
    pub const ALL: [Opcode; 9] = [
        Opcode::Send,
        Opcode::Recv,
        Opcode::Copy,
        Opcode::Reduce,
        Opcode::RecvReduceCopy,
        Opcode::RecvReduceCopySend,
        Opcode::RecvReduceSend,
        Opcode::RecvCopySend,
        Opcode::Nop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Opcode::Send => "send",
            Opcode::Recv => "recv",
            Opcode::Copy => "copy",
            Opcode::Reduce => "reduce",
            Opcode::RecvReduceCopy => "rrc",
            Opcode::RecvReduceCopySend => "rrcs",
            Opcode::RecvReduceSend => "rrs",
            Opcode::RecvCopySend => "rcs",
            Opcode::Nop => "nop",
        }
    }

    pub fn parse(s: &str) -> Option<Opcode> {
        Opcode::ALL.into_iter().find(|o| o.as_str() == s)
    }

    /// Pushes data to a peer.
    pub fn sends(self) -> bool {
        matches!(
            self,
            Opcode::Send | Opcode::RecvReduceCopySend | Opcode::RecvReduceSend | Opcode::RecvCopySend
        )
    }

    /// Pops data from a peer.
    pub fn receives(self) -> bool {
        matches!(
            self,
            Opcode::Recv
                | Opcode::RecvReduceCopy
                | Opcode::RecvReduceCopySend
                | Opcode::RecvReduceSend
                | Opcode::RecvCopySend
        )
    }

    pub fn is_fused(self) -> bool {
        matches!(self, Opcode::RecvReduceCopySend | Opcode::RecvReduceSend | Opcode::RecvCopySend)
    }

    pub fn is_local(self) -> bool {
        matches!(self, Opcode::Copy | Opcode::Reduce)
    }

    /// Whether the instruction stores into its `dst` span.
    pub fn writes_dst(self) -> bool {
        matches!(
            self,
            Opcode::Recv
                | Opcode::Copy
                | Opcode::Reduce
                | Opcode::RecvReduceCopy
                | Opcode::RecvReduceCopySend
                | Opcode::RecvCopySend
        )
    }

    /// Whether the instruction loads its `src` span.
    pub fn reads_src(self) -> bool {
        matches!(
            self,
            Opcode::Send
                | Opcode::Copy
                | Opcode::Reduce
                | Opcode::RecvReduceCopy
                | Opcode::RecvReduceCopySend
                | Opcode::RecvReduceSend
        )
    }

    /// Whether the instruction loads its `dst` span before writing it.
    pub fn reads_dst(self) -> bool {
        self == Opcode::Reduce
    }
}

impl std::fmt::Display for Opcode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A chunk offset within one of a rank's buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Loc {
    pub buffer: Buffer,
    pub index: usize,
}

impl Loc {
    pub fn new(buffer: Buffer, index: usize) -> Self {
        Loc { buffer, index }
    }

    fn of(span: &Span) -> Self {
        Loc { buffer: span.buffer, index: span.index }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstrNode {
    pub id: usize,
    pub rank: Rank,
    pub opcode: Opcode,
    /// For a plain send, `dst` names the location on the receiving rank.
    pub src: Loc,
    pub dst: Loc,
    pub count: usize,
    pub send_peer: Option<Rank>,
    pub recv_peer: Option<Rank>,
    pub channel: Option<u32>,
    pub tb_hint: Option<u32>,
    /// Trace position of the chunk operation this came from.
    pub trace_order: usize,
}

impl InstrNode {
    pub fn src_span(&self) -> Span {
        Span::new(self.rank, self.src.buffer, self.src.index, self.count)
    }

    pub fn dst_span(&self) -> Span {
        Span::new(self.rank, self.dst.buffer, self.dst.index, self.count)
    }

    /// Local spans loaded by the instruction.
    pub fn reads(&self) -> Vec<Span> {
        let mut out = Vec::new();
        if self.opcode.reads_src() {
            out.push(self.src_span());
        }
        if self.opcode.reads_dst() {
            out.push(self.dst_span());
        }
        out
    }

    /// Local span stored by the instruction, if any.
    pub fn writes(&self) -> Option<Span> {
        self.opcode.writes_dst().then(|| self.dst_span())
    }

    fn label(&self) -> String {
        let mut s = format!("r{} {} ", self.rank, self.opcode);
        match self.opcode {
            Opcode::Send => {
                let _ = write!(s, "{}[{}] ->r{}", self.src.buffer, self.src.index, self.send_peer.unwrap_or(0));
            }
            _ => {
                let _ = write!(s, "{}[{}]", self.dst.buffer, self.dst.index);
                if let Some(p) = self.recv_peer {
                    let _ = write!(s, " <-r{p}");
                }
                if self.opcode.sends() {
                    let _ = write!(s, " ->r{}", self.send_peer.unwrap_or(0));
                }
            }
        }
        if self.count > 1 {
            let _ = write!(s, " x{}", self.count);
        }
        if let Some(c) = self.channel {
            let _ = write!(s, " ch{c}");
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FusionStats {
    pub rcs: usize,
    pub rrcs: usize,
    pub rrs: usize,
    /// Fused instructions whose upstream sender is itself fused.
    pub chained: usize,
}

impl FusionStats {
    pub fn total(&self) -> usize {
        self.rcs + self.rrcs + self.rrs
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstrDag {
    pub name: String,
    pub ranks: usize,
    pub nodes: Vec<InstrNode>,
    /// Sender to receiver, always across ranks.
    pub comm_edges: Vec<(usize, usize)>,
    /// Execution order within a rank.
    pub proc_edges: Vec<(usize, usize)>,
    pub fusion: FusionStats,
}

/// Expands every chunk operation into instructions.
pub fn lower(dag: &ChunkDag) -> InstrDag {
    let mut nodes: Vec<InstrNode> = Vec::new();
    let mut comm = Vec::new();
    // chunk node -> (rank, instruction) endpoints
    let mut endpoints: HashMap<usize, Vec<(Rank, usize)>> = HashMap::new();
    let push = |nodes: &mut Vec<InstrNode>, mut n: InstrNode| {
        n.id = nodes.len();
        nodes.push(n);
        nodes.len() - 1
    };
    for op in dag.ops() {
        let base = InstrNode {
            id: 0,
            rank: op.dst.rank,
            opcode: Opcode::Nop,
            src: Loc::of(&op.src),
            dst: Loc::of(&op.dst),
            count: op.src.count,
            send_peer: None,
            recv_peer: None,
            channel: op.directives.ch,
            tb_hint: None,
            trace_order: op.trace_order,
        };
        let ends = if !op.is_remote() {
            let opcode = if op.kind == ChunkOpKind::Copy { Opcode::Copy } else { Opcode::Reduce };
            let tb_hint = op.directives.sendtb.or(op.directives.recvtb);
            let id = push(&mut nodes, InstrNode { opcode, tb_hint, ..base });
            vec![(op.dst.rank, id)]
        } else {
            let send = push(
                &mut nodes,
                InstrNode {
                    rank: op.src.rank,
                    opcode: Opcode::Send,
                    send_peer: Some(op.dst.rank),
                    tb_hint: op.directives.sendtb,
                    ..base.clone()
                },
            );
            let opcode = if op.kind == ChunkOpKind::Copy { Opcode::Recv } else { Opcode::RecvReduceCopy };
            let recv = push(
                &mut nodes,
                InstrNode {
                    opcode,
                    src: Loc::of(&op.dst),
                    recv_peer: Some(op.src.rank),
                    tb_hint: op.directives.recvtb,
                    ..base
                },
            );
            comm.push((send, recv));
            vec![(op.src.rank, send), (op.dst.rank, recv)]
        };
        endpoints.insert(op.id, ends);
    }
    let endpoint = |chunk: usize, rank: Rank| {
        endpoints.get(&chunk).and_then(|v| v.iter().find(|(r, _)| *r == rank)).map(|&(_, id)| id)
    };
    let mut proc = BTreeSet::new();
    for e in dag.true_edges.iter().chain(&dag.false_edges) {
        if let (Some(a), Some(b)) = (endpoint(e.from, e.rank), endpoint(e.to, e.rank)) {
            if a != b {
                proc.insert((a, b));
            }
        }
    }
    InstrDag {
        name: dag.name.clone(),
        ranks: dag.spec.ranks,
        nodes,
        comm_edges: comm,
        proc_edges: proc.into_iter().collect(),
        fusion: FusionStats::default(),
    }
}

struct Graph {
    alive: Vec<bool>,
    comm: BTreeSet<(usize, usize)>,
    proc: BTreeSet<(usize, usize)>,
    succ: Vec<BTreeSet<usize>>,
    pred: Vec<BTreeSet<usize>>,
}

impl Graph {
    fn new(idag: &InstrDag) -> Self {
        let n = idag.nodes.len();
        let mut g = Graph {
            alive: vec![true; n],
            comm: idag.comm_edges.iter().copied().collect(),
            proc: idag.proc_edges.iter().copied().collect(),
            succ: vec![BTreeSet::new(); n],
            pred: vec![BTreeSet::new(); n],
        };
        for &(a, b) in g.comm.iter().chain(&g.proc) {
            g.succ[a].insert(b);
            g.pred[b].insert(a);
        }
        g
    }

    fn proc_succ(&self, a: usize) -> impl Iterator<Item = usize> + '_ {
        self.succ[a].iter().copied().filter(move |&b| self.proc.contains(&(a, b)))
    }

    fn proc_pred(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        self.pred[b].iter().copied().filter(move |&a| self.proc.contains(&(a, b)))
    }

    /// Nodes on the longest path from each node to a sink, itself included.
    fn rev_depth(&self) -> Vec<usize> {
        let order = self.topo_order();
        let mut d = vec![0; self.alive.len()];
        for &v in order.iter().rev() {
            d[v] = 1 + self.succ[v].iter().map(|&s| d[s]).max().unwrap_or(0);
        }
        d
    }

    fn topo_order(&self) -> Vec<usize> {
        let n = self.alive.len();
        let mut indeg: Vec<usize> = (0..n).map(|v| self.pred[v].len()).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&v| self.alive[v] && indeg[v] == 0).collect();
        let mut order = Vec::new();
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &s in &self.succ[v] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    queue.push_back(s);
                }
            }
        }
        order
    }

    /// Whether `to` is reachable from `from` without the direct edge.
    fn indirect_path(&self, from: usize, to: usize) -> bool {
        let mut seen = vec![false; self.alive.len()];
        let mut stack: Vec<usize> = self.succ[from].iter().copied().filter(|&s| s != to).collect();
        while let Some(v) = stack.pop() {
            if v == to {
                return true;
            }
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            stack.extend(self.succ[v].iter().copied());
        }
        false
    }

    /// The preset channel of the chain of communication edges through `v`.
    fn chain_channel(&self, nodes: &[InstrNode], v: usize) -> Option<u32> {
        let mut seen = BTreeSet::from([v]);
        let mut stack = vec![v];
        while let Some(x) = stack.pop() {
            if let Some(c) = nodes[x].channel {
                return Some(c);
            }
            let next = self.succ[x]
                .iter()
                .filter(|&&y| self.comm.contains(&(x, y)))
                .chain(self.pred[x].iter().filter(|&&y| self.comm.contains(&(y, x))));
            for &y in next {
                if seen.insert(y) {
                    stack.push(y);
                }
            }
        }
        None
    }

    /// Folds `b` into `a`.
    fn merge(&mut self, a: usize, b: usize) {
        self.alive[b] = false;
        let remap = |x: usize| if x == b { a } else { x };
        for set in [&mut self.comm, &mut self.proc] {
            let touched: Vec<(usize, usize)> = set.iter().copied().filter(|&(x, y)| x == b || y == b).collect();
            for e in touched {
                set.remove(&e);
                let (x, y) = (remap(e.0), remap(e.1));
                if x != y {
                    set.insert((x, y));
                }
            }
        }
        let succ_b = std::mem::take(&mut self.succ[b]);
        let pred_b = std::mem::take(&mut self.pred[b]);
        self.succ[a].remove(&b);
        for s in succ_b {
            self.pred[s].remove(&b);
            if s != a {
                self.pred[s].insert(a);
                self.succ[a].insert(s);
            }
        }
        for p in pred_b {
            self.succ[p].remove(&b);
            if p != a {
                self.succ[p].insert(a);
                self.pred[a].insert(p);
            }
        }
    }
}

fn compatible<T: PartialEq>(a: Option<T>, b: Option<T>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => x == y,
        _ => true,
    }
}

/// Applies the rcs, rrcs and rrs peepholes until none applies.
pub fn fuse(idag: &InstrDag) -> InstrDag {
    let mut nodes = idag.nodes.clone();
    let mut g = Graph::new(idag);
    let mut stats = FusionStats::default();
    loop {
        let depth = g.rev_depth();
        let mut fused = None;
        for r in 0..nodes.len() {
            if !g.alive[r] || !matches!(nodes[r].opcode, Opcode::Recv | Opcode::RecvReduceCopy) {
                continue;
            }
            let written = nodes[r].dst_span();
            let mut best: Option<usize> = None;
            for s in g.proc_succ(r) {
                let n = &nodes[s];
                if n.opcode != Opcode::Send || n.src_span() != written {
                    continue;
                }
                if !compatible(g.chain_channel(&nodes, r), g.chain_channel(&nodes, s))
                    || !compatible(nodes[r].tb_hint, n.tb_hint)
                {
                    continue;
                }
                // the send must observe exactly the received value
                let other_writer = g
                    .proc_pred(s)
                    .any(|p| p != r && nodes[p].writes().is_some_and(|w| w.overlaps(&written)));
                if other_writer || g.indirect_path(r, s) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(b) => (depth[s], std::cmp::Reverse((n.trace_order, s)))
                        > (depth[b], std::cmp::Reverse((nodes[b].trace_order, b))),
                };
                if better {
                    best = Some(s);
                }
            }
            if let Some(s) = best {
                fused = Some((r, s));
                break;
            }
        }
        let Some((r, s)) = fused else { break };
        let opcode = match nodes[r].opcode {
            Opcode::Recv => {
                stats.rcs += 1;
                Opcode::RecvCopySend
            }
            _ if result_dead(&g, &nodes, r, s) => {
                stats.rrs += 1;
                Opcode::RecvReduceSend
            }
            _ => {
                stats.rrcs += 1;
                Opcode::RecvReduceCopySend
            }
        };
        let send = nodes[s].clone();
        let channel = g.chain_channel(&nodes, r).or(g.chain_channel(&nodes, s));
        let recv = &mut nodes[r];
        recv.opcode = opcode;
        recv.send_peer = send.send_peer;
        recv.channel = channel;
        recv.tb_hint = recv.tb_hint.or(send.tb_hint);
        g.merge(r, s);
    }

    // compact ids, preserving relative order
    let mut new_id = vec![usize::MAX; nodes.len()];
    let mut out = Vec::new();
    for (i, mut n) in nodes.into_iter().enumerate() {
        if g.alive[i] {
            new_id[i] = out.len();
            n.id = out.len();
            out.push(n);
        }
    }
    let comm: Vec<(usize, usize)> = g.comm.iter().map(|&(a, b)| (new_id[a], new_id[b])).collect();
    let proc: Vec<(usize, usize)> = g.proc.iter().map(|&(a, b)| (new_id[a], new_id[b])).collect();
    for &(a, b) in &comm {
        if out[b].opcode.is_fused() && out[a].opcode.is_fused() {
            stats.chained += 1;
        }
    }
    let mut comm = comm;
    comm.sort_unstable();
    let mut proc = proc;
    proc.sort_unstable();
    InstrDag { name: idag.name.clone(), ranks: idag.ranks, nodes: out, comm_edges: comm, proc_edges: proc, fusion: stats }
}

/// The reduced value at `r` is read only by `send` and later fully
/// overwritten before anything else touches it.
fn result_dead(g: &Graph, nodes: &[InstrNode], r: usize, send: usize) -> bool {
    let span = nodes[r].dst_span();
    let mut overwritten = false;
    for s in g.proc_succ(r) {
        if s == send {
            continue;
        }
        let n = &nodes[s];
        if n.reads().iter().any(|x| x.overlaps(&span)) {
            return false;
        }
        if let Some(w) = n.writes() {
            if w == span {
                overwritten = true;
            } else if w.overlaps(&span) {
                return false;
            }
        }
    }
    overwritten
}

impl InstrDag {
    pub fn instruction_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn count_opcode(&self, op: Opcode) -> usize {
        self.nodes.iter().filter(|n| n.opcode == op).count()
    }

    pub fn fused_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.opcode.is_fused()).count()
    }

    /// Nodes in a topological order of the combined edge set, or `None` on a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.nodes.len();
        let mut succ = vec![Vec::new(); n];
        let mut indeg = vec![0usize; n];
        for &(a, b) in self.comm_edges.iter().chain(&self.proc_edges) {
            succ[a].push(b);
            indeg[b] += 1;
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &s in &succ[v] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    queue.push_back(s);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Communication edges on the longest path ending at each node.
    pub fn comm_depth(&self) -> Vec<usize> {
        self.comm_depth_within(&vec![true; self.nodes.len()])
    }

    /// Communication edges on the longest path starting at each node.
    pub fn comm_rev_depth(&self) -> Vec<usize> {
        let order = self.topological_order().expect("instruction DAG is acyclic");
        let comm: BTreeSet<(usize, usize)> = self.comm_edges.iter().copied().collect();
        let mut succ = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in self.comm_edges.iter().chain(&self.proc_edges) {
            succ[a].push(b);
        }
        let mut d = vec![0usize; self.nodes.len()];
        for &v in order.iter().rev() {
            d[v] = succ[v]
                .iter()
                .map(|&s| d[s] + usize::from(comm.contains(&(v, s))))
                .max()
                .unwrap_or(0);
        }
        d
    }

    fn comm_depth_within(&self, keep: &[bool]) -> Vec<usize> {
        let order = self.topological_order().expect("instruction DAG is acyclic");
        let comm: BTreeSet<(usize, usize)> = self.comm_edges.iter().copied().collect();
        let mut pred = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in self.comm_edges.iter().chain(&self.proc_edges) {
            if keep[a] && keep[b] {
                pred[b].push(a);
            }
        }
        let mut d = vec![0usize; self.nodes.len()];
        for v in order {
            d[v] = pred[v]
                .iter()
                .map(|&p| d[p] + usize::from(comm.contains(&(p, v))))
                .max()
                .unwrap_or(0);
        }
        d
    }

    /// Longest chain of communication edges over the whole program.
    pub fn max_comm_depth(&self) -> usize {
        self.comm_depth().into_iter().max().unwrap_or(0)
    }

    /// Longest chain of communication edges among instructions touching
    /// chunks `[first, first + count)` of any buffer.
    pub fn comm_depth_for_chunks(&self, first: usize, count: usize) -> usize {
        let keep: Vec<bool> = self
            .nodes
            .iter()
            .map(|n| {
                let hit = |i: usize| i < first + count && first < i + n.count;
                hit(n.src.index) || hit(n.dst.index)
            })
            .collect();
        self.comm_depth_within(&keep)
            .into_iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(d, _)| d)
            .max()
            .unwrap_or(0)
    }

    /// Graphviz rendering: communication edges in red, processing edges gray.
    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{}\" {{", escape(&self.name));
        let _ = writeln!(out, "  node [shape=box, fontname=\"monospace\"];");
        for r in 0..self.ranks {
            let _ = writeln!(out, "  subgraph cluster_r{r} {{");
            let _ = writeln!(out, "    label=\"rank {r}\";");
            for n in self.nodes.iter().filter(|n| n.rank == r) {
                let _ = writeln!(out, "    i{} [label=\"{}\"];", n.id, escape(&n.label()));
            }
            out.push_str("  }\n");
        }
        for (a, b) in &self.comm_edges {
            let _ = writeln!(out, "  i{a} -> i{b} [color=red];");
        }
        for (a, b) in &self.proc_edges {
            let _ = writeln!(out, "  i{a} -> i{b} [color=gray];");
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{Directives, ProgramBuilder};
    use crate::model::{allreduce_spec, CollectiveSpec};

    const D: Directives = Directives { ch: None, sendtb: None, recvtb: None };

    fn custom(r: usize, c: usize) -> ProgramBuilder {
        ProgramBuilder::new("t", CollectiveSpec::custom(r, c, c, true))
    }

    #[test]
    fn remote_copy_is_send_and_recv() {
        let mut b = custom(2, 1);
        let c = b.chunk(0, Buffer::Input, 0, 1).unwrap();
        b.copy(&c, 1, Buffer::Scratch, 0, D).unwrap();
        let i = lower(&b.finalize());
        assert_eq!(i.nodes.len(), 2);
        assert_eq!(i.comm_edges, vec![(0, 1)]);
        assert_eq!((i.nodes[0].opcode, i.nodes[0].rank), (Opcode::Send, 0));
        assert_eq!((i.nodes[1].opcode, i.nodes[1].rank), (Opcode::Recv, 1));
    }

    #[test]
    fn local_reduce_is_one_instruction() {
        let mut b = custom(1, 2);
        let d = b.chunk(0, Buffer::Input, 0, 1).unwrap();
        let s = b.chunk(0, Buffer::Input, 1, 1).unwrap();
        b.reduce(&d, &s, D).unwrap();
        let i = lower(&b.finalize());
        assert_eq!(i.nodes.len(), 1);
        assert_eq!(i.nodes[0].opcode, Opcode::Reduce);
        assert!(i.comm_edges.is_empty());
    }

    #[test]
    fn forwarding_hop_becomes_rcs() {
        let mut b = custom(3, 1);
        let c = b.chunk(0, Buffer::Input, 0, 1).unwrap();
        let c = b.copy(&c, 1, Buffer::Input, 0, D).unwrap();
        b.copy(&c, 2, Buffer::Input, 0, D).unwrap();
        let i = fuse(&lower(&b.finalize()));
        let ops: Vec<_> = i.nodes.iter().map(|n| n.opcode).collect();
        assert_eq!(ops, vec![Opcode::Send, Opcode::RecvCopySend, Opcode::Recv]);
        assert_eq!(i.fusion.rcs, 1);
        assert_eq!(i.comm_edges.len(), 2);
    }

    #[test]
    fn reduce_then_send_is_rrcs_or_rrs() {
        // the partial sum at rank 1 is kept: rrcs
        let mut b = ProgramBuilder::new("t", allreduce_spec(3, 1).unwrap());
        let c = b.chunk(0, Buffer::Input, 0, 1).unwrap();
        let d = b.chunk(1, Buffer::Input, 0, 1).unwrap();
        let c = b.reduce(&d, &c, D).unwrap();
        let d = b.chunk(2, Buffer::Input, 0, 1).unwrap();
        b.reduce(&d, &c, D).unwrap();
        let i = fuse(&lower(&b.finalize()));
        assert_eq!(i.fusion.rrcs, 1);
        assert_eq!(i.fusion.rrs, 0);

        // overwriting it afterwards makes the local store dead: rrs
        let mut b = ProgramBuilder::new("t", allreduce_spec(3, 1).unwrap());
        let c = b.chunk(0, Buffer::Input, 0, 1).unwrap();
        let d = b.chunk(1, Buffer::Input, 0, 1).unwrap();
        let c = b.reduce(&d, &c, D).unwrap();
        let d = b.chunk(2, Buffer::Input, 0, 1).unwrap();
        let full = b.reduce(&d, &c, D).unwrap();
        b.copy(&full, 1, Buffer::Input, 0, D).unwrap();
        let i = fuse(&lower(&b.finalize()));
        assert_eq!(i.fusion.rrs, 1);
        assert_eq!(i.count_opcode(Opcode::RecvReduceSend), 1);
    }

    #[test]
    fn longest_path_send_wins() {
        // rank 1 receives and forwards to rank 2 (which forwards on to 3) and rank 3
        let mut b = custom(4, 1);
        let c = b.chunk(0, Buffer::Input, 0, 1).unwrap();
        let c = b.copy(&c, 1, Buffer::Scratch, 0, D).unwrap();
        b.copy(&c, 3, Buffer::Scratch, 0, D).unwrap();
        let c2 = b.copy(&c, 2, Buffer::Scratch, 0, D).unwrap();
        b.copy(&c2, 3, Buffer::Scratch, 1, D).unwrap();
        let i = fuse(&lower(&b.finalize()));
        let rcs: Vec<_> = i.nodes.iter().filter(|n| n.opcode == Opcode::RecvCopySend).collect();
        assert_eq!(rcs.len(), 2);
        assert!(rcs.iter().any(|n| n.rank == 1 && n.send_peer == Some(2)));
        assert!(i.nodes.iter().any(|n| n.rank == 1 && n.opcode == Opcode::Send && n.send_peer == Some(3)));
    }

    #[test]
    fn mismatched_channels_do_not_fuse() {
        let mut b = custom(3, 1);
        let c = b.chunk(0, Buffer::Input, 0, 1).unwrap();
        let c = b.copy(&c, 1, Buffer::Input, 0, Directives::channel(0)).unwrap();
        b.copy(&c, 2, Buffer::Input, 0, Directives::channel(1)).unwrap();
        let i = fuse(&lower(&b.finalize()));
        assert_eq!(i.fused_count(), 0);
    }

    #[test]
    fn fusion_preserves_acyclicity_and_shrinks() {
        let mut b = ProgramBuilder::new("t", allreduce_spec(4, 4).unwrap());
        for lane in 0..4 {
            let mut c = b.chunk(lane, Buffer::Input, lane, 1).unwrap();
            for step in 1..4 {
                let d = b.chunk((lane + step) % 4, Buffer::Input, lane, 1).unwrap();
                c = b.reduce(&d, &c, D).unwrap();
            }
            for step in 0..3 {
                c = b.copy(&c, (lane + step) % 4, Buffer::Input, lane, D).unwrap();
            }
        }
        let dag = b.finalize();
        assert!(dag.verify().passed());
        let lowered = lower(&dag);
        assert_eq!(lowered.nodes.len(), 2 * dag.remote_op_count());
        let fused = fuse(&lowered);
        assert!(fused.nodes.len() < lowered.nodes.len());
        assert!(fused.topological_order().is_some());
        assert_eq!(fused.max_comm_depth(), lowered.max_comm_depth());
    }
}
