//! The traced Chunk DAG: replay semantics and postcondition verification.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::frontend::Directives;
use crate::model::{
    check_postcondition, reduce_values, Buffer, BufferState, ChunkValue, CollectiveSpec, Rank,
    VerificationReport,
};

/// A contiguous run of chunk slots on one rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub rank: Rank,
    pub buffer: Buffer,
    pub index: usize,
    pub count: usize,
}

impl Span {
    pub fn new(rank: Rank, buffer: Buffer, index: usize, count: usize) -> Self {
        Span { rank, buffer, index, count }
    }

    pub fn end(&self) -> usize {
        self.index + self.count
    }

    pub fn slots(&self) -> impl Iterator<Item = (Rank, Buffer, usize)> + '_ {
        (self.index..self.end()).map(move |i| (self.rank, self.buffer, i))
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.rank == other.rank
            && self.buffer == other.buffer
            && self.index < other.end()
            && other.index < self.end()
    }
}

impl std::fmt::Display for Span {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.count == 1 {
            write!(f, "r{} {}[{}]", self.rank, self.buffer, self.index)
        } else {
            write!(f, "r{} {}[{}..{}]", self.rank, self.buffer, self.index, self.end())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChunkOpKind {
    Source,
    Copy,
    Reduce,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkOpNode {
    pub id: usize,
    pub kind: ChunkOpKind,
    pub src: Span,
    pub dst: Span,
    /// Directives with the channel already resolved for parallel instances.
    pub directives: Directives,
    pub trace_order: usize,
    pub phase: Option<usize>,
    /// `(instance, factor)` when the node came from a parallelized fragment.
    pub instance: Option<(u32, u32)>,
}

impl ChunkOpNode {
    pub fn is_remote(&self) -> bool {
        self.kind != ChunkOpKind::Source && self.src.rank != self.dst.rank
    }
}

/// A dependency between two chunk operations arising from a slot on `rank`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DagEdge {
    pub from: usize,
    pub to: usize,
    pub rank: Rank,
}

#[derive(Clone, Debug)]
pub struct ChunkDag {
    pub name: String,
    /// The spec at the DAG's chunk granularity.
    pub spec: CollectiveSpec,
    /// The spec the program was written against.
    pub base_spec: CollectiveSpec,
    /// Number of sub-chunks per program-level chunk.
    pub granularity: usize,
    pub nodes: Vec<ChunkOpNode>,
    pub true_edges: Vec<DagEdge>,
    pub false_edges: Vec<DagEdge>,
    /// Deduced scratch size per rank, in DAG chunks.
    pub scratch: Vec<usize>,
    pub phases: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Default)]
struct SlotUse {
    writer: Option<usize>,
    readers: Vec<usize>,
}

impl ChunkDag {
    /// Assembles a DAG from trace-ordered operation nodes (sources are added
    /// here) and derives true and false edges.
    pub(crate) fn assemble(
        name: String,
        base_spec: CollectiveSpec,
        granularity: usize,
        ops: Vec<ChunkOpNode>,
        scratch: Vec<usize>,
        phases: Vec<String>,
        notes: Vec<String>,
    ) -> ChunkDag {
        let spec = base_spec.refine(granularity);
        let mut nodes = Vec::new();
        for r in 0..spec.ranks {
            for i in 0..spec.input_chunks {
                let span = Span::new(r, Buffer::Input, i, 1);
                nodes.push(ChunkOpNode {
                    id: nodes.len(),
                    kind: ChunkOpKind::Source,
                    src: span,
                    dst: span,
                    directives: Directives::default(),
                    trace_order: nodes.len(),
                    phase: None,
                    instance: None,
                });
            }
        }
        for mut op in ops {
            op.id = nodes.len();
            op.trace_order = nodes.len();
            nodes.push(op);
        }
        let mut dag = ChunkDag {
            name,
            spec,
            base_spec,
            granularity,
            nodes,
            true_edges: Vec::new(),
            false_edges: Vec::new(),
            scratch,
            phases,
            notes,
        };
        dag.rebuild_edges();
        dag
    }

    /// Recomputes true (read-after-write) and false (write-after-read,
    /// write-after-write) edges from the node list.
    pub fn rebuild_edges(&mut self) {
        let mut slots: HashMap<(Rank, Buffer, usize), SlotUse> = HashMap::new();
        let mut true_set = BTreeSet::new();
        let mut false_set = BTreeSet::new();
        for node in &self.nodes {
            if node.kind == ChunkOpKind::Source {
                slots.entry((node.dst.rank, node.dst.buffer, node.dst.index)).or_default().writer =
                    Some(node.id);
                continue;
            }
            let mut reads: Vec<(Rank, Buffer, usize)> = node.src.slots().collect();
            if node.kind == ChunkOpKind::Reduce {
                reads.extend(node.dst.slots());
            }
            for s in &reads {
                if let Some(w) = slots.get(s).and_then(|u| u.writer) {
                    true_set.insert(DagEdge { from: w, to: node.id, rank: s.0 });
                }
            }
            for s in node.dst.slots() {
                if let Some(u) = slots.get(&s) {
                    let mut preds: Vec<usize> = u.readers.clone();
                    preds.extend(u.writer);
                    for p in preds {
                        if p != node.id {
                            let e = DagEdge { from: p, to: node.id, rank: s.0 };
                            if !true_set.contains(&e) {
                                false_set.insert(e);
                            }
                        }
                    }
                }
            }
            for s in &reads {
                slots.entry(*s).or_default().readers.push(node.id);
            }
            for s in node.dst.slots() {
                let u = slots.entry(s).or_default();
                u.writer = Some(node.id);
                u.readers.clear();
            }
        }
        self.true_edges = true_set.into_iter().collect();
        self.false_edges = false_set.into_iter().collect();
    }

    pub fn ops(&self) -> impl Iterator<Item = &ChunkOpNode> {
        self.nodes.iter().filter(|n| n.kind != ChunkOpKind::Source)
    }

    pub fn source_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind == ChunkOpKind::Source).count()
    }

    pub fn remote_op_count(&self) -> usize {
        self.ops().filter(|n| n.is_remote()).count()
    }

    pub fn initial_state(&self) -> BufferState {
        BufferState::initial(&self.spec, &self.scratch)
    }

    /// Final buffer state after executing every node in trace order.
    pub fn replay(&self) -> BufferState {
        let order: Vec<usize> = (0..self.nodes.len()).collect();
        self.replay_order(&order)
    }

    /// Replays nodes in the given order. A failed reduction leaves the slot
    /// uninitialized so that verification reports it.
    pub fn replay_order(&self, order: &[usize]) -> BufferState {
        let mut state = self.initial_state();
        for &id in order {
            let node = &self.nodes[id];
            match node.kind {
                ChunkOpKind::Source => {}
                ChunkOpKind::Copy => {
                    let vals: Vec<ChunkValue> = node
                        .src
                        .slots()
                        .map(|(r, b, i)| state.get(r, b, i).clone())
                        .collect();
                    for (k, v) in vals.into_iter().enumerate() {
                        state.set(node.dst.rank, node.dst.buffer, node.dst.index + k, v);
                    }
                }
                ChunkOpKind::Reduce => {
                    let vals: Vec<ChunkValue> = (0..node.src.count)
                        .map(|k| {
                            let a = state.get(node.dst.rank, node.dst.buffer, node.dst.index + k);
                            let b = state.get(node.src.rank, node.src.buffer, node.src.index + k);
                            reduce_values(a, b).unwrap_or_default()
                        })
                        .collect();
                    for (k, v) in vals.into_iter().enumerate() {
                        state.set(node.dst.rank, node.dst.buffer, node.dst.index + k, v);
                    }
                }
            }
        }
        state
    }

    /// Checks the replayed final state against the collective's postcondition.
    pub fn verify(&self) -> VerificationReport {
        let mut report = check_postcondition(&self.spec, &self.replay());
        report.notes = self.notes.clone();
        report
    }

    /// Predecessor lists over true and false edges.
    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut preds = vec![Vec::new(); self.nodes.len()];
        for e in self.true_edges.iter().chain(&self.false_edges) {
            if !preds[e.to].contains(&e.from) {
                preds[e.to].push(e.from);
            }
        }
        preds
    }

    /// Graphviz rendering: true edges solid, false edges dashed.
    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{}\" {{", escape(&self.name));
        let _ = writeln!(out, "  node [shape=box, fontname=\"monospace\"];");
        for n in &self.nodes {
            let label = match n.kind {
                ChunkOpKind::Source => format!("source {}", n.dst),
                ChunkOpKind::Copy => format!("copy {} -> {}", n.src, n.dst),
                ChunkOpKind::Reduce => format!("reduce {} into {}", n.src, n.dst),
            };
            let _ = writeln!(out, "  n{} [label=\"{}\"];", n.id, escape(&label));
        }
        for e in &self.true_edges {
            let _ = writeln!(out, "  n{} -> n{};", e.from, e.to);
        }
        for e in &self.false_edges {
            let _ = writeln!(out, "  n{} -> n{} [style=dashed];", e.from, e.to);
        }
        out.push_str("}\n");
        out
    }
}

pub(crate) fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}
