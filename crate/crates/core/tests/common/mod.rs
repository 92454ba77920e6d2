#![allow(dead_code)]

use std::collections::VecDeque;

use cclforge_core::gallery;
use cclforge_core::{
    AlgorithmParams, BufferState, ChunkDag, ChunkValue, CollectiveKind, CompileOptions, Compiled, InputId,
};

/// A named gallery configuration.
#[derive(Clone, Debug)]
pub struct Config {
    pub algorithm: &'static str,
    pub params: AlgorithmParams,
}

impl Config {
    pub fn label(&self) -> String {
        let p = &self.params;
        match (p.ranks, p.nodes, p.gpus_per_node) {
            (Some(r), _, _) => format!("{}(R={r},ch={},par={})", self.algorithm, p.channels, p.parallel),
            (_, Some(n), Some(g)) => format!("{}(N={n},G={g},par={})", self.algorithm, p.parallel),
            _ => self.algorithm.to_string(),
        }
    }

    pub fn build(&self) -> ChunkDag {
        gallery::build(self.algorithm, &self.params).unwrap_or_else(|e| panic!("{}: {e}", self.label()))
    }

    pub fn compile(&self, fuse: bool) -> Compiled {
        let opts = CompileOptions { fuse, ..Default::default() };
        cclforge_core::compile(self.build(), &opts).unwrap_or_else(|e| panic!("{}: {e}", self.label()))
    }
}

fn flat(algorithm: &'static str, ranks: usize, channels: u32, parallel: u32) -> Config {
    Config { algorithm, params: AlgorithmParams { ranks: Some(ranks), channels, parallel, ..Default::default() } }
}

fn shaped(algorithm: &'static str, nodes: usize, gpus: usize, parallel: u32) -> Config {
    Config {
        algorithm,
        params: AlgorithmParams { nodes: Some(nodes), gpus_per_node: Some(gpus), parallel, ..Default::default() },
    }
}

/// Every gallery configuration with at most 16 ranks, N <= 4 and G <= 8.
pub fn sweep() -> Vec<Config> {
    let mut out = Vec::new();
    for r in 2..=16 {
        out.push(flat("ring_allreduce", r, 1, 1));
        out.push(flat("allpairs_allreduce", r, 1, 1));
    }
    for r in [2, 4, 8] {
        out.push(flat("ring_allreduce", r, 2, 1));
        out.push(flat("ring_allreduce", r, 1, 2));
    }
    for n in 1..=4 {
        for g in 1..=8 {
            if n * g > 16 || n * g < 2 {
                continue;
            }
            out.push(shaped("hierarchical_allreduce", n, g, 1));
            out.push(shaped("twostep_alltoall", n, g, 1));
            out.push(shaped("alltonext", n, g, 1));
            if n * g <= 8 {
                out.push(shaped("hierarchical_allreduce", n, g, 2));
            }
        }
    }
    out
}

/// A smaller sweep for the slower property checks.
pub fn small_sweep() -> Vec<Config> {
    vec![
        flat("ring_allreduce", 2, 1, 1),
        flat("ring_allreduce", 4, 1, 1),
        flat("ring_allreduce", 4, 2, 2),
        flat("allpairs_allreduce", 4, 1, 1),
        shaped("hierarchical_allreduce", 2, 2, 1),
        shaped("hierarchical_allreduce", 2, 3, 2),
        shaped("twostep_alltoall", 2, 2, 1),
        shaped("naive_alltoall", 2, 2, 1),
        shaped("alltonext", 2, 2, 1),
        shaped("alltonext", 3, 2, 1),
    ]
}

/// Expected output-buffer contents, computed from the collective's definition
/// at `granularity` sub-chunks per program chunk. `None` marks unconstrained slots.
pub fn expected_outputs(
    kind: CollectiveKind,
    ranks: usize,
    output_chunks: usize,
    granularity: usize,
) -> Vec<Vec<Option<ChunkValue>>> {
    let id = InputId::new;
    (0..ranks)
        .map(|r| {
            (0..output_chunks)
                .map(|j| match kind {
                    CollectiveKind::AllReduce => {
                        Some(ChunkValue::from_ids((0..ranks).map(|q| id(q, j))).expect("distinct ranks"))
                    }
                    CollectiveKind::AllToAll => {
                        // output chunk j holds part p of the chunk source s addressed to r
                        let (s, p) = (j / granularity, j % granularity);
                        Some(ChunkValue::Input(id(s, r * granularity + p)))
                    }
                    CollectiveKind::AllToNext => (r > 0).then(|| ChunkValue::Input(id(r - 1, j))),
                    other => panic!("no oracle for {other:?}"),
                })
                .collect()
        })
        .collect()
}

/// Mismatches between a final state and the independent oracle.
pub fn oracle_mismatches(dag: &ChunkDag, state: &BufferState) -> Vec<String> {
    let spec = &dag.spec;
    let expected = expected_outputs(spec.kind, spec.ranks, spec.output_chunks, dag.granularity);
    let mut bad = Vec::new();
    for (r, row) in expected.iter().enumerate() {
        let out = state.output(r);
        for (j, want) in row.iter().enumerate() {
            if let Some(want) = want {
                if out.get(j) != Some(want) {
                    bad.push(format!("rank {r} out[{j}]: want {want}, got {:?}", out.get(j)));
                }
            }
        }
    }
    bad
}

/// Canonical text of the output buffers, for bit-equal comparisons.
pub fn canonical_outputs(state: &BufferState, ranks: usize) -> String {
    let mut s = String::new();
    for r in 0..ranks {
        for v in state.output(r) {
            s.push_str(&v.to_string());
            s.push(' ');
        }
        s.push('\n');
    }
    s
}

/// Kahn's algorithm over `n` nodes with a caller-chosen tie break.
pub fn topological_order(n: usize, edges: &[(usize, usize)], mut pick: impl FnMut(usize) -> usize) -> Option<Vec<usize>> {
    let mut indeg = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for &(a, b) in edges {
        succ[a].push(b);
        indeg[b] += 1;
    }
    let mut ready: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while !ready.is_empty() {
        let v = ready.swap_remove(pick(ready.len()));
        order.push(v);
        for &w in &succ[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push(w);
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// Nodes reachable from `from` along `edges`.
pub fn reachable(n: usize, edges: &[(usize, usize)], from: usize) -> Vec<bool> {
    let mut succ = vec![Vec::new(); n];
    for &(a, b) in edges {
        succ[a].push(b);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([from]);
    seen[from] = true;
    while let Some(v) = queue.pop_front() {
        for &w in &succ[v] {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    seen
}

pub fn dag_edges(dag: &ChunkDag) -> Vec<(usize, usize)> {
    dag.true_edges.iter().chain(&dag.false_edges).map(|e| (e.from, e.to)).collect()
}

/// Configurations pinned by golden IR files, keyed by file stem.
pub fn golden_configs() -> Vec<(&'static str, Config)> {
    vec![
        ("ring_allreduce_r4", flat("ring_allreduce", 4, 1, 1)),
        ("ring_allreduce_r8_par2", flat("ring_allreduce", 8, 1, 2)),
        ("allpairs_allreduce_r4", flat("allpairs_allreduce", 4, 1, 1)),
        ("hierarchical_allreduce_n2_g3", shaped("hierarchical_allreduce", 2, 3, 1)),
        ("hierarchical_allreduce_n2_g2_par2", shaped("hierarchical_allreduce", 2, 2, 2)),
        ("twostep_alltoall_n2_g2", shaped("twostep_alltoall", 2, 2, 1)),
        ("naive_alltoall_n2_g2", shaped("naive_alltoall", 2, 2, 1)),
        ("alltonext_n2_g2", shaped("alltonext", 2, 2, 1)),
    ]
}

pub fn golden_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// A corruption of a serialized program and the JSON path its error must name.
pub struct SchemaMutation {
    pub label: &'static str,
    pub path: &'static str,
    pub apply: fn(&mut serde_json::Value),
}

pub fn schema_mutations() -> Vec<SchemaMutation> {
    use serde_json::json;
    fn op(v: &mut serde_json::Value, g: usize, o: usize) -> &mut serde_json::Value {
        &mut v["gpus"][g]["threadblocks"][0]["ops"][o]
    }
    fn remove(v: &mut serde_json::Value, key: &str) {
        v.as_object_mut().unwrap().remove(key);
    }
    vec![
        SchemaMutation { label: "missing name", path: "name", apply: |v| remove(v, "name") },
        SchemaMutation { label: "unknown collective", path: "collective", apply: |v| v["collective"] = json!("allsum") },
        SchemaMutation { label: "unknown protocol", path: "protocol", apply: |v| v["protocol"] = json!("fast") },
        SchemaMutation { label: "numeric inplace", path: "inplace", apply: |v| v["inplace"] = json!(1) },
        SchemaMutation { label: "negative input count", path: "nchunks.input", apply: |v| v["nchunks"]["input"] = json!(-1) },
        SchemaMutation {
            label: "missing scratch count",
            path: "nchunks.scratch",
            apply: |v| remove(&mut v["nchunks"], "scratch"),
        },
        SchemaMutation {
            label: "string min_bytes",
            path: "size_range.min_bytes",
            apply: |v| v["size_range"]["min_bytes"] = json!("x"),
        },
        SchemaMutation { label: "gpus not an array", path: "gpus", apply: |v| v["gpus"] = json!({}) },
        SchemaMutation { label: "string rank", path: "gpus[0].rank", apply: |v| v["gpus"][0]["rank"] = json!("zero") },
        SchemaMutation { label: "unknown gpu field", path: "gpus[1].extra", apply: |v| v["gpus"][1]["extra"] = json!(1) },
        SchemaMutation {
            label: "peer below -1",
            path: "gpus[0].threadblocks[0].send_peer",
            apply: |v| v["gpus"][0]["threadblocks"][0]["send_peer"] = json!(-2),
        },
        SchemaMutation {
            label: "negative channel",
            path: "gpus[0].threadblocks[0].channel",
            apply: |v| v["gpus"][0]["threadblocks"][0]["channel"] = json!(-1),
        },
        SchemaMutation {
            label: "missing ops",
            path: "gpus[1].threadblocks[0].ops",
            apply: |v| remove(&mut v["gpus"][1]["threadblocks"][0], "ops"),
        },
        SchemaMutation {
            label: "unknown opcode",
            path: "gpus[0].threadblocks[0].ops[0].opcode",
            apply: |v| op(v, 0, 0)["opcode"] = json!("jump"),
        },
        SchemaMutation {
            label: "unknown buffer",
            path: "gpus[0].threadblocks[0].ops[1].src_buf",
            apply: |v| op(v, 0, 1)["src_buf"] = json!("heap"),
        },
        SchemaMutation {
            label: "offset -1 on a real buffer",
            path: "gpus[1].threadblocks[0].ops[0].dst_off",
            apply: |v| op(v, 1, 0)["dst_off"] = json!(-1),
        },
        SchemaMutation {
            label: "fractional count",
            path: "gpus[0].threadblocks[0].ops[0].count",
            apply: |v| op(v, 0, 0)["count"] = json!(1.5),
        },
        SchemaMutation {
            label: "dependency without step",
            path: "gpus[0].threadblocks[0].ops[1].deps[0].step",
            apply: |v| op(v, 0, 1)["deps"] = json!([{ "tb": 0 }]),
        },
        SchemaMutation {
            label: "string has_dep",
            path: "gpus[1].threadblocks[0].ops[1].has_dep",
            apply: |v| op(v, 1, 1)["has_dep"] = json!("yes"),
        },
        SchemaMutation { label: "unknown top-level field", path: "version", apply: |v| v["version"] = json!(2) },
        SchemaMutation {
            label: "op not an object",
            path: "gpus[0].threadblocks[0].ops[2]",
            apply: |v| *op(v, 0, 2) = json!(5),
        },
    ]
}
