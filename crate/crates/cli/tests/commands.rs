use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cclforge_core::ir::IrGpu;
use cclforge_core::{
    Buffer, ChunkCounts, CollectiveKind, Dep, IrOp, IrProgram, IrThreadBlock, Loc, Opcode, Protocol, SizeRange,
    Topology,
};
use tempfile::TempDir;

fn cclforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cclforge")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn write_topology(dir: &TempDir, name: &str, topo: &Topology) -> PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, topo.to_json()).unwrap();
    path
}

fn compile_to(dir: &TempDir, name: &str, args: &[&str]) -> PathBuf {
    let path = dir.path().join(name);
    let mut full = vec!["compile"];
    full.extend_from_slice(args);
    full.extend_from_slice(&["-o", path_str(&path)]);
    let out = cclforge(&full);
    assert!(out.status.success(), "compile failed: {}", stderr(&out));
    path
}

fn csv_makespans(csv: &str) -> Vec<f64> {
    csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

#[test]
fn compile_ring_writes_ir_and_summary() {
    let dir = TempDir::new().unwrap();
    let topo = write_topology(&dir, "t.json", &Topology::single_node(4));
    let path = dir.path().join("ring4.ir.json");
    let out = cclforge(&[
        "compile",
        "ring_allreduce",
        "--ranks",
        "4",
        "--topo",
        path_str(&topo),
        "-o",
        path_str(&path),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("tb/gpu=1"), "{}", stderr(&out));
    assert!(stderr(&out).contains("ranks=4"));
    let ir = IrProgram::from_json(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(ir.ranks(), 4);
    assert_eq!(ir.collective, CollectiveKind::AllReduce);
    assert!(ir.fused_count() > 0);
}

#[test]
fn no_fuse_leaves_no_fused_opcodes() {
    let dir = TempDir::new().unwrap();
    let path = compile_to(&dir, "plain.json", &["ring_allreduce", "--ranks", "4", "--no-fuse"]);
    let ir = IrProgram::from_json(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(ir.fused_count(), 0);
    for op in Opcode::ALL.into_iter().filter(|o| o.is_fused()) {
        assert_eq!(ir.count_opcode(op), 0);
    }
}

#[test]
fn parallel_ring_uses_two_blocks_per_gpu() {
    let out = cclforge(&["compile", "ring_allreduce", "--ranks", "4", "--parallel", "2"]);
    assert!(out.status.success());
    assert!(stderr(&out).contains("tb/gpu=2"), "{}", stderr(&out));
    let ir = IrProgram::from_json(&stdout(&out)).unwrap();
    assert_eq!(ir.max_threadblocks_per_gpu(), 2);
}

#[test]
fn compile_rejects_bad_inputs_with_code_two() {
    assert_eq!(cclforge(&["compile", "no_such_algorithm", "--ranks", "4"]).status.code(), Some(2));
    assert_eq!(cclforge(&["compile", "hierarchical_allreduce", "-N", "2"]).status.code(), Some(2));
    let dir = TempDir::new().unwrap();
    let topo = write_topology(&dir, "t8.json", &Topology::single_node(8));
    let out = cclforge(&["compile", "ring_allreduce", "--ranks", "4", "--topo", path_str(&topo)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compile_to_unwritable_path_is_io_error() {
    let dir = TempDir::new().unwrap();
    let target = dir.path().join("missing_dir").join("x.ir.json");
    let out = cclforge(&["compile", "ring_allreduce", "--ranks", "2", "-o", path_str(&target)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("x.ir.json"));
}

#[test]
fn verify_gallery_ir_passes() {
    let dir = TempDir::new().unwrap();
    let path = compile_to(&dir, "h.json", &["hierarchical_allreduce", "-N", "2", "-G", "2"]);
    let out = cclforge(&["verify", path_str(&path), "--seeds", "100"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["seeds"], 100);

    let out = cclforge(&["verify", "twostep_alltoall", "-N", "2", "-G", "2", "--seeds", "20"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn verify_flags_removed_dependency() {
    let dir = TempDir::new().unwrap();
    let path = compile_to(&dir, "ts.json", &["twostep_alltoall", "-N", "2", "-G", "2"]);
    let mut ir = IrProgram::from_json(&fs::read_to_string(&path).unwrap()).unwrap();
    let op = ir
        .gpus
        .iter_mut()
        .flat_map(|g| g.threadblocks.iter_mut())
        .flat_map(|t| t.ops.iter_mut())
        .find(|o| !o.deps.is_empty())
        .expect("two-step program carries a dependency");
    op.deps.remove(0);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, ir.to_json()).unwrap();
    let out = cclforge(&["verify", path_str(&bad), "--seeds", "100"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("race") || err.contains("expected"), "{err}");
}

#[test]
fn verify_reports_cyclic_program_as_deadlock() {
    let l = Loc::new(Buffer::Input, 0);
    let s = Loc::new(Buffer::Scratch, 0);
    let op = |dep_tb| IrOp {
        step: 0,
        opcode: Opcode::Copy,
        src: Some(l),
        dst: Some(s),
        count: 1,
        deps: vec![Dep { tb: dep_tb, step: 0 }],
        has_dep: true,
    };
    let block = |id, dep_tb| IrThreadBlock { id, send_peer: None, recv_peer: None, channel: 0, ops: vec![op(dep_tb)] };
    let ir = IrProgram {
        name: "cyclic".into(),
        collective: CollectiveKind::Custom,
        protocol: Protocol::Simple,
        inplace: false,
        nchunks: ChunkCounts { input: 1, output: 1, scratch: 1 },
        size_range: SizeRange::default(),
        gpus: vec![IrGpu { rank: 0, threadblocks: vec![block(0, 1), block(1, 0)] }],
    };
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("cyclic.json");
    fs::write(&path, ir.to_json()).unwrap();
    let out = cclforge(&["verify", path_str(&path), "--seeds", "5"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("rank 0 tb 0 step 0 waits on tb 1 step 0"), "{err}");
    assert!(err.contains("rank 0 tb 1 step 0 waits on tb 0 step 0"), "{err}");
}

#[test]
fn simulate_ring_sweep_is_monotone() {
    let dir = TempDir::new().unwrap();
    let topo = write_topology(&dir, "t.json", &Topology::single_node(4));
    let ir = compile_to(&dir, "ring4.json", &["ring_allreduce", "--ranks", "4"]);
    let out = cclforge(&["simulate", path_str(&ir), "--topo", path_str(&topo)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = stdout(&out);
    assert_eq!(csv.lines().next(), Some("size_bytes,makespan_us,util_intra,util_inter"));
    let sizes: Vec<u64> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    let expected: Vec<u64> = (0..11).map(|k| 1024u64 << (2 * k)).collect();
    assert_eq!(sizes, expected);
    let makespans = csv_makespans(&csv);
    assert!(makespans.windows(2).all(|w| w[0] < w[1]), "{makespans:?}");
}

#[test]
fn simulate_writes_csv_and_timeline_files() {
    let dir = TempDir::new().unwrap();
    let topo = write_topology(&dir, "t.json", &Topology::single_node(2));
    let ir = compile_to(&dir, "ring2.json", &["ring_allreduce", "--ranks", "2"]);
    let csv = dir.path().join("out.csv");
    let timeline = dir.path().join("timeline.json");
    let out = cclforge(&[
        "simulate",
        path_str(&ir),
        "--topo",
        path_str(&topo),
        "--sizes",
        "64K,1M",
        "-o",
        path_str(&csv),
        "--timeline",
        path_str(&timeline),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).is_empty());
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);
    let events: serde_json::Value = serde_json::from_str(&fs::read_to_string(&timeline).unwrap()).unwrap();
    assert!(!events["instructions"].as_array().unwrap().is_empty());
    assert!(!events["transfers"].as_array().unwrap().is_empty());
}

#[test]
fn smaller_tiles_speed_up_hierarchical_until_latency_bound() {
    let dir = TempDir::new().unwrap();
    let mut t = Topology::new(2, 4);
    t.intra.alpha_us = 0.1;
    t.inter.alpha_us = 0.5;
    let topo = write_topology(&dir, "t.json", &t);
    let ir = compile_to(&dir, "h.json", &["hierarchical_allreduce", "-N", "2", "-G", "4"]);
    let chunks = IrProgram::from_json(&fs::read_to_string(&ir).unwrap()).unwrap().nchunks.input as u64;
    let size = 64u64 << 20;
    let mut makespans = Vec::new();
    for halvings in 0..12 {
        let tile = (size / chunks) >> halvings;
        let out = cclforge(&[
            "simulate",
            path_str(&ir),
            "--topo",
            path_str(&topo),
            "--sizes",
            &size.to_string(),
            "--tile",
            &tile.to_string(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        makespans.push(csv_makespans(&stdout(&out))[0]);
    }
    // strictly faster for the first halvings, then eventually startup costs win
    assert!(makespans[1] < makespans[0] && makespans[2] < makespans[1], "{makespans:?}");
    let best = makespans.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(best < makespans[0]);
    assert!(makespans[11] > best, "{makespans:?}");
}

#[test]
fn missing_topology_is_io_error_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let ir = compile_to(&dir, "ring2.json", &["ring_allreduce", "--ranks", "2"]);
    let missing = dir.path().join("nowhere_topo.json");
    let out = cclforge(&["simulate", path_str(&ir), "--topo", path_str(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nowhere_topo.json"), "{}", stderr(&out));
}

#[test]
fn dot_stages_are_deterministic_with_expected_node_counts() {
    let dir = TempDir::new().unwrap();
    let ir_path = compile_to(&dir, "ring2.json", &["ring_allreduce", "--ranks", "2"]);
    let ir = IrProgram::from_json(&fs::read_to_string(&ir_path).unwrap()).unwrap();
    let node_lines = |dot: &str| dot.lines().filter(|l| l.split_whitespace().nth(1).is_some_and(|t| t.starts_with("[label="))).count();
    for stage in ["chunk", "instr", "ir"] {
        let a = dir.path().join(format!("{stage}_a.dot"));
        let b = dir.path().join(format!("{stage}_b.dot"));
        for p in [&a, &b] {
            let out = cclforge(&["dot", stage, "ring_allreduce", "--ranks", "2", "-o", path_str(p)]);
            assert!(out.status.success(), "{}", stderr(&out));
        }
        let da = fs::read_to_string(&a).unwrap();
        assert_eq!(da, fs::read_to_string(&b).unwrap());
        assert!(da.starts_with("digraph"));
        if stage == "ir" {
            assert_eq!(node_lines(&da), ir.instruction_count());
        }
    }
    // ring over 2 ranks: 4 source nodes plus 2 reduce and 2 copy transfers
    let chunk = fs::read_to_string(dir.path().join("chunk_a.dot")).unwrap();
    assert_eq!(node_lines(&chunk), 8);
    let from_file = cclforge(&["dot", "ir", path_str(&ir_path)]);
    assert_eq!(stdout(&from_file), fs::read_to_string(dir.path().join("ir_a.dot")).unwrap());
}

#[test]
fn unknown_dot_stage_is_usage_error() {
    let out = cclforge(&["dot", "bogus", "ring_allreduce", "--ranks", "2"]);
    assert_eq!(out.status.code(), Some(2));
}
