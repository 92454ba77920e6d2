use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cclforge_core::{compile, gallery, run_functional, run_timed, AlgorithmParams, CompileOptions, SimConfig, Topology};

fn shaped(nodes: usize, gpus: usize) -> AlgorithmParams {
    AlgorithmParams { nodes: Some(nodes), gpus_per_node: Some(gpus), ..Default::default() }
}

fn bench_compile(c: &mut Criterion) {
    let mut group = c.benchmark_group("compile");
    for ranks in [4, 8, 16] {
        let params = AlgorithmParams { ranks: Some(ranks), ..Default::default() };
        group.bench_with_input(BenchmarkId::new("ring_allreduce", ranks), &params, |b, p| {
            b.iter(|| compile(gallery::build("ring_allreduce", p).unwrap(), &CompileOptions::default()).unwrap())
        });
    }
    for (n, g) in [(2, 4), (4, 4)] {
        let params = shaped(n, g);
        let id = format!("{n}x{g}");
        group.bench_with_input(BenchmarkId::new("hierarchical_allreduce", &id), &params, |b, p| {
            b.iter(|| compile(gallery::build("hierarchical_allreduce", p).unwrap(), &CompileOptions::default()).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("twostep_alltoall", &id), &params, |b, p| {
            b.iter(|| compile(gallery::build("twostep_alltoall", p).unwrap(), &CompileOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn bench_simulate(c: &mut Criterion) {
    let compiled = compile(gallery::build("hierarchical_allreduce", &shaped(4, 4)).unwrap(), &CompileOptions::default())
        .unwrap();
    let topo = Topology::new(4, 4);
    let mut group = c.benchmark_group("simulate");
    group.bench_function("functional_4x4", |b| {
        b.iter(|| run_functional(&compiled.ir, &compiled.dag.spec, &SimConfig::default()))
    });
    for tiles in [1u32, 8] {
        let cfg = SimConfig { tile_bytes: Some(1048576.0 / f64::from(tiles)), ..Default::default() };
        group.bench_with_input(BenchmarkId::new("timed_4x4", tiles), &cfg, |b, cfg| {
            b.iter(|| run_timed(&compiled.ir, &topo, cfg))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_compile, bench_simulate);
criterion_main!(benches);
