//! Parameterized generators for the reference algorithms.

use thiserror::Error;

use crate::dag::ChunkDag;
use crate::frontend::{Directives, FrontendError, ProgramBuilder};
use crate::model::{allreduce_spec, alltonext_spec, alltoall_spec, Buffer, ModelError, Rank};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GalleryError {
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unknown algorithm '{0}'")]
    UnknownAlgorithm(String),
}

/// Ring ReduceScatter over `ranks`: lane `r` reduces chunks
/// `offset + r*count ..` around the ring and leaves the result on `ranks[r]`.
pub fn ring_reducescatter(
    b: &mut ProgramBuilder,
    ranks: &[Rank],
    offset: usize,
    count: usize,
    directives: Directives,
) -> Result<(), FrontendError> {
    ring_reducescatter_lanes(b, ranks, offset, count, |_| directives)
}

fn ring_reducescatter_lanes(
    b: &mut ProgramBuilder,
    ranks: &[Rank],
    offset: usize,
    count: usize,
    lane: impl Fn(usize) -> Directives,
) -> Result<(), FrontendError> {
    let n = ranks.len();
    if n < 2 {
        return Ok(());
    }
    for r in 0..n {
        let index = offset + r * count;
        let mut c = b.chunk(ranks[(r + 1) % n], Buffer::Input, index, count)?;
        for step in 1..n {
            let next = ranks[(step + r + 1) % n];
            let dst = b.chunk(next, Buffer::Input, index, count)?;
            c = b.reduce(&dst, &c, lane(r))?;
        }
    }
    Ok(())
}

/// Ring AllGather over `ranks`: lane `r` broadcasts `ranks[r]`'s chunks
/// `offset + r*count ..` around the ring.
pub fn ring_allgather(
    b: &mut ProgramBuilder,
    ranks: &[Rank],
    offset: usize,
    count: usize,
    directives: Directives,
) -> Result<(), FrontendError> {
    ring_allgather_lanes(b, ranks, offset, count, |_| directives)
}

fn ring_allgather_lanes(
    b: &mut ProgramBuilder,
    ranks: &[Rank],
    offset: usize,
    count: usize,
    lane: impl Fn(usize) -> Directives,
) -> Result<(), FrontendError> {
    let n = ranks.len();
    if n < 2 {
        return Ok(());
    }
    for r in 0..n {
        let index = offset + r * count;
        let mut c = b.chunk(ranks[r], Buffer::Input, index, count)?;
        for step in 1..n {
            let next = ranks[(step + r) % n];
            c = b.copy(&c, next, Buffer::Input, index, lane(r))?;
        }
    }
    Ok(())
}

fn need(cond: bool, msg: impl FnOnce() -> String) -> Result<(), GalleryError> {
    if cond {
        Ok(())
    } else {
        Err(GalleryError::InvalidParams(msg()))
    }
}

/// Ring AllReduce with `ranks` chunks per rank. Lane `r` runs on channel
/// `r % channels`; the whole program is replicated `parallel` times.
pub fn ring_allreduce(ranks: usize, channels: u32, parallel: u32) -> Result<ChunkDag, GalleryError> {
    need(ranks >= 1, || "ring_allreduce needs at least one rank".into())?;
    need(channels >= 1 && parallel >= 1, || "channels and parallel must be >= 1".into())?;
    let mut b = ProgramBuilder::new(format!("ring_allreduce_r{ranks}"), allreduce_spec(ranks, ranks)?);
    let all: Vec<Rank> = (0..ranks).collect();
    let lane = |r: usize| {
        if channels == 1 {
            Directives::default()
        } else {
            Directives::channel(r as u32 % channels)
        }
    };
    b.parallelize(parallel, |b, _| {
        ring_reducescatter_lanes(b, &all, 0, 1, lane)?;
        ring_allgather_lanes(b, &all, 0, 1, lane)
    })?;
    Ok(b.finalize())
}

/// Every rank gathers and reduces its own chunk from all peers, then
/// broadcasts the result: two communication steps.
pub fn allpairs_allreduce(ranks: usize) -> Result<ChunkDag, GalleryError> {
    need(ranks >= 1, || "allpairs_allreduce needs at least one rank".into())?;
    let mut b = ProgramBuilder::new(format!("allpairs_allreduce_r{ranks}"), allreduce_spec(ranks, ranks)?);
    let mut sums = Vec::with_capacity(ranks);
    for r in 0..ranks {
        let mut acc = b.chunk(r, Buffer::Input, r, 1)?;
        for q in (0..ranks).filter(|&q| q != r) {
            let src = b.chunk(q, Buffer::Input, r, 1)?;
            acc = b.reduce(&acc, &src, Directives::default())?;
        }
        sums.push(acc);
    }
    for (r, acc) in sums.iter().enumerate() {
        for q in (0..ranks).filter(|&q| q != r) {
            b.copy(acc, q, Buffer::Input, r, Directives::default())?;
        }
    }
    Ok(b.finalize())
}

/// Two-level AllReduce on `nodes` x `gpus` ranks: intra-node ring
/// ReduceScatter (channel 0), inter-node ring ReduceScatter and AllGather
/// (channel 1), intra-node ring AllGather (channel 2). Intra-node phases
/// move `nodes` chunks per send and may be parallelized.
pub fn hierarchical_allreduce(nodes: usize, gpus: usize, parallel: u32) -> Result<ChunkDag, GalleryError> {
    need(nodes >= 1 && gpus >= 1, || "hierarchical_allreduce needs N >= 1 and G >= 1".into())?;
    need(parallel >= 1, || "parallel must be >= 1".into())?;
    let r = nodes * gpus;
    let mut b = ProgramBuilder::new(format!("hierarchical_allreduce_n{nodes}_g{gpus}"), allreduce_spec(r, r)?);
    let local = |n: usize| -> Vec<Rank> { (0..gpus).map(|i| i + n * gpus).collect() };
    let cross = |g: usize| -> Vec<Rank> { (0..nodes).map(|i| i * gpus + g).collect() };

    b.phase("intra-reducescatter");
    b.parallelize(parallel, |b, _| {
        for n in 0..nodes {
            ring_reducescatter(b, &local(n), 0, nodes, Directives::channel(0))?;
        }
        Ok(())
    })?;
    b.phase("inter-reducescatter");
    for g in 0..gpus {
        ring_reducescatter(&mut b, &cross(g), g * nodes, 1, Directives::channel(1))?;
    }
    b.phase("inter-allgather");
    for g in 0..gpus {
        ring_allgather(&mut b, &cross(g), g * nodes, 1, Directives::channel(1))?;
    }
    b.phase("intra-allgather");
    b.parallelize(parallel, |b, _| {
        for n in 0..nodes {
            ring_allgather(b, &local(n), 0, nodes, Directives::channel(2))?;
        }
        Ok(())
    })?;
    Ok(b.finalize())
}

/// AllToAll that stages chunks bound for a remote node on the local GPU
/// with the matching index, then sends them as one aggregated message.
pub fn twostep_alltoall(nodes: usize, gpus: usize) -> Result<ChunkDag, GalleryError> {
    need(nodes >= 1 && gpus >= 1, || "twostep_alltoall needs N >= 1 and G >= 1".into())?;
    let g_ = gpus;
    let mut b = ProgramBuilder::new(format!("twostep_alltoall_n{nodes}_g{gpus}"), alltoall_spec(nodes * gpus, 1)?);
    let rank = |n: usize, g: usize| n * g_ + g;
    let d = Directives::default();
    for n in 0..nodes {
        for g in 0..gpus {
            for m in 0..nodes {
                for i in 0..gpus {
                    let c = b.chunk(rank(m, i), Buffer::Input, rank(n, g), 1)?;
                    if n == m {
                        b.copy(&c, rank(n, g), Buffer::Output, rank(m, i), d)?;
                    } else {
                        b.copy(&c, rank(m, g), Buffer::Scratch, rank(n, i), d)?;
                    }
                }
                if n != m {
                    let c = b.chunk(rank(m, g), Buffer::Scratch, n * gpus, gpus)?;
                    b.copy(&c, rank(n, g), Buffer::Output, m * gpus, d)?;
                }
            }
        }
    }
    Ok(b.finalize())
}

/// AllToAll with one direct copy per (source, destination) pair.
pub fn naive_alltoall(nodes: usize, gpus: usize) -> Result<ChunkDag, GalleryError> {
    need(nodes >= 1 && gpus >= 1, || "naive_alltoall needs N >= 1 and G >= 1".into())?;
    let r = nodes * gpus;
    let mut b = ProgramBuilder::new(format!("naive_alltoall_n{nodes}_g{gpus}"), alltoall_spec(r, 1)?);
    for src in 0..r {
        for dst in 0..r {
            let c = b.chunk(src, Buffer::Input, dst, 1)?;
            b.copy(&c, dst, Buffer::Output, src, Directives::default())?;
        }
    }
    Ok(b.finalize())
}

/// AllToNext on `nodes` x `gpus` ranks. Hops inside a node are direct copies;
/// a hop that crosses nodes splits the buffer into `gpus` parts, scatters
/// them over the sending node, crosses on every GPU pair in parallel and
/// gathers into the receiver's output.
pub fn alltonext(nodes: usize, gpus: usize) -> Result<ChunkDag, GalleryError> {
    need(nodes >= 1 && gpus >= 1, || "alltonext needs N >= 1 and G >= 1".into())?;
    let r = nodes * gpus;
    need(r >= 2, || "alltonext needs at least two ranks".into())?;
    let mut b = ProgramBuilder::new(format!("alltonext_n{nodes}_g{gpus}"), alltonext_spec(r, 1)?);
    for i in 0..r - 1 {
        let next = i + 1;
        let n = i / gpus;
        if next / gpus == n {
            let c = b.chunk(i, Buffer::Input, 0, 1)?;
            b.copy(&c, next, Buffer::Output, 0, Directives::default())?;
            continue;
        }
        // neighbouring boundaries share ranks, so they alternate channels
        let d = Directives::channel((n % 2) as u32);
        b.parallelize(gpus as u32, |b, k| {
            let (l, t) = (n * gpus + k as usize, (n + 1) * gpus + k as usize);
            let mut c = b.chunk(i, Buffer::Input, 0, 1)?;
            if l != i {
                c = b.copy(&c, l, Buffer::Scratch, 0, d)?;
            }
            if t != next {
                c = b.copy(&c, t, Buffer::Scratch, 1, d)?;
            }
            b.copy(&c, next, Buffer::Output, 0, d)?;
            Ok(())
        })?;
    }
    Ok(b.finalize())
}

/// Names accepted by [`build`].
pub const ALGORITHMS: [&str; 6] = [
    "ring_allreduce",
    "allpairs_allreduce",
    "hierarchical_allreduce",
    "twostep_alltoall",
    "naive_alltoall",
    "alltonext",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlgorithmParams {
    pub ranks: Option<usize>,
    pub nodes: Option<usize>,
    pub gpus_per_node: Option<usize>,
    pub parallel: u32,
    pub channels: u32,
}

impl Default for AlgorithmParams {
    fn default() -> Self {
        AlgorithmParams { ranks: None, nodes: None, gpus_per_node: None, parallel: 1, channels: 1 }
    }
}

impl AlgorithmParams {
    fn flat_ranks(&self) -> Result<usize, GalleryError> {
        match (self.ranks, self.nodes, self.gpus_per_node) {
            (Some(r), _, _) => Ok(r),
            (None, n, g) if n.is_some() || g.is_some() => Ok(n.unwrap_or(1) * g.unwrap_or(1)),
            _ => Err(GalleryError::InvalidParams("--ranks or -N/-G is required".into())),
        }
    }

    fn node_shape(&self) -> Result<(usize, usize), GalleryError> {
        match (self.nodes, self.gpus_per_node, self.ranks) {
            (Some(n), Some(g), _) => Ok((n, g)),
            (Some(n), None, Some(r)) if n > 0 && r % n == 0 => Ok((n, r / n)),
            (None, Some(g), Some(r)) if g > 0 && r % g == 0 => Ok((r / g, g)),
            (None, None, Some(r)) => Ok((1, r)),
            _ => Err(GalleryError::InvalidParams("-N and -G are required".into())),
        }
    }
}

/// Builds a registered algorithm by name.
pub fn build(name: &str, params: &AlgorithmParams) -> Result<ChunkDag, GalleryError> {
    match name {
        "ring_allreduce" => ring_allreduce(params.flat_ranks()?, params.channels, params.parallel),
        "allpairs_allreduce" => allpairs_allreduce(params.flat_ranks()?),
        "hierarchical_allreduce" => {
            let (n, g) = params.node_shape()?;
            hierarchical_allreduce(n, g, params.parallel)
        }
        "twostep_alltoall" => {
            let (n, g) = params.node_shape()?;
            twostep_alltoall(n, g)
        }
        "naive_alltoall" => {
            let (n, g) = params.node_shape()?;
            naive_alltoall(n, g)
        }
        "alltonext" => {
            let (n, g) = params.node_shape()?;
            alltonext(n, g)
        }
        other => Err(GalleryError::UnknownAlgorithm(other.to_string())),
    }
}
