//! Chunk-oriented program construction.
//!
//! Programs are written against a [`ProgramBuilder`] that tracks the symbolic
//! contents of every buffer slot, hands out versioned [`ChunkRef`]s, and
//! records each `copy`/`reduce` into a trace that [`ProgramBuilder::finalize`]
//! turns into a [`ChunkDag`].
//!
//! Chunk indices in the API are always program-level. Parallelized fragments
//! operate on sub-chunks: the builder transparently splits every chunk into
//! finer pieces (the least common multiple of all parallelization factors
//! seen so far) and each instance of a fragment addresses its own contiguous
//! share of a span.

use thiserror::Error;

use crate::dag::{ChunkDag, ChunkOpKind, ChunkOpNode, Span};
use crate::model::{reduce_values, Buffer, ChunkValue, CollectiveSpec, Rank, ValueError};

/// Optional scheduling directives attached to `copy` and `reduce`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Directives {
    pub ch: Option<u32>,
    pub sendtb: Option<u32>,
    pub recvtb: Option<u32>,
}

impl Directives {
    pub fn channel(ch: u32) -> Self {
        Directives { ch: Some(ch), ..Default::default() }
    }

    pub fn threadblocks(sendtb: u32, recvtb: u32) -> Self {
        Directives { sendtb: Some(sendtb), recvtb: Some(recvtb), ..Default::default() }
    }

    pub fn has_tb_hint(&self) -> bool {
        self.sendtb.is_some() || self.recvtb.is_some()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrontendError {
    #[error("rank {rank} is out of range for {ranks} ranks")]
    RankOutOfRange { rank: Rank, ranks: usize },
    #[error("span {buffer}[{index}..{end}) on rank {rank} exceeds the buffer's {len} chunks")]
    OutOfRange { rank: Rank, buffer: Buffer, index: usize, end: usize, len: usize },
    #[error("chunk references need count >= 1")]
    ZeroCount,
    #[error("read of uninitialized chunk {buffer}[{index}] on rank {rank}")]
    UninitializedRead { rank: Rank, buffer: Buffer, index: usize },
    #[error("stale reference to {buffer}[{index}] on rank {rank}: the slot was overwritten")]
    StaleReference { rank: Rank, buffer: Buffer, index: usize },
    #[error("source and destination partially overlap in {buffer} on rank {rank}")]
    OverlapError { rank: Rank, buffer: Buffer },
    #[error("reduce operands have different counts ({dst} vs {src})")]
    CountMismatch { dst: usize, src: usize },
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error("parallelization factor must be >= 1")]
    InvalidFactor,
    #[error("parallel instances need channel {needed} but only {max} channels exist")]
    ChannelBudgetExceeded { needed: u32, max: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Level {
    instance: u32,
    factor: u32,
}

/// A versioned handle to `count` contiguous chunks of one buffer.
///
/// A reference stays usable only while no referenced slot has been
/// overwritten since it was created.
#[derive(Clone, Debug)]
pub struct ChunkRef {
    rank: Rank,
    buffer: Buffer,
    index: usize,
    count: usize,
    levels: Vec<Level>,
    granularity: usize,
    start: usize,
    versions: Vec<u32>,
}

impl ChunkRef {
    pub fn rank(&self) -> Rank {
        self.rank
    }
    pub fn buffer(&self) -> Buffer {
        self.buffer
    }
    pub fn index(&self) -> usize {
        self.index
    }
    pub fn count(&self) -> usize {
        self.count
    }
}

#[derive(Clone, Debug)]
struct Slot {
    value: ChunkValue,
    version: u32,
}

#[derive(Clone, Debug)]
struct TraceOp {
    kind: ChunkOpKind,
    src: Span,
    dst: Span,
    user: Directives,
    channel: Option<u32>,
    /// instance index per enclosing parallel level, outermost first
    path: Vec<Level>,
    phase: Option<usize>,
}

/// Records a program's chunk operations.
pub struct ProgramBuilder {
    name: String,
    spec: CollectiveSpec,
    granularity: usize,
    /// `slots[rank][buffer]`, at the current granularity
    slots: Vec<[Vec<Slot>; 3]>,
    trace: Vec<TraceOp>,
    ctx: Vec<Level>,
    max_channels: u32,
    phase: Option<usize>,
    phases: Vec<String>,
    notes: Vec<String>,
}

impl ProgramBuilder {
    pub fn new(name: impl Into<String>, spec: CollectiveSpec) -> Self {
        let slots = (0..spec.ranks)
            .map(|r| {
                let input = (0..spec.input_chunks)
                    .map(|i| Slot { value: ChunkValue::input(r, i), version: 0 })
                    .collect();
                let output = if spec.in_place {
                    Vec::new()
                } else {
                    vec![Slot { value: ChunkValue::Uninitialized, version: 0 }; spec.output_chunks]
                };
                [input, output, Vec::new()]
            })
            .collect();
        ProgramBuilder {
            name: name.into(),
            spec,
            granularity: 1,
            slots,
            trace: Vec::new(),
            ctx: Vec::new(),
            max_channels: 32,
            phase: None,
            phases: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn with_max_channels(mut self, max_channels: u32) -> Self {
        self.max_channels = max_channels;
        self
    }

    pub fn spec(&self) -> &CollectiveSpec {
        &self.spec
    }

    pub fn ranks(&self) -> usize {
        self.spec.ranks
    }

    /// Number of operations recorded so far.
    pub fn trace_len(&self) -> usize {
        self.trace.len()
    }

    /// Tags subsequent operations with a named phase.
    pub fn phase(&mut self, name: &str) {
        let idx = match self.phases.iter().position(|p| p == name) {
            Some(i) => i,
            None => {
                self.phases.push(name.to_string());
                self.phases.len() - 1
            }
        };
        self.phase = Some(idx);
    }

    /// Current contents of a program-level chunk, one value per sub-chunk.
    pub fn values(&self, rank: Rank, buffer: Buffer, index: usize) -> Vec<ChunkValue> {
        let b = self.normalize(buffer);
        let g = self.granularity;
        (index * g..(index + 1) * g)
            .map(|i| self.slots[rank][b.slot()].get(i).map(|s| s.value.clone()).unwrap_or_default())
            .collect()
    }

    fn normalize(&self, buffer: Buffer) -> Buffer {
        if self.spec.in_place && buffer == Buffer::Output {
            Buffer::Input
        } else {
            buffer
        }
    }

    fn capacity(&self, buffer: Buffer) -> Option<usize> {
        match buffer {
            Buffer::Input => Some(self.spec.input_chunks),
            Buffer::Output => Some(self.spec.output_chunks),
            Buffer::Scratch => None,
        }
    }

    /// Maps a program-level span to the sub-chunk span addressed under `levels`.
    fn resolve(
        &self,
        rank: Rank,
        buffer: Buffer,
        index: usize,
        count: usize,
        levels: &[Level],
    ) -> Result<Span, FrontendError> {
        if rank >= self.spec.ranks {
            return Err(FrontendError::RankOutOfRange { rank, ranks: self.spec.ranks });
        }
        if count == 0 {
            return Err(FrontendError::ZeroCount);
        }
        if let Some(len) = self.capacity(buffer) {
            if index + count > len {
                return Err(FrontendError::OutOfRange { rank, buffer, index, end: index + count, len });
            }
        }
        let g = self.granularity;
        let (mut part, mut parts) = (0usize, 1usize);
        for l in levels {
            part = part * l.factor as usize + l.instance as usize;
            parts *= l.factor as usize;
        }
        let len = count * g;
        debug_assert_eq!(len % parts, 0);
        let share = len / parts;
        Ok(Span::new(rank, buffer, index * g + part * share, share))
    }

    fn effective_levels(&self, r: &ChunkRef) -> Vec<Level> {
        if self.ctx.starts_with(&r.levels) {
            self.ctx.clone()
        } else {
            r.levels.clone()
        }
    }

    fn slot(&self, rank: Rank, buffer: Buffer, index: usize) -> Option<&Slot> {
        self.slots[rank][buffer.slot()].get(index)
    }

    fn check_initialized(&self, span: &Span) -> Result<(), FrontendError> {
        for i in span.index..span.end() {
            match self.slot(span.rank, span.buffer, i) {
                Some(s) if s.value.is_initialized() => {}
                _ => {
                    return Err(FrontendError::UninitializedRead {
                        rank: span.rank,
                        buffer: span.buffer,
                        index: i / self.granularity,
                    })
                }
            }
        }
        Ok(())
    }

    fn check_current(&self, r: &ChunkRef, span: &Span) -> Result<(), FrontendError> {
        let m = self.granularity / r.granularity;
        for i in span.index..span.end() {
            let captured = (i / m).checked_sub(r.start).and_then(|k| r.versions.get(k));
            let current = self.slot(span.rank, span.buffer, i).map(|s| s.version);
            if captured.is_none() || current != captured.copied() {
                return Err(FrontendError::StaleReference {
                    rank: span.rank,
                    buffer: span.buffer,
                    index: i / self.granularity,
                });
            }
        }
        Ok(())
    }

    fn capture(&self, rank: Rank, buffer: Buffer, index: usize, count: usize, levels: Vec<Level>, span: &Span) -> ChunkRef {
        let versions = (span.index..span.end())
            .map(|i| self.slot(rank, buffer, i).map(|s| s.version).unwrap_or(0))
            .collect();
        ChunkRef {
            rank,
            buffer,
            index,
            count,
            levels,
            granularity: self.granularity,
            start: span.index,
            versions,
        }
    }

    fn write(&mut self, span: &Span, values: Vec<ChunkValue>) {
        let v = &mut self.slots[span.rank][span.buffer.slot()];
        if v.len() < span.end() {
            v.resize(span.end(), Slot { value: ChunkValue::Uninitialized, version: 0 });
        }
        for (k, value) in values.into_iter().enumerate() {
            let s = &mut v[span.index + k];
            s.value = value;
            s.version += 1;
        }
    }

    fn read(&self, span: &Span) -> Vec<ChunkValue> {
        (span.index..span.end())
            .map(|i| self.slot(span.rank, span.buffer, i).map(|s| s.value.clone()).unwrap_or_default())
            .collect()
    }

    /// Returns a reference to `count` chunks currently held at
    /// `(rank, buffer, index)`. Every referenced chunk must be initialized.
    pub fn chunk(&mut self, rank: Rank, buffer: Buffer, index: usize, count: usize) -> Result<ChunkRef, FrontendError> {
        let buffer = self.normalize(buffer);
        let levels = self.ctx.clone();
        let span = self.resolve(rank, buffer, index, count, &levels)?;
        self.check_initialized(&span)?;
        Ok(self.capture(rank, buffer, index, count, levels, &span))
    }

    /// Copies the chunks behind `src` to `(dst_rank, dst_buffer, dst_index)`
    /// and returns a reference to the copies.
    pub fn copy(
        &mut self,
        src: &ChunkRef,
        dst_rank: Rank,
        dst_buffer: Buffer,
        dst_index: usize,
        directives: Directives,
    ) -> Result<ChunkRef, FrontendError> {
        let levels = self.effective_levels(src);
        let s = self.resolve(src.rank, src.buffer, src.index, src.count, &levels)?;
        self.check_current(src, &s)?;
        let dst_buffer = self.normalize(dst_buffer);
        let d = self.resolve(dst_rank, dst_buffer, dst_index, src.count, &levels)?;
        if s == d {
            return Ok(self.capture(dst_rank, dst_buffer, dst_index, src.count, levels, &d));
        }
        if s.overlaps(&d) {
            return Err(FrontendError::OverlapError { rank: d.rank, buffer: d.buffer });
        }
        self.check_initialized(&s)?;
        let vals = self.read(&s);
        self.write(&d, vals);
        self.record(ChunkOpKind::Copy, s, d, directives);
        Ok(self.capture(dst_rank, dst_buffer, dst_index, src.count, levels, &d))
    }

    /// Reduces `src` into `dst` in place and returns a fresh reference to `dst`.
    /// Data flows from `src`'s rank to `dst`'s rank.
    pub fn reduce(&mut self, dst: &ChunkRef, src: &ChunkRef, directives: Directives) -> Result<ChunkRef, FrontendError> {
        if dst.count != src.count {
            return Err(FrontendError::CountMismatch { dst: dst.count, src: src.count });
        }
        let dl = self.effective_levels(dst);
        let sl = self.effective_levels(src);
        let d = self.resolve(dst.rank, dst.buffer, dst.index, dst.count, &dl)?;
        let s = self.resolve(src.rank, src.buffer, src.index, src.count, &sl)?;
        if d.count != s.count {
            return Err(FrontendError::CountMismatch { dst: d.count, src: s.count });
        }
        self.check_current(dst, &d)?;
        self.check_current(src, &s)?;
        if d != s && d.overlaps(&s) {
            return Err(FrontendError::OverlapError { rank: d.rank, buffer: d.buffer });
        }
        self.check_initialized(&d)?;
        self.check_initialized(&s)?;
        let a = self.read(&d);
        let b = self.read(&s);
        let vals = a
            .iter()
            .zip(&b)
            .map(|(x, y)| reduce_values(x, y))
            .collect::<Result<Vec<_>, _>>()?;
        self.write(&d, vals);
        self.record(ChunkOpKind::Reduce, s, d, directives);
        Ok(self.capture(dst.rank, dst.buffer, dst.index, dst.count, dl, &d))
    }

    fn record(&mut self, kind: ChunkOpKind, src: Span, dst: Span, user: Directives) {
        self.trace.push(TraceOp {
            kind,
            src,
            dst,
            user,
            channel: user.ch,
            path: self.ctx.clone(),
            phase: self.phase,
        });
    }

    /// Splits every chunk into `m` sub-chunks.
    fn refine(&mut self, m: usize) {
        if m == 1 {
            return;
        }
        for bufs in &mut self.slots {
            for buf in bufs.iter_mut() {
                *buf = buf
                    .iter()
                    .flat_map(|s| {
                        (0..m).map(move |p| Slot { value: s.value.refine(m, p), version: s.version })
                    })
                    .collect();
            }
        }
        for op in &mut self.trace {
            for span in [&mut op.src, &mut op.dst] {
                span.index *= m;
                span.count *= m;
            }
        }
        self.granularity *= m;
    }

    /// Runs `fragment` once per instance `0..factor`; instance `k` operates on
    /// the `k`-th of `factor` equal shares of every span it touches, and its
    /// channels are offset so that instances never share a channel.
    pub fn parallelize<F>(&mut self, factor: u32, mut fragment: F) -> Result<(), FrontendError>
    where
        F: FnMut(&mut ProgramBuilder, u32) -> Result<(), FrontendError>,
    {
        if factor == 0 {
            return Err(FrontendError::InvalidFactor);
        }
        if factor == 1 {
            return fragment(self, 0);
        }
        let total: usize = self.ctx.iter().map(|l| l.factor as usize).product::<usize>() * factor as usize;
        let target = lcm(self.granularity, total);
        self.refine(target / self.granularity);

        let depth = self.ctx.len();
        let first = self.trace.len();
        for k in 0..factor {
            self.ctx.push(Level { instance: k, factor });
            let res = fragment(self, k);
            self.ctx.pop();
            res?;
        }
        // channels resolve at finalize; this bound can only grow
        let stride = self.channel_stride();
        let needed = self.trace[first..]
            .iter()
            .map(|op| op.user.ch.unwrap_or(0) + stride * op.path[depth].instance)
            .max()
            .unwrap_or(0);
        if needed >= self.max_channels {
            return Err(FrontendError::ChannelBudgetExceeded { needed, max: self.max_channels });
        }
        Ok(())
    }

    /// One more than the largest explicit channel anywhere in the program.
    fn channel_stride(&self) -> u32 {
        self.trace.iter().filter_map(|op| op.user.ch).max().map_or(1, |c| c + 1)
    }

    /// Emits the Chunk DAG of everything traced so far. Operations inside
    /// parallel fragments move to channel `ch + k * stride` for composite
    /// instance `k`, so instances never share a channel with each other or
    /// with any explicitly placed operation.
    pub fn finalize(mut self) -> ChunkDag {
        let stride = self.channel_stride();
        let mut offset_user = false;
        for op in &mut self.trace {
            if op.path.is_empty() {
                continue;
            }
            let k = op.path.iter().fold(0u32, |k, l| k * l.factor + l.instance);
            offset_user |= op.user.ch.is_some() && op.path.iter().any(|l| l.factor > 1);
            op.channel = Some(op.user.ch.unwrap_or(0) + k * stride);
        }
        if offset_user {
            self.notes.push(format!(
                "explicit channel directives inside parallel fragments were offset by multiples of {stride}"
            ));
        }
        let ops = self
            .trace
            .into_iter()
            .map(|op| {
                let instance = if op.path.is_empty() {
                    None
                } else {
                    let mut k = 0u32;
                    let mut f = 1u32;
                    for l in &op.path {
                        k = k * l.factor + l.instance;
                        f *= l.factor;
                    }
                    Some((k, f))
                };
                ChunkOpNode {
                    id: 0,
                    kind: op.kind,
                    src: op.src,
                    dst: op.dst,
                    directives: Directives { ch: op.channel, ..op.user },
                    trace_order: 0,
                    phase: op.phase,
                    instance,
                }
            })
            .collect();
        let scratch = self.slots.iter().map(|b| b[Buffer::Scratch.slot()].len()).collect();
        ChunkDag::assemble(self.name, self.spec, self.granularity, ops, scratch, self.phases, self.notes)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}
