//! Shared vocabulary: machine topology, collective specifications and the
//! symbolic chunk-value algebra used for verification.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Rank = usize;

/// Bytes in one "MB" of the cost model (binary megabyte).
pub const BYTES_PER_MB: f64 = 1_048_576.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid collective spec: {0}")]
    InvalidSpec(String),
    #[error("cannot parse topology JSON: {0}")]
    TopologyParse(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValueError {
    #[error("reduction operand is uninitialized")]
    UninitializedOperand,
    #[error("input chunk {0} would be reduced twice")]
    DoubleReduce(InputId),
}

/// The three per-rank buffers a program can address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Buffer {
    Input,
    Output,
    Scratch,
}

impl Buffer {
    pub const ALL: [Buffer; 3] = [Buffer::Input, Buffer::Output, Buffer::Scratch];

    pub fn as_str(self) -> &'static str {
        match self {
            Buffer::Input => "input",
            Buffer::Output => "output",
            Buffer::Scratch => "scratch",
        }
    }

    pub fn parse(s: &str) -> Option<Buffer> {
        match s {
            "input" => Some(Buffer::Input),
            "output" => Some(Buffer::Output),
            "scratch" => Some(Buffer::Scratch),
            _ => None,
        }
    }

    pub(crate) fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Buffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identity of one input chunk: the (rank, index) of the input buffer it starts in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InputId {
    pub rank: Rank,
    pub index: usize,
}

impl InputId {
    pub fn new(rank: Rank, index: usize) -> Self {
        InputId { rank, index }
    }
}

impl fmt::Display for InputId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.rank, self.index)
    }
}

/// Symbolic content of one buffer slot.
///
/// `Reduction` holds a sorted, duplicate-free set of at least two input
/// identities so that structural equality is order-insensitive.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum ChunkValue {
    #[default]
    Uninitialized,
    Input(InputId),
    Reduction(Vec<InputId>),
}

impl ChunkValue {
    pub fn input(rank: Rank, index: usize) -> Self {
        ChunkValue::Input(InputId::new(rank, index))
    }

    /// Builds the canonical value for a set of input identities.
    pub fn from_ids(ids: impl IntoIterator<Item = InputId>) -> Result<Self, ValueError> {
        let mut ids: Vec<InputId> = ids.into_iter().collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(ValueError::DoubleReduce(w[0]));
        }
        Ok(match ids.len() {
            0 => ChunkValue::Uninitialized,
            1 => ChunkValue::Input(ids[0]),
            _ => ChunkValue::Reduction(ids),
        })
    }

    pub fn is_initialized(&self) -> bool {
        !matches!(self, ChunkValue::Uninitialized)
    }

    pub fn ids(&self) -> &[InputId] {
        match self {
            ChunkValue::Uninitialized => &[],
            ChunkValue::Input(id) => std::slice::from_ref(id),
            ChunkValue::Reduction(ids) => ids,
        }
    }

    /// Maps every identity `(r, j)` to `(r, j * factor + part)`, the value of
    /// sub-chunk `part` after splitting each chunk into `factor` pieces.
    pub fn refine(&self, factor: usize, part: usize) -> ChunkValue {
        let map = |id: &InputId| InputId::new(id.rank, id.index * factor + part);
        match self {
            ChunkValue::Uninitialized => ChunkValue::Uninitialized,
            ChunkValue::Input(id) => ChunkValue::Input(map(id)),
            ChunkValue::Reduction(ids) => ChunkValue::Reduction(ids.iter().map(map).collect()),
        }
    }
}

impl fmt::Display for ChunkValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChunkValue::Uninitialized => f.write_str("uninit"),
            ChunkValue::Input(id) => write!(f, "in{id}"),
            ChunkValue::Reduction(ids) => {
                f.write_str("sum{")?;
                for (i, id) in ids.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{id}")?;
                }
                f.write_str("}")
            }
        }
    }
}

/// Point-wise reduction of two chunk values: the union of their identity sets.
pub fn reduce_values(a: &ChunkValue, b: &ChunkValue) -> Result<ChunkValue, ValueError> {
    if !a.is_initialized() || !b.is_initialized() {
        return Err(ValueError::UninitializedOperand);
    }
    let (xs, ys) = (a.ids(), b.ids());
    let mut out = Vec::with_capacity(xs.len() + ys.len());
    let (mut i, mut j) = (0, 0);
    while i < xs.len() && j < ys.len() {
        match xs[i].cmp(&ys[j]) {
            std::cmp::Ordering::Less => {
                out.push(xs[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(ys[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => return Err(ValueError::DoubleReduce(xs[i])),
        }
    }
    out.extend_from_slice(&xs[i..]);
    out.extend_from_slice(&ys[j..]);
    Ok(ChunkValue::Reduction(out))
}

/// Startup latency and inverse bandwidth of one link class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkCost {
    pub alpha_us: f64,
    pub beta_us_per_mb: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkClass {
    Intra,
    Inter,
}

fn default_slots() -> usize {
    8
}
fn default_max_channels() -> u32 {
    32
}
fn default_max_threadblocks() -> usize {
    108
}

/// Machine description: `num_nodes` nodes of `gpus_per_node` accelerators
/// with two link classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(rename = "nodes")]
    pub num_nodes: usize,
    pub gpus_per_node: usize,
    pub intra: LinkCost,
    pub inter: LinkCost,
    #[serde(rename = "reduce_gamma_us_per_mb", default)]
    pub reduce_gamma: f64,
    #[serde(default = "default_slots")]
    pub slots: usize,
    #[serde(default = "default_max_channels")]
    pub max_channels: u32,
    #[serde(default = "default_max_threadblocks")]
    pub max_threadblocks: usize,
}

impl Topology {
    /// A topology with NVLink/InfiniBand-flavoured default costs.
    pub fn new(num_nodes: usize, gpus_per_node: usize) -> Self {
        Topology {
            num_nodes,
            gpus_per_node,
            // ~150 GB/s per direction
            intra: LinkCost { alpha_us: 0.7, beta_us_per_mb: 6.99 },
            // ~25 GB/s per NIC
            inter: LinkCost { alpha_us: 5.0, beta_us_per_mb: 41.9 },
            reduce_gamma: 0.0,
            slots: default_slots(),
            max_channels: default_max_channels(),
            max_threadblocks: default_max_threadblocks(),
        }
    }

    pub fn single_node(ranks: usize) -> Self {
        Topology::new(1, ranks)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let topo: Topology =
            serde_json::from_str(text).map_err(|e| ModelError::TopologyParse(e.to_string()))?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidTopology(m.to_string()));
        if self.num_nodes == 0 || self.gpus_per_node == 0 {
            return bad("nodes and gpus_per_node must be >= 1");
        }
        if !(1..=8).contains(&self.slots) {
            return bad("slots must lie in 1..=8");
        }
        let costs = [
            self.intra.alpha_us,
            self.intra.beta_us_per_mb,
            self.inter.alpha_us,
            self.inter.beta_us_per_mb,
            self.reduce_gamma,
        ];
        if costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return bad("alpha, beta and gamma must be finite and >= 0");
        }
        if self.max_channels == 0 || self.max_threadblocks == 0 {
            return bad("max_channels and max_threadblocks must be >= 1");
        }
        Ok(())
    }

    pub fn ranks(&self) -> usize {
        self.num_nodes * self.gpus_per_node
    }

    pub fn node_of(&self, rank: Rank) -> usize {
        rank / self.gpus_per_node
    }

    pub fn link_class(&self, a: Rank, b: Rank) -> LinkClass {
        if self.node_of(a) == self.node_of(b) {
            LinkClass::Intra
        } else {
            LinkClass::Inter
        }
    }

    pub fn link(&self, class: LinkClass) -> LinkCost {
        match class {
            LinkClass::Intra => self.intra,
            LinkClass::Inter => self.inter,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
    ReduceScatter,
    AllToAll,
    AllToNext,
    Custom,
}

impl CollectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CollectiveKind::AllReduce => "allreduce",
            CollectiveKind::AllGather => "allgather",
            CollectiveKind::ReduceScatter => "reducescatter",
            CollectiveKind::AllToAll => "alltoall",
            CollectiveKind::AllToNext => "alltonext",
            CollectiveKind::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "allreduce" => CollectiveKind::AllReduce,
            "allgather" => CollectiveKind::AllGather,
            "reducescatter" => CollectiveKind::ReduceScatter,
            "alltoall" => CollectiveKind::AllToAll,
            "alltonext" => CollectiveKind::AllToNext,
            "custom" => CollectiveKind::Custom,
            _ => return None,
        })
    }
}

/// Signature and postcondition of a collective.
///
/// `postcondition[r][i]` is the value output index `i` of rank `r` must hold;
/// `Uninitialized` entries are unconstrained.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CollectiveSpec {
    pub kind: CollectiveKind,
    pub ranks: usize,
    pub input_chunks: usize,
    pub output_chunks: usize,
    pub in_place: bool,
    pub postcondition: Vec<Vec<ChunkValue>>,
}

impl CollectiveSpec {
    pub fn expected(&self, rank: Rank, index: usize) -> &ChunkValue {
        &self.postcondition[rank][index]
    }

    /// Splits every chunk into `factor` sub-chunks; sub-chunk `p` of chunk `i`
    /// becomes chunk `i * factor + p`.
    pub fn refine(&self, factor: usize) -> CollectiveSpec {
        assert!(factor >= 1);
        if factor == 1 {
            return self.clone();
        }
        let postcondition = self
            .postcondition
            .iter()
            .map(|row| {
                row.iter()
                    .flat_map(|v| (0..factor).map(move |p| v.refine(factor, p)))
                    .collect()
            })
            .collect();
        CollectiveSpec {
            kind: self.kind,
            ranks: self.ranks,
            input_chunks: self.input_chunks * factor,
            output_chunks: self.output_chunks * factor,
            in_place: self.in_place,
            postcondition,
        }
    }

    /// A spec with no constraints, for programs that only move data around.
    pub fn custom(ranks: usize, input_chunks: usize, output_chunks: usize, in_place: bool) -> Self {
        CollectiveSpec {
            kind: CollectiveKind::Custom,
            ranks,
            input_chunks,
            output_chunks,
            in_place,
            postcondition: vec![vec![ChunkValue::Uninitialized; output_chunks]; ranks],
        }
    }

    /// Rebuilds a built-in spec from the header fields stored in a serialized program.
    pub fn from_header(
        kind: CollectiveKind,
        ranks: usize,
        input_chunks: usize,
        output_chunks: usize,
        in_place: bool,
    ) -> Result<Self, ModelError> {
        let spec = match kind {
            CollectiveKind::AllReduce => allreduce_spec(ranks, input_chunks)?,
            CollectiveKind::AllToAll => {
                if ranks == 0 || !input_chunks.is_multiple_of(ranks) {
                    return Err(ModelError::InvalidSpec(format!(
                        "alltoall over {ranks} ranks needs a multiple of {ranks} chunks"
                    )));
                }
                alltoall_spec(ranks, input_chunks / ranks)?
            }
            CollectiveKind::AllToNext => alltonext_spec(ranks, input_chunks)?,
            CollectiveKind::AllGather => {
                if in_place {
                    if ranks == 0 || !input_chunks.is_multiple_of(ranks) {
                        return Err(ModelError::InvalidSpec("bad in-place allgather size".into()));
                    }
                    allgather_spec(ranks, input_chunks / ranks, true)?
                } else {
                    allgather_spec(ranks, input_chunks, false)?
                }
            }
            CollectiveKind::ReduceScatter => {
                if ranks == 0 || !input_chunks.is_multiple_of(ranks) {
                    return Err(ModelError::InvalidSpec("bad reducescatter size".into()));
                }
                reducescatter_spec(ranks, input_chunks / ranks)?
            }
            CollectiveKind::Custom => CollectiveSpec::custom(ranks, input_chunks, output_chunks, in_place),
        };
        if spec.input_chunks != input_chunks
            || spec.output_chunks != output_chunks
            || spec.in_place != in_place
        {
            return Err(ModelError::InvalidSpec(format!(
                "{} header does not match its signature",
                kind.as_str()
            )));
        }
        Ok(spec)
    }
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<(), ModelError> {
    if cond {
        Ok(())
    } else {
        Err(ModelError::InvalidSpec(msg()))
    }
}

/// In-place AllReduce over `ranks` ranks with `nchunks` chunks each.
pub fn allreduce_spec(ranks: usize, nchunks: usize) -> Result<CollectiveSpec, ModelError> {
    require(ranks >= 1 && nchunks >= 1, || "allreduce needs ranks >= 1 and nchunks >= 1".into())?;
    let row: Vec<ChunkValue> = (0..nchunks)
        .map(|i| ChunkValue::from_ids((0..ranks).map(|r| InputId::new(r, i))).expect("distinct ids"))
        .collect();
    Ok(CollectiveSpec {
        kind: CollectiveKind::AllReduce,
        ranks,
        input_chunks: nchunks,
        output_chunks: nchunks,
        in_place: true,
        postcondition: vec![row; ranks],
    })
}

/// AllToAll: chunk block `i` of rank `j` ends on rank `i` at block `j`.
/// Each (source, destination) pair exchanges `per_pair` contiguous chunks.
pub fn alltoall_spec(ranks: usize, per_pair: usize) -> Result<CollectiveSpec, ModelError> {
    require(ranks >= 1 && per_pair >= 1, || "alltoall needs ranks >= 1 and per_pair >= 1".into())?;
    let n = ranks * per_pair;
    let postcondition = (0..ranks)
        .map(|i| {
            (0..n)
                .map(|idx| {
                    let (j, k) = (idx / per_pair, idx % per_pair);
                    ChunkValue::input(j, i * per_pair + k)
                })
                .collect()
        })
        .collect();
    Ok(CollectiveSpec {
        kind: CollectiveKind::AllToAll,
        ranks,
        input_chunks: n,
        output_chunks: n,
        in_place: false,
        postcondition,
    })
}

/// AllGather of `chunks` chunks per rank.
///
/// Out-of-place: output block `j` of every rank holds rank `j`'s input.
/// In-place: every rank owns block `j * chunks..` of a shared-size buffer,
/// as in the ring helper that copies within the input buffer.
pub fn allgather_spec(ranks: usize, chunks: usize, in_place: bool) -> Result<CollectiveSpec, ModelError> {
    require(ranks >= 1 && chunks >= 1, || "allgather needs ranks >= 1 and chunks >= 1".into())?;
    let n = ranks * chunks;
    let row: Vec<ChunkValue> = (0..n)
        .map(|idx| {
            let (j, k) = (idx / chunks, idx % chunks);
            if in_place {
                ChunkValue::input(j, idx)
            } else {
                ChunkValue::input(j, k)
            }
        })
        .collect();
    Ok(CollectiveSpec {
        kind: CollectiveKind::AllGather,
        ranks,
        input_chunks: if in_place { n } else { chunks },
        output_chunks: n,
        in_place,
        postcondition: vec![row; ranks],
    })
}

/// In-place ReduceScatter: rank `r` owns block `r` (of `chunks` chunks) of the
/// buffer, which must hold the full reduction; everything else is unconstrained.
pub fn reducescatter_spec(ranks: usize, chunks: usize) -> Result<CollectiveSpec, ModelError> {
    require(ranks >= 1 && chunks >= 1, || "reducescatter needs ranks >= 1 and chunks >= 1".into())?;
    let n = ranks * chunks;
    let postcondition = (0..ranks)
        .map(|r| {
            (0..n)
                .map(|idx| {
                    if idx / chunks == r {
                        ChunkValue::from_ids((0..ranks).map(|q| InputId::new(q, idx))).expect("distinct")
                    } else {
                        ChunkValue::Uninitialized
                    }
                })
                .collect()
        })
        .collect();
    Ok(CollectiveSpec {
        kind: CollectiveKind::ReduceScatter,
        ranks,
        input_chunks: n,
        output_chunks: n,
        in_place: true,
        postcondition,
    })
}

/// AllToNext: rank `i` delivers its whole buffer to rank `i + 1`; rank 0's
/// output is unconstrained.
pub fn alltonext_spec(ranks: usize, chunks: usize) -> Result<CollectiveSpec, ModelError> {
    require(ranks >= 2 && chunks >= 1, || "alltonext needs ranks >= 2 and chunks >= 1".into())?;
    let postcondition = (0..ranks)
        .map(|r| {
            (0..chunks)
                .map(|j| if r == 0 { ChunkValue::Uninitialized } else { ChunkValue::input(r - 1, j) })
                .collect()
        })
        .collect();
    Ok(CollectiveSpec {
        kind: CollectiveKind::AllToNext,
        ranks,
        input_chunks: chunks,
        output_chunks: chunks,
        in_place: false,
        postcondition,
    })
}

/// Symbolic contents of every buffer on every rank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BufferState {
    /// `buffers[rank][buffer as usize]`
    pub buffers: Vec<[Vec<ChunkValue>; 3]>,
    pub in_place: bool,
}

impl BufferState {
    /// Initial state: inputs hold their identities, everything else is uninitialized.
    pub fn initial(spec: &CollectiveSpec, scratch: &[usize]) -> Self {
        let buffers = (0..spec.ranks)
            .map(|r| {
                let input = (0..spec.input_chunks).map(|i| ChunkValue::input(r, i)).collect();
                let output = if spec.in_place {
                    Vec::new()
                } else {
                    vec![ChunkValue::Uninitialized; spec.output_chunks]
                };
                let sc = vec![ChunkValue::Uninitialized; scratch.get(r).copied().unwrap_or(0)];
                [input, output, sc]
            })
            .collect();
        BufferState { buffers, in_place: spec.in_place }
    }

    fn resolve(&self, buffer: Buffer) -> Buffer {
        if self.in_place && buffer == Buffer::Output {
            Buffer::Input
        } else {
            buffer
        }
    }

    pub fn get(&self, rank: Rank, buffer: Buffer, index: usize) -> &ChunkValue {
        const UNINIT: ChunkValue = ChunkValue::Uninitialized;
        let b = self.resolve(buffer);
        self.buffers[rank][b.slot()].get(index).unwrap_or(&UNINIT)
    }

    pub fn set(&mut self, rank: Rank, buffer: Buffer, index: usize, value: ChunkValue) {
        let b = self.resolve(buffer);
        let v = &mut self.buffers[rank][b.slot()];
        if v.len() <= index {
            v.resize(index + 1, ChunkValue::Uninitialized);
        }
        v[index] = value;
    }

    /// The buffer a collective's output is read from.
    pub fn output(&self, rank: Rank) -> &[ChunkValue] {
        &self.buffers[rank][self.resolve(Buffer::Output).slot()]
    }

    /// Deterministic textual form used to compare final states bit-for-bit.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        for (r, bufs) in self.buffers.iter().enumerate() {
            for b in Buffer::ALL {
                let vals = &bufs[b.slot()];
                if vals.is_empty() {
                    continue;
                }
                out.push_str(&format!("{r}.{b}:"));
                for v in vals {
                    out.push(' ');
                    out.push_str(&v.to_string());
                }
                out.push('\n');
            }
        }
        out
    }
}

/// One mismatch between the postcondition and a final buffer state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mismatch {
    pub rank: Rank,
    pub index: usize,
    pub expected: ChunkValue,
    pub actual: ChunkValue,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VerificationReport {
    pub checked: usize,
    pub mismatches: Vec<Mismatch>,
    /// Non-fatal diagnostics carried over from tracing.
    pub notes: Vec<String>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares the output buffers of `state` against `spec`.
pub fn check_postcondition(spec: &CollectiveSpec, state: &BufferState) -> VerificationReport {
    let mut report = VerificationReport::default();
    for r in 0..spec.ranks {
        let out = state.output(r);
        for (i, expected) in spec.postcondition[r].iter().enumerate() {
            if !expected.is_initialized() {
                continue;
            }
            report.checked += 1;
            let actual = out.get(i).cloned().unwrap_or_default();
            if &actual != expected {
                report.mismatches.push(Mismatch { rank: r, index: i, expected: expected.clone(), actual });
            }
        }
    }
    report
}
