//! The scheduled program format: per-GPU thread blocks holding sequential
//! instruction lists, with a canonical JSON encoding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::dag::escape;
use crate::lowering::{Loc, Opcode};
use crate::model::{Buffer, CollectiveKind, CollectiveSpec, ModelError, Rank, Topology};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Protocol {
    #[default]
    Simple,
    Ll,
    Ll128,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Simple => "Simple",
            Protocol::Ll => "LL",
            Protocol::Ll128 => "LL128",
        }
    }

    /// Accepts the canonical spelling or any casing of it.
    pub fn parse(s: &str) -> Option<Protocol> {
        match s.to_ascii_lowercase().as_str() {
            "simple" => Some(Protocol::Simple),
            "ll" => Some(Protocol::Ll),
            "ll128" => Some(Protocol::Ll128),
            _ => None,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `(rank, tb, step)` of one instruction.
pub type OpAddr = (Rank, usize, usize);

/// `(sender, receiver, channel)`.
pub type Connection = (Rank, Rank, u32);

/// Wait until step `step` of thread block `tb` on the same GPU has completed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Dep {
    pub tb: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IrOp {
    pub step: usize,
    pub opcode: Opcode,
    /// `None` only for `nop`.
    pub src: Option<Loc>,
    pub dst: Option<Loc>,
    pub count: usize,
    pub deps: Vec<Dep>,
    pub has_dep: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IrThreadBlock {
    pub id: usize,
    pub send_peer: Option<Rank>,
    pub recv_peer: Option<Rank>,
    pub channel: u32,
    pub ops: Vec<IrOp>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IrGpu {
    pub rank: Rank,
    pub threadblocks: Vec<IrThreadBlock>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChunkCounts {
    pub input: usize,
    pub output: usize,
    pub scratch: usize,
}

/// Message sizes the program is meant to be selected for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SizeRange {
    pub min_bytes: u64,
    /// `None` means unbounded.
    pub max_bytes: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IrProgram {
    pub name: String,
    pub collective: CollectiveKind,
    pub protocol: Protocol,
    pub inplace: bool,
    pub nchunks: ChunkCounts,
    pub size_range: SizeRange,
    pub gpus: Vec<IrGpu>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
}

impl IrError {
    /// JSON path of a schema error, if this is one.
    pub fn path(&self) -> Option<&str> {
        match self {
            IrError::Schema { path, .. } => Some(path),
            IrError::Json(_) => None,
        }
    }
}

impl IrProgram {
    pub fn ranks(&self) -> usize {
        self.gpus.len()
    }

    pub fn block(&self, rank: Rank, tb: usize) -> Option<&IrThreadBlock> {
        self.gpus.get(rank)?.threadblocks.get(tb)
    }

    pub fn instruction_count(&self) -> usize {
        self.gpus.iter().flat_map(|g| &g.threadblocks).map(|t| t.ops.len()).sum()
    }

    pub fn count_opcode(&self, op: Opcode) -> usize {
        self.ops().filter(|(_, _, o)| o.opcode == op).count()
    }

    pub fn fused_count(&self) -> usize {
        self.ops().filter(|(_, _, o)| o.opcode.is_fused()).count()
    }

    /// `(rank, tb, op)` for every instruction.
    pub fn ops(&self) -> impl Iterator<Item = (Rank, usize, &IrOp)> + '_ {
        self.gpus.iter().flat_map(|g| {
            g.threadblocks.iter().flat_map(move |t| t.ops.iter().map(move |o| (g.rank, t.id, o)))
        })
    }

    pub fn max_threadblocks_per_gpu(&self) -> usize {
        self.gpus.iter().map(|g| g.threadblocks.len()).max().unwrap_or(0)
    }

    pub fn channels(&self) -> BTreeSet<u32> {
        self.gpus
            .iter()
            .flat_map(|g| &g.threadblocks)
            .filter(|t| t.send_peer.is_some() || t.recv_peer.is_some())
            .map(|t| t.channel)
            .collect()
    }

    /// The collective this program claims to implement, at its own chunk granularity.
    pub fn spec(&self) -> Result<CollectiveSpec, ModelError> {
        CollectiveSpec::from_header(
            self.collective,
            self.gpus.len(),
            self.nchunks.input,
            self.nchunks.output,
            self.inplace,
        )
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(&self.to_tree()).expect("IR serializes");
        text.push('\n');
        text
    }

    fn to_tree(&self) -> J {
        let peer = |p: Option<Rank>| J::Int(p.map_or(-1, |p| p as i64));
        let loc_buf = |l: Option<Loc>| J::Str(l.map_or("none", |l| l.buffer.as_str()).to_string());
        let loc_off = |l: Option<Loc>| J::Int(l.map_or(-1, |l| l.index as i64));
        let gpus = self
            .gpus
            .iter()
            .map(|g| {
                let tbs = g
                    .threadblocks
                    .iter()
                    .map(|t| {
                        let ops = t
                            .ops
                            .iter()
                            .map(|o| {
                                let deps = o
                                    .deps
                                    .iter()
                                    .map(|d| obj([("tb", J::Int(d.tb as i64)), ("step", J::Int(d.step as i64))]))
                                    .collect();
                                obj([
                                    ("step", J::Int(o.step as i64)),
                                    ("opcode", J::Str(o.opcode.as_str().into())),
                                    ("src_buf", loc_buf(o.src)),
                                    ("src_off", loc_off(o.src)),
                                    ("dst_buf", loc_buf(o.dst)),
                                    ("dst_off", loc_off(o.dst)),
                                    ("count", J::Int(o.count as i64)),
                                    ("deps", J::Arr(deps)),
                                    ("has_dep", J::Bool(o.has_dep)),
                                ])
                            })
                            .collect();
                        obj([
                            ("id", J::Int(t.id as i64)),
                            ("send_peer", peer(t.send_peer)),
                            ("recv_peer", peer(t.recv_peer)),
                            ("channel", J::Int(t.channel as i64)),
                            ("ops", J::Arr(ops)),
                        ])
                    })
                    .collect();
                obj([("rank", J::Int(g.rank as i64)), ("threadblocks", J::Arr(tbs))])
            })
            .collect();
        obj([
            ("name", J::Str(self.name.clone())),
            ("collective", J::Str(self.collective.as_str().into())),
            ("protocol", J::Str(self.protocol.as_str().into())),
            ("inplace", J::Bool(self.inplace)),
            (
                "nchunks",
                obj([
                    ("input", J::Int(self.nchunks.input as i64)),
                    ("output", J::Int(self.nchunks.output as i64)),
                    ("scratch", J::Int(self.nchunks.scratch as i64)),
                ]),
            ),
            (
                "size_range",
                obj([
                    ("min_bytes", J::Int(self.size_range.min_bytes as i64)),
                    ("max_bytes", J::Int(self.size_range.max_bytes.map_or(-1, |b| b as i64))),
                ]),
            ),
            ("gpus", J::Arr(gpus)),
        ])
    }

    pub fn from_json(text: &str) -> Result<IrProgram, IrError> {
        let v: Value = serde_json::from_str(text).map_err(|e| IrError::Json(e.to_string()))?;
        decode_program(&v)
    }

    /// Graphviz rendering: one cluster per GPU, one sub-cluster per thread
    /// block, dependency edges dashed and matched send/receive pairs in red.
    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{}\" {{", escape(&self.name));
        let _ = writeln!(out, "  node [shape=box, fontname=\"monospace\"];");
        let id = |r: Rank, tb: usize, s: usize| format!("g{r}_t{tb}_s{s}");
        for g in &self.gpus {
            let _ = writeln!(out, "  subgraph cluster_g{} {{", g.rank);
            let _ = writeln!(out, "    label=\"gpu {}\";", g.rank);
            for t in &g.threadblocks {
                let _ = writeln!(out, "    subgraph cluster_g{}_t{} {{", g.rank, t.id);
                let peer = |p: Option<Rank>| p.map_or("-".to_string(), |p| p.to_string());
                let _ = writeln!(
                    out,
                    "      label=\"tb {} send {} recv {} ch {}\";",
                    t.id,
                    peer(t.send_peer),
                    peer(t.recv_peer),
                    t.channel
                );
                for o in &t.ops {
                    let mut label = format!("{} {}", o.step, o.opcode);
                    if let Some(s) = o.src {
                        let _ = write!(label, " {}[{}]", s.buffer, s.index);
                    }
                    if let Some(d) = o.dst {
                        let _ = write!(label, " -> {}[{}]", d.buffer, d.index);
                    }
                    if o.count > 1 {
                        let _ = write!(label, " x{}", o.count);
                    }
                    let _ = writeln!(out, "      {} [label=\"{}\"];", id(g.rank, t.id, o.step), escape(&label));
                }
                for w in t.ops.windows(2) {
                    let _ = writeln!(out, "      {} -> {};", id(g.rank, t.id, w[0].step), id(g.rank, t.id, w[1].step));
                }
                out.push_str("    }\n");
            }
            out.push_str("  }\n");
        }
        for g in &self.gpus {
            for t in &g.threadblocks {
                for o in &t.ops {
                    for d in &o.deps {
                        let _ = writeln!(
                            out,
                            "  {} -> {} [style=dashed];",
                            id(g.rank, d.tb, d.step),
                            id(g.rank, t.id, o.step)
                        );
                    }
                }
            }
        }
        for (sender, receiver) in self.matched_transfers() {
            let _ = writeln!(
                out,
                "  {} -> {} [color=red];",
                id(sender.0, sender.1, sender.2),
                id(receiver.0, receiver.1, receiver.2)
            );
        }
        out.push_str("}\n");
        out
    }

    /// Pairs the k-th send on every connection with the k-th receive.
    pub fn matched_transfers(&self) -> Vec<(OpAddr, OpAddr)> {
        let mut sends: BTreeMap<Connection, Vec<OpAddr>> = BTreeMap::new();
        let mut recvs: BTreeMap<Connection, Vec<OpAddr>> = BTreeMap::new();
        for g in &self.gpus {
            for t in &g.threadblocks {
                for o in &t.ops {
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
        let mut out = Vec::new();
        for (conn, s) in &sends {
            if let Some(r) = recvs.get(conn) {
                out.extend(s.iter().copied().zip(r.iter().copied()));
            }
        }
        out
    }
}

/// A sorted-key JSON tree, so the encoding never depends on map ordering features.
#[derive(Serialize)]
#[serde(untagged)]
enum J {
    Obj(BTreeMap<&'static str, J>),
    Arr(Vec<J>),
    Str(String),
    Int(i64),
    Bool(bool),
}

fn obj<const N: usize>(fields: [(&'static str, J); N]) -> J {
    J::Obj(fields.into_iter().collect())
}

fn schema(path: &str, message: impl Into<String>) -> IrError {
    IrError::Schema { path: path.to_string(), message: message.into() }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

struct Obj<'a> {
    path: String,
    map: &'a serde_json::Map<String, Value>,
}

impl<'a> Obj<'a> {
    fn new(v: &'a Value, path: &str, keys: &[&str]) -> Result<Self, IrError> {
        let map = v.as_object().ok_or_else(|| schema(path, "expected an object"))?;
        for k in map.keys() {
            if !keys.contains(&k.as_str()) {
                return Err(schema(&join(path, k), "unknown field"));
            }
        }
        Ok(Obj { path: path.to_string(), map })
    }

    fn field(&self, key: &str) -> Result<(&'a Value, String), IrError> {
        let path = join(&self.path, key);
        match self.map.get(key) {
            Some(v) => Ok((v, path)),
            None => Err(schema(&path, "missing field")),
        }
    }

    fn int(&self, key: &str, min: i64) -> Result<i64, IrError> {
        let (v, path) = self.field(key)?;
        let n = v.as_i64().ok_or_else(|| schema(&path, "expected an integer"))?;
        if n < min {
            return Err(schema(&path, format!("must be >= {min}")));
        }
        Ok(n)
    }

    fn uint(&self, key: &str) -> Result<usize, IrError> {
        Ok(self.int(key, 0)? as usize)
    }

    fn peer(&self, key: &str) -> Result<Option<Rank>, IrError> {
        let n = self.int(key, -1)?;
        Ok((n >= 0).then_some(n as usize))
    }

    fn string(&self, key: &str) -> Result<(&'a str, String), IrError> {
        let (v, path) = self.field(key)?;
        let s = v.as_str().ok_or_else(|| schema(&path, "expected a string"))?;
        Ok((s, path))
    }

    fn boolean(&self, key: &str) -> Result<bool, IrError> {
        let (v, path) = self.field(key)?;
        v.as_bool().ok_or_else(|| schema(&path, "expected a boolean"))
    }

    fn array(&self, key: &str) -> Result<(&'a Vec<Value>, String), IrError> {
        let (v, path) = self.field(key)?;
        let a = v.as_array().ok_or_else(|| schema(&path, "expected an array"))?;
        Ok((a, path))
    }
}

fn decode_program(v: &Value) -> Result<IrProgram, IrError> {
    let top = Obj::new(
        v,
        "",
        &["name", "collective", "protocol", "inplace", "nchunks", "size_range", "gpus"],
    )?;
    let (name, _) = top.string("name")?;
    let (coll, path) = top.string("collective")?;
    let collective =
        CollectiveKind::parse(coll).ok_or_else(|| schema(&path, format!("unknown collective {coll:?}")))?;
    let (proto, path) = top.string("protocol")?;
    let protocol = match proto {
        "Simple" => Protocol::Simple,
        "LL" => Protocol::Ll,
        "LL128" => Protocol::Ll128,
        _ => return Err(schema(&path, format!("unknown protocol {proto:?}"))),
    };
    let inplace = top.boolean("inplace")?;
    let (nc, path) = top.field("nchunks")?;
    let nc = Obj::new(nc, &path, &["input", "output", "scratch"])?;
    let nchunks = ChunkCounts { input: nc.uint("input")?, output: nc.uint("output")?, scratch: nc.uint("scratch")? };
    let (sr, path) = top.field("size_range")?;
    let sr = Obj::new(sr, &path, &["min_bytes", "max_bytes"])?;
    let min_bytes = sr.int("min_bytes", 0)? as u64;
    let max = sr.int("max_bytes", -1)?;
    let size_range = SizeRange { min_bytes, max_bytes: (max >= 0).then_some(max as u64) };
    let (gpus_v, gpus_path) = top.array("gpus")?;
    let mut gpus = Vec::with_capacity(gpus_v.len());
    for (gi, g) in gpus_v.iter().enumerate() {
        let gpath = format!("{gpus_path}[{gi}]");
        let go = Obj::new(g, &gpath, &["rank", "threadblocks"])?;
        let rank = go.uint("rank")?;
        let (tbs_v, tbs_path) = go.array("threadblocks")?;
        let mut threadblocks = Vec::with_capacity(tbs_v.len());
        for (ti, t) in tbs_v.iter().enumerate() {
            let tpath = format!("{tbs_path}[{ti}]");
            let to = Obj::new(t, &tpath, &["id", "send_peer", "recv_peer", "channel", "ops"])?;
            let id = to.uint("id")?;
            let send_peer = to.peer("send_peer")?;
            let recv_peer = to.peer("recv_peer")?;
            let channel = to.int("channel", 0)?;
            let channel = u32::try_from(channel).map_err(|_| schema(&join(&tpath, "channel"), "out of range"))?;
            let (ops_v, ops_path) = to.array("ops")?;
            let mut ops = Vec::with_capacity(ops_v.len());
            for (oi, o) in ops_v.iter().enumerate() {
                ops.push(decode_op(o, &format!("{ops_path}[{oi}]"))?);
            }
            threadblocks.push(IrThreadBlock { id, send_peer, recv_peer, channel, ops });
        }
        gpus.push(IrGpu { rank, threadblocks });
    }
    Ok(IrProgram { name: name.to_string(), collective, protocol, inplace, nchunks, size_range, gpus })
}

fn decode_op(v: &Value, path: &str) -> Result<IrOp, IrError> {
    let o = Obj::new(
        v,
        path,
        &["step", "opcode", "src_buf", "src_off", "dst_buf", "dst_off", "count", "deps", "has_dep"],
    )?;
    let step = o.uint("step")?;
    let (name, opath) = o.string("opcode")?;
    let opcode = Opcode::parse(name).ok_or_else(|| schema(&opath, format!("unknown opcode {name:?}")))?;
    let loc = |buf_key: &str, off_key: &str| -> Result<Option<Loc>, IrError> {
        let (b, bpath) = o.string(buf_key)?;
        let off = o.int(off_key, -1)?;
        match (b, off) {
            ("none", -1) => Ok(None),
            ("none", _) => Err(schema(&join(path, off_key), "must be -1 when the buffer is none")),
            (_, -1) => Err(schema(&join(path, off_key), "must be >= 0")),
            _ => {
                let buffer =
                    Buffer::parse(b).ok_or_else(|| schema(&bpath, format!("unknown buffer {b:?}")))?;
                Ok(Some(Loc { buffer, index: off as usize }))
            }
        }
    };
    let src = loc("src_buf", "src_off")?;
    let dst = loc("dst_buf", "dst_off")?;
    let count = o.uint("count")?;
    let (deps_v, deps_path) = o.array("deps")?;
    let mut deps = Vec::with_capacity(deps_v.len());
    for (di, d) in deps_v.iter().enumerate() {
        let dpath = format!("{deps_path}[{di}]");
        let dobj = Obj::new(d, &dpath, &["tb", "step"])?;
        deps.push(Dep { tb: dobj.uint("tb")?, step: dobj.uint("step")? });
    }
    let has_dep = o.boolean("has_dep")?;
    Ok(IrOp { step, opcode, src, dst, count, deps, has_dep })
}

/// One structural problem found by [`validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Re-checks every structural invariant of a program against a machine.
pub fn validate(ir: &IrProgram, topo: &Topology) -> ValidationReport {
    let mut v = Vec::new();
    let mut bad = |location: String, message: String| v.push(Violation { location, message });
    let ranks = ir.gpus.len();
    if ranks != topo.ranks() {
        bad("gpus".into(), format!("program has {ranks} GPUs but the machine has {}", topo.ranks()));
    }
    if ir.inplace && ir.nchunks.input != ir.nchunks.output {
        bad("nchunks".into(), "in-place programs need equal input and output counts".into());
    }
    let capacity = |b: Buffer| match b {
        Buffer::Input => ir.nchunks.input,
        Buffer::Output if ir.inplace => ir.nchunks.input,
        Buffer::Output => ir.nchunks.output,
        Buffer::Scratch => ir.nchunks.scratch,
    };
    // connection -> (sending blocks, receiving blocks)
    let mut senders: BTreeMap<(Rank, Rank, u32), Vec<String>> = BTreeMap::new();
    let mut receivers: BTreeMap<(Rank, Rank, u32), Vec<String>> = BTreeMap::new();
    let mut send_counts: BTreeMap<(Rank, Rank, u32), Vec<usize>> = BTreeMap::new();
    let mut recv_counts: BTreeMap<(Rank, Rank, u32), Vec<usize>> = BTreeMap::new();
    for (gi, g) in ir.gpus.iter().enumerate() {
        let gloc = format!("gpus[{gi}]");
        if g.rank != gi {
            bad(gloc.clone(), format!("rank {} listed at position {gi}", g.rank));
        }
        if g.threadblocks.len() > topo.max_threadblocks {
            bad(
                gloc.clone(),
                format!("{} thread blocks exceed the limit of {}", g.threadblocks.len(), topo.max_threadblocks),
            );
        }
        let has_dep: HashMap<(usize, usize), bool> = g
            .threadblocks
            .iter()
            .flat_map(|t| t.ops.iter().map(move |o| ((t.id, o.step), o.has_dep)))
            .collect();
        for (ti, t) in g.threadblocks.iter().enumerate() {
            let tloc = format!("{gloc}.threadblocks[{ti}]");
            if t.id != ti {
                bad(tloc.clone(), format!("id {} listed at position {ti}", t.id));
            }
            if t.channel >= topo.max_channels {
                bad(tloc.clone(), format!("channel {} exceeds the limit of {}", t.channel, topo.max_channels));
            }
            for (key, peer) in [("send_peer", t.send_peer), ("recv_peer", t.recv_peer)] {
                if let Some(p) = peer {
                    if p >= ranks || p == g.rank {
                        bad(format!("{tloc}.{key}"), format!("invalid peer {p}"));
                    }
                }
            }
            if let Some(p) = t.send_peer {
                senders.entry((g.rank, p, t.channel)).or_default().push(tloc.clone());
            }
            if let Some(p) = t.recv_peer {
                receivers.entry((p, g.rank, t.channel)).or_default().push(tloc.clone());
            }
            for (oi, o) in t.ops.iter().enumerate() {
                let oloc = format!("{tloc}.ops[{oi}]");
                let mut seen_tbs = BTreeSet::new();
                if o.step != oi {
                    bad(oloc.clone(), format!("step {} listed at position {oi}", o.step));
                }
                let nop = o.opcode == Opcode::Nop;
                if nop != (o.src.is_none() && o.dst.is_none()) {
                    bad(oloc.clone(), "only nop may omit its buffers".into());
                }
                if !nop && o.count == 0 {
                    bad(oloc.clone(), "count must be >= 1".into());
                }
                if o.opcode.sends() && t.send_peer.is_none() {
                    bad(oloc.clone(), format!("{} in a block without a send peer", o.opcode));
                }
                if o.opcode.receives() && t.recv_peer.is_none() {
                    bad(oloc.clone(), format!("{} in a block without a receive peer", o.opcode));
                }
                // a plain send's destination lives on the peer
                let mut locals = vec![o.src];
                if o.opcode != Opcode::Send {
                    locals.push(o.dst);
                }
                for l in locals.into_iter().flatten() {
                    if l.index + o.count > capacity(l.buffer) {
                        bad(oloc.clone(), format!("{}[{}..{}) out of range", l.buffer, l.index, l.index + o.count));
                    }
                }
                if o.opcode.sends() {
                    if let Some(p) = t.send_peer {
                        send_counts.entry((g.rank, p, t.channel)).or_default().push(o.count);
                    }
                }
                if o.opcode.receives() {
                    if let Some(p) = t.recv_peer {
                        recv_counts.entry((p, g.rank, t.channel)).or_default().push(o.count);
                    }
                }
                for (di, d) in o.deps.iter().enumerate() {
                    let dloc = format!("{oloc}.deps[{di}]");
                    if d.tb == t.id {
                        bad(dloc.clone(), "dependency on its own thread block".into());
                    }
                    if !seen_tbs.insert(d.tb) {
                        bad(dloc.clone(), format!("second dependency on thread block {}", d.tb));
                    }
                    match has_dep.get(&(d.tb, d.step)) {
                        None => bad(dloc, format!("no instruction at tb {} step {}", d.tb, d.step)),
                        Some(false) => bad(dloc, format!("tb {} step {} does not set has_dep", d.tb, d.step)),
                        Some(true) => {}
                    }
                }
            }
        }
    }
    for (conn, blocks) in senders.iter().chain(&receivers) {
        if blocks.len() > 1 {
            bad(
                blocks[1].clone(),
                format!(
                    "connection {}->{} on channel {} is shared with {}",
                    conn.0, conn.1, conn.2, blocks[0]
                ),
            );
        }
    }
    let conns: BTreeSet<_> = send_counts.keys().chain(recv_counts.keys()).copied().collect();
    for c in conns {
        let s = send_counts.get(&c).cloned().unwrap_or_default();
        let r = recv_counts.get(&c).cloned().unwrap_or_default();
        if s != r {
            bad(
                format!("connection {}->{} channel {}", c.0, c.1, c.2),
                format!("sends {s:?} do not match receives {r:?}"),
            );
        }
    }
    ValidationReport { violations: v }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loc(b: Buffer, i: usize) -> Option<Loc> {
        Some(Loc::new(b, i))
    }

    pub(crate) fn two_rank_copy() -> IrProgram {
        let op = |opcode, src, dst| IrOp { step: 0, opcode, src, dst, count: 1, deps: vec![], has_dep: false };
        IrProgram {
            name: "pair".into(),
            collective: CollectiveKind::Custom,
            protocol: Protocol::Simple,
            inplace: true,
            nchunks: ChunkCounts { input: 1, output: 1, scratch: 1 },
            size_range: SizeRange::default(),
            gpus: vec![
                IrGpu {
                    rank: 0,
                    threadblocks: vec![IrThreadBlock {
                        id: 0,
                        send_peer: Some(1),
                        recv_peer: None,
                        channel: 0,
                        ops: vec![op(Opcode::Send, loc(Buffer::Input, 0), loc(Buffer::Scratch, 0))],
                    }],
                },
                IrGpu {
                    rank: 1,
                    threadblocks: vec![IrThreadBlock {
                        id: 0,
                        send_peer: None,
                        recv_peer: Some(0),
                        channel: 0,
                        ops: vec![op(Opcode::Recv, loc(Buffer::Scratch, 0), loc(Buffer::Scratch, 0))],
                    }],
                },
            ],
        }
    }

    #[test]
    fn round_trip_and_canonical_bytes() {
        let ir = two_rank_copy();
        let text = ir.to_json();
        let back = IrProgram::from_json(&text).unwrap();
        assert_eq!(back, ir);
        assert_eq!(back.to_json(), text);
        // keys come out sorted
        let first_keys: Vec<&str> = text.lines().skip(1).take(3).map(|l| l.trim()).collect();
        assert!(first_keys[0].starts_with("\"collective\""));
        assert!(first_keys[1].starts_with("\"gpus\""));
    }

    #[test]
    fn missing_channel_names_its_path() {
        let mut v: Value = serde_json::from_str(&two_rank_copy().to_json()).unwrap();
        v["gpus"][0]["threadblocks"][0].as_object_mut().unwrap().remove("channel");
        let err = IrProgram::from_json(&v.to_string()).unwrap_err();
        assert_eq!(err.path(), Some("gpus[0].threadblocks[0].channel"));
    }

    #[test]
    fn nop_encoding() {
        let mut ir = two_rank_copy();
        ir.gpus[0].threadblocks[0].ops.push(IrOp {
            step: 1,
            opcode: Opcode::Nop,
            src: None,
            dst: None,
            count: 0,
            deps: vec![],
            has_dep: false,
        });
        let text = ir.to_json();
        assert!(text.contains("\"none\""));
        assert_eq!(IrProgram::from_json(&text).unwrap(), ir);
        assert!(validate(&ir, &Topology::single_node(2)).is_ok());
    }

    #[test]
    fn validation_catches_structural_errors() {
        let topo = Topology::single_node(2);
        assert!(validate(&two_rank_copy(), &topo).is_ok());

        let mut dup = two_rank_copy();
        let extra = dup.gpus[0].threadblocks[0].clone();
        dup.gpus[0].threadblocks.push(IrThreadBlock { id: 1, ..extra });
        let r = validate(&dup, &topo);
        assert!(r.violations.iter().any(|v| v.message.contains("shared")), "{r:?}");

        let mut dangling = two_rank_copy();
        dangling.gpus[1].threadblocks[0].ops[0].deps.push(Dep { tb: 3, step: 9 });
        let r = validate(&dangling, &topo);
        assert!(r.violations.iter().any(|v| v.message.contains("no instruction")));

        let mut small = topo.clone();
        small.max_threadblocks = 1;
        assert!(validate(&dup, &small).violations.iter().any(|v| v.message.contains("limit")));
    }
}
