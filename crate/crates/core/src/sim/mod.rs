//! Simulated execution of scheduled programs: a functional interpreter with
//! interleaving fuzzing and a discrete-event timing model.

mod functional;
mod timed;

use serde::Serialize;

use crate::ir::Protocol;
use crate::model::{Buffer, BufferState, LinkClass, Rank, VerificationReport};

pub use functional::run_functional;
pub use timed::{run_timed, sweep, sweep_csv, SweepRow};

/// Cost multipliers and slot count per protocol. Placeholder values, not
/// measurements.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProtocolCosts {
    pub alpha_scale: f64,
    pub beta_scale: f64,
    pub slots: usize,
}

pub fn protocol_costs(protocol: Protocol) -> ProtocolCosts {
    match protocol {
        Protocol::Simple => ProtocolCosts { alpha_scale: 1.0, beta_scale: 1.0, slots: 2 },
        Protocol::Ll => ProtocolCosts { alpha_scale: 0.25, beta_scale: 2.0, slots: 8 },
        Protocol::Ll128 => ProtocolCosts { alpha_scale: 0.5, beta_scale: 1.07, slots: 4 },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Seed for the functional interleaving choice.
    pub seed: u64,
    /// FIFO slots per connection; the protocol's value when `None`.
    pub slots: Option<usize>,
    /// Bytes in one chunk of the scheduled program.
    pub chunk_bytes: f64,
    /// Pipelining granularity; one tile per chunk when `None`.
    pub tile_bytes: Option<f64>,
    /// Safety net against malformed programs that never stop.
    pub max_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { seed: 0, slots: None, chunk_bytes: 1024.0 * 1024.0, tile_bytes: None, max_steps: 50_000_000 }
    }
}

impl SimConfig {
    pub fn slots_for(&self, protocol: Protocol) -> usize {
        self.slots.unwrap_or(protocol_costs(protocol).slots).max(1)
    }

    pub fn tiles(&self) -> usize {
        match self.tile_bytes {
            Some(t) if t > 0.0 && t < self.chunk_bytes => (self.chunk_bytes / t).ceil() as usize,
            _ => 1,
        }
    }

    /// Bytes of one chunk that travel in tile `t`.
    pub fn tile_chunk_bytes(&self, t: usize) -> f64 {
        match self.tile_bytes {
            Some(tb) if tb > 0.0 && tb < self.chunk_bytes => (self.chunk_bytes - t as f64 * tb).min(tb),
            _ => self.chunk_bytes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WaitReason {
    /// Semaphore wait on a block of the same GPU.
    Dep { tb: usize, step: usize },
    /// Nothing to receive from `peer`.
    Recv { peer: Rank, channel: u32 },
    /// No free slot towards `peer`.
    Send { peer: Rank, channel: u32 },
    /// The block has no peer for the direction its instruction needs.
    MissingPeer,
}

impl std::fmt::Display for WaitReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WaitReason::Dep { tb, step } => write!(f, "waits on tb {tb} step {step}"),
            WaitReason::Recv { peer, channel } => write!(f, "waits to receive from rank {peer} on channel {channel}"),
            WaitReason::Send { peer, channel } => write!(f, "waits for a free slot to rank {peer} on channel {channel}"),
            WaitReason::MissingPeer => write!(f, "has no peer for its instruction"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockedBlock {
    pub rank: Rank,
    pub tb: usize,
    pub step: usize,
    pub reason: WaitReason,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Deadlock {
    pub blocked: Vec<BlockedBlock>,
    /// The step budget ran out rather than every block stalling.
    pub fuel_exhausted: bool,
}

impl std::fmt::Display for Deadlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.fuel_exhausted {
            writeln!(f, "step budget exhausted")?;
        }
        for b in &self.blocked {
            writeln!(f, "rank {} tb {} step {} {}", b.rank, b.tb, b.step, b.reason)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Access {
    pub tb: usize,
    pub step: usize,
    pub write: bool,
}

/// Two accesses to one chunk slot, at least one a write, with no
/// happens-before order between them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Race {
    pub rank: Rank,
    pub buffer: Buffer,
    pub index: usize,
    pub first: Access,
    pub second: Access,
}

impl std::fmt::Display for Race {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = |a: &Access| if a.write { "write" } else { "read" };
        write!(
            f,
            "rank {} {}[{}]: {} by tb {} step {} and {} by tb {} step {}",
            self.rank,
            self.buffer,
            self.index,
            kind(&self.first),
            self.first.tb,
            self.first.step,
            kind(&self.second),
            self.second.tb,
            self.second.step
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstrEvent {
    pub rank: Rank,
    pub tb: usize,
    pub step: usize,
    pub tile: usize,
    pub opcode: &'static str,
    pub start_us: f64,
    pub end_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferEvent {
    pub src: Rank,
    pub dst: Rank,
    pub channel: u32,
    pub link: &'static str,
    pub bytes: f64,
    pub start_us: f64,
    pub end_us: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Timeline {
    pub instructions: Vec<InstrEvent>,
    pub transfers: Vec<TransferEvent>,
}

impl Timeline {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("timeline serializes");
        s.push('\n');
        s
    }
}

pub(crate) fn link_name(class: LinkClass) -> &'static str {
    match class {
        LinkClass::Intra => "intra",
        LinkClass::Inter => "inter",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimReport {
    pub completed: bool,
    pub deadlock: Option<Deadlock>,
    pub races: Vec<Race>,
    /// Present once the program completed (functional mode).
    pub postcondition: Option<VerificationReport>,
    /// Failed reductions and malformed transfers.
    pub errors: Vec<String>,
    pub final_state: Option<BufferState>,
    pub makespan_us: Option<f64>,
    pub timeline: Timeline,
    /// Scheduler actions (functional) or processed events (timed).
    pub steps: usize,
    /// Largest number of unconsumed messages seen on any connection.
    pub max_fifo: usize,
}

impl SimReport {
    /// Completed without races or errors, and the postcondition holds when checked.
    pub fn passed(&self) -> bool {
        self.completed
            && self.races.is_empty()
            && self.errors.is_empty()
            && self.postcondition.as_ref().is_none_or(|p| p.passed())
    }
}
