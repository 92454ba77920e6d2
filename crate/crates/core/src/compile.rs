//! The whole pipeline from a traced program to a scheduled program.

use thiserror::Error;

use crate::dag::ChunkDag;
use crate::gallery::GalleryError;
use crate::ir::IrProgram;
use crate::lowering::{fuse, lower, InstrDag};
use crate::model::VerificationReport;
use crate::scheduler::{schedule, ScheduleConfig, ScheduleError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompileError {
    #[error(transparent)]
    Gallery(#[from] GalleryError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompileOptions {
    pub fuse: bool,
    pub schedule: ScheduleConfig,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { fuse: true, schedule: ScheduleConfig::default() }
    }
}

#[derive(Clone, Debug)]
pub struct Compiled {
    pub dag: ChunkDag,
    /// Postcondition check of the traced program.
    pub verification: VerificationReport,
    /// Instructions straight out of lowering.
    pub lowered: InstrDag,
    /// Instructions handed to the scheduler (fused unless disabled).
    pub instrs: InstrDag,
    pub ir: IrProgram,
}

/// Verifies, lowers, optionally fuses and schedules `dag`. A failed
/// postcondition is reported, not raised.
pub fn compile(dag: ChunkDag, opts: &CompileOptions) -> Result<Compiled, CompileError> {
    let verification = dag.verify();
    let lowered = lower(&dag);
    let instrs = if opts.fuse { fuse(&lowered) } else { lowered.clone() };
    let ir = schedule(&instrs, &dag.spec, &opts.schedule)?;
    Ok(Compiled { dag, verification, lowered, instrs, ir })
}
