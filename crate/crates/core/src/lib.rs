//! Compiler and simulated runtime for chunk-oriented collective
//! communication programs.
//!
//! Programs are written against [`ProgramBuilder`], traced into a
//! [`ChunkDag`], lowered and fused into an [`InstrDag`], scheduled onto
//! thread blocks and channels as an [`IrProgram`], and executed by the
//! functional and timed simulators in [`sim`].

pub mod compile;
pub mod dag;
pub mod frontend;
pub mod gallery;
pub mod ir;
pub mod lowering;
pub mod model;
pub mod scheduler;
pub mod sim;

pub use compile::{compile, CompileError, CompileOptions, Compiled};
pub use dag::{ChunkDag, ChunkOpKind, ChunkOpNode, DagEdge, Span};
pub use frontend::{ChunkRef, Directives, FrontendError, ProgramBuilder};
pub use gallery::{AlgorithmParams, GalleryError};
pub use ir::{validate, ChunkCounts, Connection, Dep, IrError, IrOp, IrProgram, IrThreadBlock, OpAddr, Protocol, SizeRange, ValidationReport};
pub use lowering::{fuse, lower, FusionStats, InstrDag, InstrNode, Loc, Opcode};
pub use model::{
    allgather_spec, allreduce_spec, alltonext_spec, alltoall_spec, reducescatter_spec, Buffer, BufferState, ChunkValue,
    CollectiveKind, CollectiveSpec, InputId, LinkClass, LinkCost, ModelError, Rank, Topology, VerificationReport,
    BYTES_PER_MB,
};
pub use scheduler::{check_slots, schedule, ScheduleConfig, ScheduleError, SlotReport};
pub use sim::{run_functional, run_timed, sweep, sweep_csv, SimConfig, SimReport};
