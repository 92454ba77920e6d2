//! `cclforge`: compile gallery programs to IR, verify and simulate them, and
//! emit their graphs.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cclforge_core::gallery::{self, ALGORITHMS};
use cclforge_core::{
    check_slots, compile, run_functional, run_timed, sweep, sweep_csv, validate, AlgorithmParams, CollectiveSpec,
    CompileOptions, Compiled, IrProgram, Opcode, Protocol, ScheduleConfig, SimConfig, Topology,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{debug, info};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Compile(String),
    #[error("{0}")]
    Verification(String),
    #[error("{0}")]
    Deadlock(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Compile(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Deadlock(_) => 4,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "cclforge", version, about = "Collective communication compiler and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compile a gallery algorithm to an IR file.
    Compile {
        algorithm: String,
        #[command(flatten)]
        algo: AlgoArgs,
        #[command(flatten)]
        build: BuildArgs,
        #[arg(short = 'o', long = "output")]
        output: Option<PathBuf>,
    },
    /// Verify an IR file or gallery algorithm over many interleavings.
    Verify {
        /// IR file or gallery algorithm name.
        input: String,
        #[command(flatten)]
        algo: AlgoArgs,
        #[command(flatten)]
        build: BuildArgs,
        /// Interleaving seeds for the functional simulator.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Sweep buffer sizes through the timed simulator and print CSV.
    Simulate {
        ir: PathBuf,
        #[arg(long)]
        topo: PathBuf,
        /// Per-rank buffer sizes; K, M and G are powers of 1024.
        #[arg(long, value_delimiter = ',', value_parser = parse_bytes,
              default_value = "1K,4K,16K,64K,256K,1M,4M,16M,64M,256M,1G")]
        sizes: Vec<u64>,
        /// Pipelining tile size.
        #[arg(long, value_parser = parse_bytes)]
        tile: Option<u64>,
        #[arg(short = 'o', long = "output")]
        output: Option<PathBuf>,
        /// Writes the event timeline of the first size as JSON.
        #[arg(long)]
        timeline: Option<PathBuf>,
    },
    /// Emit a graph of one compilation stage in Graphviz format.
    Dot {
        #[arg(value_enum)]
        stage: Stage,
        /// IR file (ir stage only) or gallery algorithm name.
        input: String,
        #[command(flatten)]
        algo: AlgoArgs,
        #[command(flatten)]
        build: BuildArgs,
        #[arg(short = 'o', long = "output")]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct AlgoArgs {
    /// Ranks for single-level algorithms.
    #[arg(long)]
    ranks: Option<usize>,
    /// Nodes.
    #[arg(short = 'N', long = "nodes")]
    nodes: Option<usize>,
    /// GPUs per node.
    #[arg(short = 'G', long = "gpus-per-node")]
    gpus: Option<usize>,
    /// Parallel instances, each on its own channels.
    #[arg(long, default_value_t = 1)]
    parallel: u32,
    /// Channels for the ring algorithm.
    #[arg(long, default_value_t = 1)]
    channels: u32,
}

#[derive(Args, Debug, Clone)]
struct BuildArgs {
    /// Topology JSON; sets N and G when no shape is given.
    #[arg(long)]
    topo: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Simple)]
    protocol: ProtocolArg,
    /// Skip instruction fusion.
    #[arg(long)]
    no_fuse: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ProtocolArg {
    Simple,
    Ll,
    Ll128,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Protocol {
        match p {
            ProtocolArg::Simple => Protocol::Simple,
            ProtocolArg::Ll => Protocol::Ll,
            ProtocolArg::Ll128 => Protocol::Ll128,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Chunk,
    Instr,
    Ir,
}

fn parse_bytes(text: &str) -> Result<u64, String> {
    let t = text.trim().to_ascii_uppercase();
    let t = t.strip_suffix("IB").or_else(|| t.strip_suffix('B')).unwrap_or(&t);
    let (digits, scale) = match t.chars().last() {
        Some('K') => (&t[..t.len() - 1], 1u64 << 10),
        Some('M') => (&t[..t.len() - 1], 1 << 20),
        Some('G') => (&t[..t.len() - 1], 1 << 30),
        _ => (t, 1),
    };
    let n: u64 = digits.trim().parse().map_err(|_| format!("not a byte size: {text}"))?;
    n.checked_mul(scale).filter(|&v| v > 0).ok_or_else(|| format!("byte size out of range: {text}"))
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Writes through a temporary file in the destination directory so readers
/// never see a partial file.
fn write_atomic(path: &Path, contents: &str) -> CliResult<()> {
    let io_err = |source| CliError::Io { path: path.to_path_buf(), source };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(contents.as_bytes()).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn emit(output: Option<&Path>, contents: &str) -> CliResult<()> {
    match output {
        Some(path) => write_atomic(path, contents),
        None => io::stdout()
            .write_all(contents.as_bytes())
            .map_err(|source| CliError::Io { path: PathBuf::from("<stdout>"), source }),
    }
}

fn load_topology(path: &Path) -> CliResult<Topology> {
    let text = read(path)?;
    Topology::from_json(&text).map_err(|e| CliError::Compile(format!("{}: {e}", path.display())))
}

fn load_ir(path: &Path) -> CliResult<IrProgram> {
    let text = read(path)?;
    IrProgram::from_json(&text).map_err(|e| CliError::Compile(format!("{}: {e}", path.display())))
}

fn build_program(name: &str, algo: &AlgoArgs, build: &BuildArgs) -> CliResult<(Compiled, Option<Topology>)> {
    let topo = build.topo.as_deref().map(load_topology).transpose()?;
    let mut params = AlgorithmParams {
        ranks: algo.ranks,
        nodes: algo.nodes,
        gpus_per_node: algo.gpus,
        parallel: algo.parallel,
        channels: algo.channels,
    };
    if let Some(t) = &topo {
        if params.ranks.is_none() && params.nodes.is_none() && params.gpus_per_node.is_none() {
            params.nodes = Some(t.num_nodes);
            params.gpus_per_node = Some(t.gpus_per_node);
        }
    }
    let dag = gallery::build(name, &params).map_err(|e| CliError::Compile(e.to_string()))?;
    if let Some(t) = &topo {
        if t.ranks() != dag.spec.ranks {
            return Err(CliError::Compile(format!(
                "{name} has {} ranks but the topology has {}",
                dag.spec.ranks,
                t.ranks()
            )));
        }
    }
    let mut schedule = topo.as_ref().map(ScheduleConfig::for_topology).unwrap_or_default();
    schedule.protocol = build.protocol.into();
    let opts = CompileOptions { fuse: !build.no_fuse, schedule };
    debug!("compiling {name} with {params:?}");
    let compiled = compile(dag, &opts).map_err(|e| CliError::Compile(e.to_string()))?;
    Ok((compiled, topo))
}

fn summary(name: &str, ir: &IrProgram) -> String {
    let channels: Vec<String> = ir.channels().iter().map(u32::to_string).collect();
    let fused: Vec<String> = Opcode::ALL
        .into_iter()
        .filter(|o| o.is_fused())
        .map(|o| format!("{}={}", o.as_str(), ir.count_opcode(o)))
        .collect();
    format!(
        "{name}: ranks={} chunks={}/{}/{} tb/gpu={} channels={{{}}} instrs={} fused={} ({})",
        ir.ranks(),
        ir.nchunks.input,
        ir.nchunks.output,
        ir.nchunks.scratch,
        ir.max_threadblocks_per_gpu(),
        channels.join(","),
        ir.instruction_count(),
        ir.fused_count(),
        fused.join(" ")
    )
}

fn run_compile(name: &str, algo: &AlgoArgs, build: &BuildArgs, output: Option<&Path>) -> CliResult<()> {
    let (compiled, _) = build_program(name, algo, build)?;
    if !compiled.verification.passed() {
        return Err(CliError::Compile(format!(
            "{name} does not satisfy its postcondition ({} mismatched chunks)",
            compiled.verification.mismatches.len()
        )));
    }
    for note in &compiled.verification.notes {
        eprintln!("note: {note}");
    }
    emit(output, &compiled.ir.to_json())?;
    eprintln!("{}", summary(name, &compiled.ir));
    Ok(())
}

fn run_verify(input: &str, algo: &AlgoArgs, build: &BuildArgs, seeds: u64) -> CliResult<()> {
    let (ir, spec, topo, name): (IrProgram, CollectiveSpec, Topology, String) =
        if ALGORITHMS.contains(&input) {
            let (compiled, topo) = build_program(input, algo, build)?;
            if !compiled.verification.passed() {
                for m in &compiled.verification.mismatches {
                    eprintln!("rank {} out[{}]: expected {} got {}", m.rank, m.index, m.expected, m.actual);
                }
                return Err(CliError::Verification(format!("{input} fails chunk-level verification")));
            }
            let topo = topo.unwrap_or_else(|| Topology::single_node(compiled.ir.ranks()));
            (compiled.ir, compiled.dag.spec, topo, input.to_string())
        } else {
            let path = Path::new(input);
            let ir = load_ir(path)?;
            let topo = match &build.topo {
                Some(p) => load_topology(p)?,
                None => Topology::single_node(ir.ranks()),
            };
            let spec = ir.spec().map_err(|e| CliError::Verification(format!("{input}: {e}")))?;
            (ir, spec, topo, ir_name(path))
        };

    let structural = validate(&ir, &topo);
    for v in &structural.violations {
        eprintln!("invalid: {v}");
    }

    let slots = topo.slots;
    let mut deadlocks = 0u64;
    let mut races = 0u64;
    let mut wrong = 0u64;
    let mut errors = 0u64;
    let mut first_failure: Option<String> = None;
    for seed in 0..seeds {
        let cfg = SimConfig { seed, slots: Some(slots), ..SimConfig::default() };
        let report = run_functional(&ir, &spec, &cfg);
        if report.passed() {
            continue;
        }
        let mut detail = format!("seed {seed}:\n");
        if let Some(d) = &report.deadlock {
            deadlocks += 1;
            detail.push_str(&format!("deadlock\n{d}"));
        }
        if !report.races.is_empty() {
            races += 1;
            for r in &report.races {
                detail.push_str(&format!("race: {r}\n"));
            }
        }
        if let Some(p) = report.postcondition.as_ref().filter(|p| !p.passed()) {
            wrong += 1;
            for m in &p.mismatches {
                detail.push_str(&format!("rank {} out[{}]: expected {} got {}\n", m.rank, m.index, m.expected, m.actual));
            }
        }
        if !report.errors.is_empty() {
            errors += 1;
            for e in &report.errors {
                detail.push_str(&format!("error: {e}\n"));
            }
        }
        first_failure.get_or_insert(detail);
    }

    let slot_report = check_slots(&ir, slots);
    for v in &slot_report.violations {
        eprintln!(
            "slots: rank {} tb {} may block at step {} sending to rank {} tb {} on channel {}",
            v.sender.0, v.sender.1, v.send_step, v.receiver.0, v.receiver.1, v.channel
        );
    }

    let passed = structural.is_ok() && first_failure.is_none() && slot_report.is_ok();
    let report = json!({
        "program": name,
        "ranks": ir.ranks(),
        "seeds": seeds,
        "slots": slots,
        "passed": passed,
        "structural_violations": structural.violations.len(),
        "deadlocks": deadlocks,
        "races": races,
        "postcondition_failures": wrong,
        "execution_errors": errors,
        "slot_violations": slot_report.violations.len(),
        "cyclic_without_slots": slot_report.cyclic_without_slots,
    });
    emit(None, &format!("{report}\n"))?;
    if let Some(detail) = &first_failure {
        eprint!("{detail}");
    }

    if deadlocks > 0 || slot_report.cyclic_without_slots {
        Err(CliError::Deadlock(format!("{name} deadlocks")))
    } else if !passed {
        Err(CliError::Verification(format!("{name} failed verification")))
    } else {
        eprintln!("{name}: {seeds} interleavings passed");
        Ok(())
    }
}

fn ir_name(path: &Path) -> String {
    path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

fn run_simulate(
    ir_path: &Path,
    topo_path: &Path,
    sizes: &[u64],
    tile: Option<u64>,
    output: Option<&Path>,
    timeline: Option<&Path>,
) -> CliResult<()> {
    let ir = load_ir(ir_path)?;
    let topo = load_topology(topo_path)?;
    if topo.ranks() != ir.ranks() {
        return Err(CliError::Compile(format!(
            "{} has {} ranks but {} describes {}",
            ir_path.display(),
            ir.ranks(),
            topo_path.display(),
            topo.ranks()
        )));
    }
    let Some(&first) = sizes.first() else {
        return Err(CliError::Compile("--sizes is empty".into()));
    };
    let cfg = SimConfig { slots: Some(topo.slots), tile_bytes: tile.map(|t| t as f64), ..SimConfig::default() };
    let chunks = ir.nchunks.input.max(1) as f64;
    let probe = run_timed(&ir, &topo, &SimConfig { chunk_bytes: first as f64 / chunks, ..cfg.clone() });
    if let Some(d) = &probe.deadlock {
        eprint!("{d}");
        return Err(CliError::Deadlock(format!("{} deadlocks in the timed simulator", ir_path.display())));
    }
    if let Some(path) = timeline {
        write_atomic(path, &probe.timeline.to_json())?;
    }
    let rows = sweep(&ir, &topo, sizes, &cfg);
    emit(output, &sweep_csv(&rows))
}

fn run_dot(stage: Stage, input: &str, algo: &AlgoArgs, build: &BuildArgs, output: Option<&Path>) -> CliResult<()> {
    let dot = if ALGORITHMS.contains(&input) {
        let (compiled, _) = build_program(input, algo, build)?;
        match stage {
            Stage::Chunk => compiled.dag.to_dot(),
            Stage::Instr => compiled.instrs.to_dot(),
            Stage::Ir => compiled.ir.to_dot(),
        }
    } else if stage == Stage::Ir {
        load_ir(Path::new(input))?.to_dot()
    } else {
        return Err(CliError::Compile(format!(
            "unknown algorithm {input:?}; chunk and instr graphs need one of: {}",
            ALGORITHMS.join(", ")
        )));
    };
    emit(output, &dot)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Compile { algorithm, algo, build, output } => run_compile(&algorithm, &algo, &build, output.as_deref()),
        Command::Verify { input, algo, build, seeds } => run_verify(&input, &algo, &build, seeds),
        Command::Simulate { ir, topo, sizes, tile, output, timeline } => {
            run_simulate(&ir, &topo, &sizes, tile, output.as_deref(), timeline.as_deref())
        }
        Command::Dot { stage, input, algo, build, output } => run_dot(stage, &input, &algo, &build, output.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CCLFORGE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_sizes_use_binary_suffixes() {
        assert_eq!(parse_bytes("1K"), Ok(1024));
        assert_eq!(parse_bytes("4m"), Ok(4 << 20));
        assert_eq!(parse_bytes("1GB"), Ok(1 << 30));
        assert_eq!(parse_bytes("512"), Ok(512));
        assert!(parse_bytes("0").is_err());
        assert!(parse_bytes("twelve").is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let io = CliError::Io { path: "x".into(), source: io::Error::from(io::ErrorKind::NotFound) };
        assert_eq!(io.code(), 1);
        assert_eq!(CliError::Compile(String::new()).code(), 2);
        assert_eq!(CliError::Verification(String::new()).code(), 3);
        assert_eq!(CliError::Deadlock(String::new()).code(), 4);
    }
}
