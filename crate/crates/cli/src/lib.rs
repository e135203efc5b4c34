//! The `mpu` command-line driver.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use mpu_core::asm::{assemble_source, disassemble, Program};
use mpu_core::dataset::Dataset;
use mpu_core::exec::learn::{learn_from_trace, LearnParams};
use mpu_core::exec::{report, ExecError, MpuState, Offline};
use mpu_core::hash::seal;
use mpu_core::isa::OpcodeTable;
use mpu_core::symptom::MatchError;
use mpu_imn::{run_events, Scenario, SimError, Topology};

/// Exit status for a failed command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    /// Malformed input content; one diagnostic per line.
    Content(Vec<String>),
    /// Bad usage, unreadable files, mismatched schemas.
    Usage(String),
    /// A step or tick budget ran out.
    Limit(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Content(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Limit(_) => 3,
        }
    }

    fn lines(&self) -> Vec<String> {
        match self {
            Failure::Content(v) => v.clone(),
            Failure::Usage(m) | Failure::Limit(m) => vec![m.clone()],
        }
    }
}

type Outcome = Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "mpu", about = "Medical processor unit toolchain", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Assemble a `.mpa` source into a `.mpo` object file.
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print the source form of a `.mpo` object file.
    Disasm {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run one program on a standalone MPU and print its report.
    Run {
        program: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        max_steps: usize,
        /// Close switch S-1 and mine the trace for proposals.
        #[arg(long)]
        learn: bool,
        /// Write the execution trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a network scenario and print its transcript.
    Simnet {
        topology: PathBuf,
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        max_ticks: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Write per-run reports and proposal outcomes here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Nearest signatures to a query vector.
    Match {
        dataset: PathBuf,
        /// Comma-separated hex codes, one per dimension.
        #[arg(long)]
        query: String,
        #[arg(short, default_value_t = 5)]
        k: usize,
    },
    /// Print the opcode table.
    Isa {
        #[arg(long)]
        card: bool,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let mut text = String::new();
    let result = dispatch(cli.command, &mut text);
    let _ = out.write_all(text.as_bytes());
    match result {
        Ok(()) => 0,
        Err(f) => {
            for line in f.lines() {
                let _ = writeln!(err, "mpu: {line}");
            }
            f.code()
        }
    }
}

fn dispatch(cmd: Cmd, out: &mut String) -> Outcome {
    match cmd {
        Cmd::Asm { input, output } => cmd_asm(&input, output.as_deref()),
        Cmd::Disasm { input, output } => cmd_disasm(&input, output.as_deref(), out),
        Cmd::Run {
            program,
            dataset,
            rules,
            max_steps,
            learn,
            trace,
        } => cmd_run(&program, dataset.as_deref(), rules.as_deref(), max_steps, learn, trace.as_deref(), out),
        Cmd::Simnet {
            topology,
            scenario,
            seed,
            max_ticks,
            output,
            report,
        } => cmd_simnet(&topology, &scenario, seed, max_ticks, output.as_deref(), report.as_deref(), out),
        Cmd::Match { dataset, query, k } => cmd_match(&dataset, &query, k, out),
        Cmd::Isa { card: _ } => {
            out.push_str(&OpcodeTable::standard().card());
            Ok(())
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    std::fs::write(path, bytes).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Assembles source text, or lists every diagnostic.
pub fn assemble_text(text: &str) -> Result<Program, Vec<String>> {
    assemble_source(text, OpcodeTable::standard()).map_err(|errs| errs.iter().map(ToString::to_string).collect())
}

/// Loads an `.mpo` object (by its magic) or assembles `.mpa` source.
pub fn load_program(bytes: &[u8]) -> Result<Program, Vec<String>> {
    if bytes.starts_with(b"MPU1") {
        return Program::from_mpo(bytes).map_err(|e| vec![e.to_string()]);
    }
    let text = std::str::from_utf8(bytes).map_err(|_| vec!["source is not UTF-8".to_string()])?;
    assemble_text(text)
}

fn cmd_asm(input: &Path, output: Option<&Path>) -> Outcome {
    let text = read_text(input)?;
    let program = assemble_text(&text)
        .map_err(|lines| Failure::Content(lines.into_iter().map(|l| format!("{}: {l}", input.display())).collect()))?;
    let output = output.map(Path::to_path_buf).unwrap_or_else(|| input.with_extension("mpo"));
    write_file(&output, &program.to_mpo())
}

fn cmd_disasm(input: &Path, output: Option<&Path>, out: &mut String) -> Outcome {
    let bytes = read_bytes(input)?;
    let program = Program::from_mpo(&bytes).map_err(|e| Failure::Content(vec![format!("{}: {e}", input.display())]))?;
    let text = disassemble(&program, OpcodeTable::standard()).map_err(|e| Failure::Content(vec![e.to_string()]))?;
    match output {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            out.push_str(&text);
            Ok(())
        }
    }
}

fn load_dataset(path: &Path, into: &mut Dataset) -> Outcome {
    let text = read_text(path)?;
    into.load(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn cmd_run(
    program: &Path,
    dataset: Option<&Path>,
    rules: Option<&Path>,
    max_steps: usize,
    learn: bool,
    trace: Option<&Path>,
    out: &mut String,
) -> Outcome {
    let bytes = read_bytes(program)?;
    let program = load_program(&bytes).map_err(|l| Failure::Usage(format!("{}: {}", program.display(), l.join("; "))))?;
    let mut ds = Dataset::new();
    for p in [dataset, rules].into_iter().flatten() {
        load_dataset(p, &mut ds)?;
    }
    let mut state = MpuState::new(program, ds, learn);
    let ran = state.run(max_steps, &mut Offline);
    if let Some(p) = trace {
        write_file(p, state.trace.render().as_bytes())?;
    }
    if let Err(ExecError::StepLimitExceeded(n)) = ran {
        return Err(Failure::Limit(format!("step limit of {n} reached before HALT")));
    }
    let learned = learn.then(|| learn_from_trace(&state.trace, LearnParams::default()));
    out.push_str(&report::render(&state, learned.as_ref()));
    Ok(())
}

/// Parses a topology file; dataset paths are relative to its directory.
pub fn load_topology(path: &Path) -> Result<Topology, Failure> {
    let text = read_text(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Topology::parse(&text, &mut |name: &str| std::fs::read_to_string(base.join(name)).map_err(|e| e.to_string()))
        .map_err(|e| Failure::Content(vec![format!("{}: {e}", path.display())]))
}

/// Parses a scenario file; program paths are relative to its directory.
pub fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    let text = read_text(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Scenario::parse(&text, &mut |name: &str| {
        let bytes = std::fs::read(base.join(name)).map_err(|e| e.to_string())?;
        load_program(&bytes).map_err(|l| l.join("; "))
    })
    .map_err(|e| Failure::Content(vec![format!("{}: {e}", path.display())]))
}

/// Per-run reports, proposal outcomes and packet counts for a finished
/// simulation.
pub fn simnet_report(o: &mpu_imn::Outcome) -> String {
    let mut text = String::new();
    for (i, r) in o.runs.iter().enumerate() {
        let _ = writeln!(text, "run {i} {} started={} finished={}", r.node, r.started, r.finished.map_or("-".into(), |t| t.to_string()));
        let learned = r.learn.then(|| learn_from_trace(&r.state.trace, LearnParams::default()));
        text.push_str(&report::render(&r.state, learned.as_ref()));
    }
    for p in &o.proposals {
        let _ = writeln!(
            text,
            "consensus {} proposal={} {} {} endorsements={} bank={} applied={}",
            p.node,
            p.proposal.id,
            p.proposal.kind,
            p.proposal.status().name(),
            p.proposal.endorsements().len(),
            p.bank.map_or("-".into(), |b| b.to_string()),
            p.applied
        );
    }
    for (id, b) in &o.banks {
        let _ = writeln!(text, "bank {id} version={} hash={:016x}", b.version, b.hash());
    }
    let s = o.stats;
    let _ = writeln!(
        text,
        "packets sent={} delivered={} dropped_link={} dropped_firewall={} final_tick={}",
        s.sent, s.delivered, s.dropped_link, s.dropped_firewall, o.final_tick
    );
    seal(&mut text, "SIMHASH");
    text
}

fn cmd_simnet(
    topology: &Path,
    scenario: &Path,
    seed: u64,
    max_ticks: u64,
    output: Option<&Path>,
    report: Option<&Path>,
    out: &mut String,
) -> Outcome {
    let topo = load_topology(topology)?;
    let script = load_scenario(scenario)?;
    let o = run_events(&topo, &script, seed, max_ticks).map_err(|e| match e {
        SimError::MaxTicksExceeded(_) => Failure::Limit(e.to_string()),
    })?;
    let text = o.transcript.render();
    match output {
        Some(p) => write_file(p, text.as_bytes())?,
        None => out.push_str(&text),
    }
    if let Some(p) = report {
        write_file(p, simnet_report(&o).as_bytes())?;
    }
    Ok(())
}

fn parse_code(tok: &str) -> Option<u64> {
    let t = tok.trim();
    let t = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")).unwrap_or(t);
    u64::from_str_radix(t, 16).ok()
}

fn cmd_match(dataset: &Path, query: &str, k: usize, out: &mut String) -> Outcome {
    let mut ds = Dataset::new();
    let text = read_text(dataset)?;
    ds.load(&text).map_err(|e| Failure::Content(vec![format!("{}: {e}", dataset.display())]))?;
    let bank = ds.bank.as_ref().ok_or_else(|| Failure::Content(vec![format!("{}: no SCHEMA record", dataset.display())]))?;
    let codes = query
        .split(',')
        .map(|t| parse_code(t).ok_or_else(|| Failure::Usage(format!("bad query code `{t}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    let mismatch = |e: MatchError| Failure::Usage(e.to_string());
    let q = bank.schema().vector(codes).map_err(mismatch)?;
    let hits = bank.nearest_k(&q, k).map_err(mismatch)?;
    for (id, d) in hits {
        let label = bank.get(id).map_or("", |s| s.label.as_str());
        let _ = writeln!(out, "{id} {d} {label}");
    }
    seal(out, "MATCHHASH");
    Ok(())
}
