//! `replay`: trace generation, compression statistics, trace-unit simulation
//! and noninterference checks over μAsm programs.
//!
//! Exit status is 0 on success, 1 when a verdict fails and 2 on errors.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use replay_core::btusim::{simulate, Mode, PipelineConfig};
use replay_core::bundle::{decode_bundle, encode_bundle, TraceBundle};
use replay_core::corpus;
use replay_core::hwsem::{check_hni, secret_states, HniVerdict, HwParams, Variant};
use replay_core::par::Exec;
use replay_core::predictor::PredictorKind;
use replay_core::tracegen::{generate_from_logs, generate_traces, BranchLog, ClassKind, TraceGenOptions};
use replay_core::uasm::{ct_check, parse, run_seq, ArchState, CtVerdict, InputSpec, Program, DEFAULT_STEP_BUDGET};

use report::{kind_name, rows_from_analysis, rows_from_bundle, rows_from_traces, NiReport, Report, SimReport};

#[derive(Parser)]
#[command(name = "replay", version, about = "Branch-trace compression and replay for constant-time code")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Where a program comes from: a `.uasm` file, or a corpus name.
#[derive(clap::Args)]
struct ProgramArg {
    /// Path to a μAsm file, or the name of a bundled program (see `replay list`).
    program: String,
}

#[derive(clap::Args)]
struct Common {
    /// Step budget for every sequential run.
    #[arg(long, default_value_t = DEFAULT_STEP_BUDGET)]
    budget: u64,
    /// Run without the thread pool.
    #[arg(long)]
    sequential: bool,
    /// Write the machine-readable report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Cassandra,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    TwoBit,
    AlwaysTaken,
    NotTaken,
}

impl From<PredictorArg> for PredictorKind {
    fn from(p: PredictorArg) -> Self {
        match p {
            PredictorArg::TwoBit => PredictorKind::TwoBit,
            PredictorArg::AlwaysTaken => PredictorKind::AlwaysTaken,
            PredictorArg::NotTaken => PredictorKind::NotTaken,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a trace bundle from two runs of a program.
    TraceGen {
        #[command(flatten)]
        prog: ProgramArg,
        /// Output bundle file.
        #[arg(short, long)]
        out: PathBuf,
        /// First input name (default: the first declared input).
        #[arg(long)]
        input1: Option<String>,
        /// Second input name (default: the last declared input).
        #[arg(long)]
        input2: Option<String>,
        /// Use these two branch logs instead of running the program.
        #[arg(long, num_args = 2, value_names = ["LOG1", "LOG2"])]
        logs: Option<Vec<PathBuf>>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-branch compression table with average and maximum rows.
    Stats {
        /// A program to run trace generation on.
        program: Option<String>,
        /// Read a bundle file instead.
        #[arg(long, conflicts_with_all = ["program", "log"])]
        bundle: Option<PathBuf>,
        /// Read a branch log instead and compress every branch in it.
        #[arg(long, conflicts_with = "program")]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Cycle-level simulation of the trace unit or the predictor baseline.
    Simulate {
        #[command(flatten)]
        prog: ProgramArg,
        /// Bundle file (default: generated from the program's inputs).
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Pipeline configuration in TOML.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cassandra")]
        mode: ModeArg,
        /// Input name (default: the first declared input).
        #[arg(long)]
        input: Option<String>,
        /// Seed for squash injection; overrides the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Bounded hardware noninterference check over the secret domain.
    CheckNi {
        #[command(flatten)]
        prog: ProgramArg,
        #[arg(long, value_enum, default_value = "cassandra")]
        variant: ModeArg,
        #[arg(long, value_enum, default_value = "two-bit")]
        predictor: PredictorArg,
        /// Include the scheduler in the attacker's view.
        #[arg(long)]
        observe_scheduler: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Sequential run: contract trace and final registers; `--ct` checks the contract.
    RunSeq {
        #[command(flatten)]
        prog: ProgramArg,
        #[arg(long)]
        input: Option<String>,
        /// Check constant-time behaviour over the secret domain.
        #[arg(long)]
        ct: bool,
        #[command(flatten)]
        common: Common,
    },
    /// List the bundled programs.
    List,
}

fn load_program(arg: &str) -> Result<Program> {
    let path = Path::new(arg);
    if path.exists() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {arg}"))?;
        return parse(&text).with_context(|| format!("parsing {arg}"));
    }
    match corpus::get(arg) {
        Some(e) => Ok(e.program()),
        None => bail!("{arg}: no such file or bundled program"),
    }
}

fn pick_input(p: &Program, name: Option<&str>, last: bool) -> Result<InputSpec> {
    let ins = corpus::inputs(p);
    match name {
        Some(n) => p.input(n).cloned().with_context(|| format!("program {} has no input `{n}`", p.name)),
        None if last => Ok(ins[ins.len() - 1].clone()),
        None => Ok(ins[0].clone()),
    }
}

fn exec(c: &Common) -> Exec {
    if c.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn emit(report: &Report, c: &Common) -> Result<()> {
    print!("{}", report.to_text());
    if let Some(path) = &c.json {
        let json = serde_json::to_string_pretty(report)?;
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn read_log(path: &Path) -> Result<BranchLog> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    BranchLog::parse_text(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_bundle(path: &Path) -> Result<TraceBundle> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_bundle(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Runs a command; `Ok(false)` is a failed verdict.
fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::TraceGen { prog, out, input1, input2, logs, common } => {
            let p = load_program(&prog.program)?;
            let opts = TraceGenOptions { budget: common.budget, exec: exec(&common), ..Default::default() };
            let (gen, source) = match logs {
                Some(l) => (generate_from_logs(&p, &read_log(&l[0])?, &read_log(&l[1])?, &opts)?, "logs".to_string()),
                None => {
                    let a = pick_input(&p, input1.as_deref(), false)?;
                    let b = pick_input(&p, input2.as_deref(), true)?;
                    (generate_traces(&p, &a, &b, &opts)?, format!("{} {}", a.name, b.name))
                }
            };
            let bytes = encode_bundle(&gen.bundle)?;
            std::fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            let report = Report::new("trace-gen", &format!("{} ({source})", p.name))
                .with_branches(rows_from_analysis(&gen.branches));
            emit(&report, &common)?;
            let count = |k| gen.branches.iter().filter(|b| b.kind == k).count();
            println!("program_hash={:#018x}", gen.bundle.program_hash);
            println!("crypto_range={:#x}..{:#x}", gen.bundle.crypto_range.0, gen.bundle.crypto_range.1);
            for k in [ClassKind::SingleTarget, ClassKind::ShortTrace, ClassKind::MultiTarget, ClassKind::StreamLoop] {
                println!("{}={}", kind_name(k).replace('-', "_"), count(k));
            }
            for b in gen.branches.iter().filter(|b| b.kind == ClassKind::StreamLoop) {
                println!("excluded pc={:#x} reason=stream-loop", b.branch_pc);
            }
            println!("bundle_bytes={}", bytes.len());
            Ok(true)
        }
        Cmd::Stats { program, bundle, log, common } => {
            let report = if let Some(path) = bundle {
                Report::new("stats", &path.display().to_string()).with_branches(rows_from_bundle(&read_bundle(&path)?)?)
            } else if let Some(path) = log {
                let traces = read_log(&path)?.raw_traces(|_| true);
                Report::new("stats", &path.display().to_string()).with_branches(rows_from_traces(traces.values())?)
            } else if let Some(name) = program {
                let p = load_program(&name)?;
                let opts = TraceGenOptions { budget: common.budget, exec: exec(&common), ..Default::default() };
                let (a, b) = (pick_input(&p, None, false)?, pick_input(&p, None, true)?);
                let gen = generate_traces(&p, &a, &b, &opts)?;
                Report::new("stats", &p.name).with_branches(rows_from_analysis(&gen.branches))
            } else {
                bail!("stats needs a program, --bundle or --log");
            };
            emit(&report, &common)?;
            Ok(true)
        }
        Cmd::Simulate { prog, bundle, config, mode, input, seed, common } => {
            let p = load_program(&prog.program)?;
            let mut cfg = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    toml::from_str::<PipelineConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => PipelineConfig::default(),
            };
            cfg.step_budget = common.budget;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let bundle = match &bundle {
                Some(path) => read_bundle(path)?,
                None => corpus::bundle(&p)?,
            };
            let inp = pick_input(&p, input.as_deref(), false)?;
            let s0 = ArchState::from_input(&p, &inp);
            let mode = match mode {
                ModeArg::Cassandra => Mode::Cassandra,
                ModeArg::Baseline => Mode::Baseline,
            };
            let r = simulate(&p, &s0, &bundle, &cfg, mode)?;
            let oracle = run_seq(&p, &s0, common.budget)?.pc_stream();
            let ok = r.committed == oracle;
            let mut report = Report::new("simulate", &p.name);
            report.sim = Some(SimReport {
                mode: format!("{mode:?}").to_lowercase(),
                input: inp.name,
                committed_matches_sequential: ok,
                stats: r.stats,
            });
            emit(&report, &common)?;
            Ok(ok)
        }
        Cmd::CheckNi { prog, variant, predictor, observe_scheduler, common } => {
            let p = load_program(&prog.program)?;
            let params = HwParams {
                predictor: predictor.into(),
                budget: common.budget,
                observe_scheduler,
                ..Default::default()
            };
            let variant = match variant {
                ModeArg::Cassandra => Variant::Cassandra,
                ModeArg::Baseline => Variant::Baseline,
            };
            let states = secret_states(&p, &p.inputs);
            let verdict = check_hni(&p, &states, variant, &params, exec(&common))?;
            let ni = match &verdict {
                HniVerdict::Pass { states, classes, pairs } => NiReport {
                    variant: format!("{variant:?}").to_lowercase(),
                    states: *states,
                    pass: true,
                    classes: Some(*classes),
                    pairs: Some(*pairs),
                    counterexample: None,
                },
                HniVerdict::Fail(c) => NiReport {
                    variant: format!("{variant:?}").to_lowercase(),
                    states: states.len(),
                    pass: false,
                    classes: None,
                    pairs: None,
                    counterexample: Some(c.render()),
                },
            };
            let pass = ni.pass;
            let mut report = Report::new("check-ni", &p.name);
            report.ni = Some(ni);
            emit(&report, &common)?;
            Ok(pass)
        }
        Cmd::RunSeq { prog, input, ct, common } => {
            let p = load_program(&prog.program)?;
            let inp = pick_input(&p, input.as_deref(), false)?;
            let run = run_seq(&p, &ArchState::from_input(&p, &inp), common.budget)?;
            println!("program={}\ninput={}\nsteps={}", p.name, inp.name, run.steps.len());
            for o in run.contract_trace() {
                println!("obs {o}");
            }
            for (name, v) in p.regs.iter().zip(&run.final_state.regs).skip(1) {
                println!("reg {name}={v}");
            }
            if !ct {
                return Ok(true);
            }
            match ct_check(&p, &p.inputs, common.budget, exec(&common))? {
                CtVerdict::Pass { runs } => {
                    println!("ct=pass runs={runs}");
                    Ok(true)
                }
                CtVerdict::Fail(v) => {
                    println!("ct=fail\n# {v:?}");
                    Ok(false)
                }
            }
        }
        Cmd::List => {
            for e in corpus::CORPUS {
                println!("{} constant_time={} crypto_only={}", e.name, e.constant_time, e.crypto_only);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
