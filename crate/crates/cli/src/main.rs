use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use rowpress_core::config::{load_config, ConfigError, Resolved, RunConfig};
use rowpress_core::experiments::{self, HarnessError, RunOutput};
use rowpress_core::par::{self, Execution};
use rowpress_core::patterns::{gen_hammer_trace, gen_onoff_trace, gen_trr_bypass, OnoffTraceSpec};
use rowpress_core::plotdata::emit_plotdata;
use rowpress_core::results::{append_results, read_results};
use rowpress_core::trace::write_trace;

const WORKERS_ENV: &str = "ROWPRESS_WORKERS";

#[derive(Parser)]
#[command(name = "rowpress", version, about = "DRAM read-disturbance simulator and characterization harness")]
struct Cli {
    /// Output directory for results.jsonl, summary.json and plot data.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override a configuration key, e.g. `--set timing.t_refi=3900`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads (default: $ROWPRESS_WORKERS, else all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a request trace through the controller.
    Simulate { config: PathBuf, trace: PathBuf },
    /// AC_min, tAggON_min, BER, overlap and ECC experiments.
    Characterize { config: PathBuf },
    /// TRR-bypass attack traces against the configured defenses.
    Attack { config: PathBuf },
    /// Fan a parameter grid across workers.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Write a generated request trace.
    GenTrace {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "trr-bypass")]
        kind: TraceKind,
        /// Destination file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Rebuild the plot-data tables from a results file.
    Plotdata { results: PathBuf },
    /// Print the fully resolved configuration.
    ShowConfig { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceKind {
    TrrBypass,
    Onoff,
    Hammer,
}

fn workers(cli: &Cli) -> Result<Option<usize>, ConfigError> {
    if let Some(n) = cli.workers {
        return Ok(Some(n));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| ConfigError::Invalid {
            key: WORKERS_ENV.into(),
            msg: format!("`{v}` is not a worker count"),
        }),
        Err(_) => Ok(None),
    }
}

fn resolve(path: &Path, sets: &[String]) -> Result<Resolved, ConfigError> {
    load_config(path, sets)?.resolve()
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn write_outputs(out: &Path, run: &RunOutput, plot: bool) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let results = out.join("results.jsonl");
    append_results(&results, &run.records)?;
    let summary = serde_json::to_string_pretty(&run.summary)? + "\n";
    fs::write(out.join("summary.json"), &summary)?;
    if plot {
        emit_plotdata(&run.records, &out.join("plotdata"))?;
    }
    let digest = sha256_hex(&fs::read(&results)?);
    println!("{} records -> {}", run.records.len(), results.display());
    println!("results sha256 {digest}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let n = workers(cli)?;
    match &cli.cmd {
        Cmd::Simulate { config, trace } => {
            let r = resolve(config, &cli.sets)?;
            let text = fs::read_to_string(trace).with_context(|| format!("reading {}", trace.display()))?;
            let run = experiments::run_simulate(&r, &trace.display().to_string(), &text)?;
            write_outputs(&cli.out, &run, r.config.output.plotdata)
        }
        Cmd::Characterize { config } => {
            let r = resolve(config, &cli.sets)?;
            let run = par::with_workers(n, || experiments::run_characterize(&r, exec))?;
            write_outputs(&cli.out, &run, r.config.output.plotdata)
        }
        Cmd::Attack { config } => {
            let r = resolve(config, &cli.sets)?;
            let run = par::with_workers(n, || experiments::run_attack(&r, exec))?;
            for rec in &run.records {
                if let rowpress_core::results::Record::Attack { warnings, .. } = &rec.record {
                    for w in warnings {
                        eprintln!("warning: {w}");
                    }
                }
            }
            write_outputs(&cli.out, &run, r.config.output.plotdata)
        }
        Cmd::Sweep { config, grid } => {
            let base = fs::read_to_string(config).map_err(|e| ConfigError::Io {
                path: config.display().to_string(),
                msg: e.to_string(),
            })?;
            let grid_text = fs::read_to_string(grid).map_err(|e| ConfigError::Io {
                path: grid.display().to_string(),
                msg: e.to_string(),
            })?;
            let w = if cli.sequential {
                1
            } else {
                n.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            };
            fs::create_dir_all(&cli.out)?;
            let (run, merged) = experiments::run_sweep(&base, &cli.sets, &grid_text, w, &cli.out)?;
            println!("sweep table -> {}", merged.display());
            write_outputs(&cli.out, &run, false)
        }
        Cmd::GenTrace { config, kind, output } => {
            let r = resolve(config, &cli.sets)?;
            let t = &r.setup.timing;
            let spec = &r.config.attack.pattern;
            let g = match kind {
                TraceKind::TrrBypass => gen_trr_bypass(spec, t, r.setup.geometry.rows)?,
                TraceKind::Onoff => {
                    let (a1, a2) = spec.aggressors();
                    gen_onoff_trace(
                        &OnoffTraceSpec {
                            bank: spec.bank,
                            aggressors: vec![a1, a2],
                            closer_row: spec.victim + spec.dummy_distance,
                            reads: spec.num_reads,
                            read_spacing: spec.read_spacing(t),
                            off_ns: t.t_rp,
                            visits: spec.num_aggr_acts as u64 * spec.iterations as u64,
                            start: 0,
                        },
                        t,
                    )
                }
                TraceKind::Hammer => {
                    let (a1, a2) = spec.aggressors();
                    gen_hammer_trace(spec.bank, &[a1, a2], spec.num_aggr_acts as u64 * spec.iterations as u64, t.t_rc, 0)
                }
            };
            for w in &g.warnings {
                eprintln!("warning: {w}");
            }
            let text = write_trace(&g.requests, &r.address_map);
            match output {
                Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Cmd::Plotdata { results } => {
            let recs = read_results(results)?;
            let files = emit_plotdata(&recs, &cli.out)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Cmd::ShowConfig { config } => {
            let cfg: RunConfig = load_config(config, &cli.sets)?;
            let r = cfg.resolve()?;
            print!("{}", cfg.to_toml_string()?);
            if let Some(rp) = &r.rp {
                println!(
                    "# resolved: t_mro = {} ns, T'_RH = {}, graphene_T = {}, para_p = {}",
                    rp.t_mro, rp.t_rh_reduced, r.setup.mitigation.graphene_t, r.setup.mitigation.para_p
                );
            }
            Ok(())
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            if h.is_hard_fault() {
                return 3;
            }
            if matches!(h, HarnessError::Config(_)) {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
