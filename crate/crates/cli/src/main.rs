use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amg_core::corpus::build_corpus;
use amg_core::experiment::{self, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_MEMORIZED: u8 = 4;

/// Anti-memorization guidance experiments on toy diffusion models.
#[derive(Parser)]
#[command(name = "amg", version)]
struct Cli {
    /// Print per-variant detail.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the training corpus and write it as CSV.
    Corpus {
        #[command(flatten)]
        common: Common,
        /// Destination; `<output_dir>/corpus.csv` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every variant and write samples, reports, traces and a manifest.
    Sample {
        #[command(flatten)]
        common: Common,
    },
    /// Recompute reports from the saved samples of a previous run.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate reports from one or more run manifests.
    Compare {
        manifests: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a single trajectory per variant and print its per-step trace.
    Trace {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<amg_core::Error> for Failure {
    fn from(e: amg_core::Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load(c: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&c.config).map_err(|e| match e {
        amg_core::Error::Io { .. } => Failure::Config(e.to_string()),
        e => e.into(),
    })?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.output_dir {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn write(path: &Path, s: &str) -> Result<(), Failure> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
    }
    std::fs::write(path, s).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.cmd {
        Cmd::Corpus { common, out } => {
            let cfg = load(&common)?;
            let corpus = build_corpus(&cfg.corpus)?;
            let path = out.unwrap_or_else(|| cfg.output_dir.join("corpus.csv"));
            write(&path, &corpus.to_csv_string())?;
            println!(
                "corpus: {} points ({} with multiplicity), d={} -> {}",
                corpus.len(),
                corpus.expanded_size(),
                corpus.dim(),
                path.display()
            );
            Ok(0)
        }
        Cmd::Sample { common } => {
            let cfg = load(&common)?;
            let m = experiment::run_experiment_config(&cfg)?;
            let resolved = cfg.resolved_variants()?;
            for (v, r) in m.variants.iter().zip(&resolved) {
                print!(
                    "{:<20} top5%={:.4} top1={:.4} over({})={:.2}%",
                    v.name,
                    v.top5pct,
                    v.top1,
                    v.gate_threshold,
                    100.0 * v.memorized_fraction
                );
                if v.failed > 0 {
                    print!(" failed={}", v.failed);
                }
                println!();
                if cli.verbose {
                    println!("  {}", experiment::describe(r));
                }
            }
            println!("manifest: {} ({:.1}s)", cfg.output_dir.join("manifest.json").display(), m.wall_clock_secs);
            let hits = m.memorization_detected();
            if !hits.is_empty() {
                for v in hits {
                    eprintln!("memorization detected in gated variant {}", v.name);
                }
                return Ok(EXIT_MEMORIZED);
            }
            if m.partial {
                eprintln!("some trajectories failed; reports cover the rest");
                return Ok(EXIT_RUNTIME);
            }
            Ok(0)
        }
        Cmd::Report { common } => {
            let cfg = load(&common)?;
            for (name, mem, util) in experiment::recompute_reports(&cfg)? {
                println!("{name:<20} top5%={:.4} top1={:.4} mmd={:.5}", mem.top5pct, mem.top1, util.mmd);
                if cli.verbose {
                    for p in &mem.pct_over {
                        println!("  over({}) = {:.2}%", p.threshold, 100.0 * p.fraction);
                    }
                }
            }
            Ok(0)
        }
        Cmd::Compare { manifests, csv } => {
            if manifests.is_empty() {
                return Err(Failure::Config("compare needs at least one manifest".into()));
            }
            let cmp = experiment::compare_runs(&manifests)?;
            print!("{}", cmp.to_text());
            if let Some(p) = csv {
                write(&p, &cmp.to_csv())?;
            }
            Ok(0)
        }
        Cmd::Trace { common } => {
            let cfg = load(&common)?;
            for (name, tr, path) in experiment::trace_one(&cfg)? {
                println!("{name}: {} -> {}", tr.final_verdict.map(|v| format!("sigma={:.4}", v.sigma)).unwrap_or("failed".into()), path.display());
                if cli.verbose {
                    for r in &tr.records {
                        println!(
                            "  t={:>3} sigma={:>8} lambda={:>8.4} active={}",
                            r.t,
                            r.sigma.map(|s| format!("{s:.4}")).unwrap_or("-".into()),
                            r.lambda,
                            r.activated as u8
                        );
                    }
                }
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
