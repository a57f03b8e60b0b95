use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use targeted_fx::config::{validate_config_with, validate_evaluate, LoadedSource, Overrides};
use targeted_fx::relatedness::{compute_grm, Genotypes, PlateauRule};
use targeted_fx::runner::{run_estimation, run_evaluate, run_svp, SVP_FILE};
use targeted_fx::simulation::{ancestral_sample, null_sample, GenerativeSpec, RecordStatus};
use targeted_fx::Error;

const EXIT_PARTIAL: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(
    name = "targeted-fx",
    version,
    about = "Double-robust treatment and interaction effects"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a run configuration and print the normalized form.
    Validate { config: PathBuf },
    /// Estimate every configured estimand and write results to the output directory.
    Estimate {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Relatedness-corrected variances for records from a previous `estimate`.
    Svp {
        config: PathBuf,
        #[arg(long)]
        taus: Option<usize>,
        #[arg(long, value_enum)]
        rule: Option<RuleArg>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Genomic relationship matrix from a genotype CSV (values 0, 1, 2 or NA).
    Grm {
        genotypes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        block: usize,
    },
    #[command(subcommand)]
    Simulate(Simulate),
    /// Replicate grid: coverage, power and error metrics per estimator.
    Evaluate {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Simulate {
    /// Resample the configured dataset with every column drawn independently.
    Null {
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw from a generative spec file.
    Spec {
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Max,
    Plateau,
}

fn thread_pool() -> Result<(), String> {
    let Ok(v) = std::env::var("TARGETED_FX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| format!("TARGETED_FX_THREADS: expected a positive integer, got `{v}`"))?;
    if n == 0 {
        return Err("TARGETED_FX_THREADS: must be positive".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::FAILURE,
    }
}

fn run(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Validate { config } => {
            let cfg = validate_config_with(&config, &Overrides::default())?;
            println!("{}", serde_json::to_string_pretty(&cfg.config)?);
            for e in &cfg.estimands {
                println!("{}\t{}", e.name, e.estimand.describe());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Estimate {
            config,
            seed,
            threshold,
            output,
        } => {
            let cfg = validate_config_with(
                &config,
                &Overrides {
                    seed,
                    threshold,
                    output,
                },
            )?;
            let out = run_estimation(&cfg)?;
            let m = &out.manifest;
            eprintln!(
                "{} records: {} ok, {} filtered, {} failed -> {}",
                m.records,
                m.ok,
                m.filtered,
                m.failed,
                cfg.config.output.display()
            );
            Ok(if out.is_clean() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_PARTIAL)
            })
        }
        Command::Svp {
            config,
            taus,
            rule,
            output,
        } => {
            let mut cfg = validate_config_with(
                &config,
                &Overrides {
                    output,
                    ..Overrides::default()
                },
            )?;
            let svp = cfg
                .config
                .svp
                .as_mut()
                .ok_or_else(|| Error::Config(vec!["svp: section missing".into()]))?;
            if let Some(t) = taus {
                if t == 0 {
                    return Err(Error::Config(vec!["--taus: must be positive".into()]));
                }
                svp.tau_points = t;
            }
            if let Some(r) = rule {
                svp.rule = match r {
                    RuleArg::Max => PlateauRule::Max,
                    RuleArg::Plateau => PlateauRule::RelativeChange,
                };
            }
            let records = run_svp(&cfg)?;
            eprintln!(
                "{} records corrected -> {}",
                records.len(),
                cfg.config.output.join(SVP_FILE).display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Grm {
            genotypes,
            out,
            block,
        } => {
            let g = Genotypes::from_csv(&genotypes)?;
            let grm = compute_grm(&g, block)?;
            grm.write(&out)?;
            eprintln!(
                "{} individuals, {} variants used -> {}",
                grm.n(),
                grm.variants_used(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate(Simulate::Null {
            config,
            n,
            seed,
            out,
        }) => {
            let cfg = validate_config_with(&config, &Overrides::default())?;
            let ds = null_sample(&cfg.dataset, n, seed)?;
            write_dataset(&ds, &out)
        }
        Command::Simulate(Simulate::Spec { spec, n, seed, out }) => {
            let ds = ancestral_sample(&GenerativeSpec::from_toml_file(&spec)?, n, seed)?;
            write_dataset(&ds, &out)
        }
        Command::Evaluate {
            config,
            seed,
            output,
        } => {
            let cfg = validate_evaluate(
                &config,
                &Overrides {
                    seed,
                    output,
                    ..Overrides::default()
                },
            )?;
            let source = match &cfg.source {
                LoadedSource::Null(_) => "null",
                LoadedSource::Spec(_) => "spec",
            };
            let result = run_evaluate(&cfg)?;
            let failures = result
                .records
                .iter()
                .filter(|r| matches!(r.status, RecordStatus::Failed(_)))
                .count();
            eprintln!(
                "{source} grid: {} records, {} failed -> {}",
                result.records.len(),
                failures,
                cfg.config.output.display()
            );
            Ok(if failures == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_PARTIAL)
            })
        }
    }
}

fn write_dataset(ds: &targeted_fx::data::Dataset, out: &Path) -> Result<ExitCode, Error> {
    ds.to_csv(out)?;
    eprintln!("{} rows -> {}", ds.n_rows(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = thread_pool() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    run(cli.command).unwrap_or_else(fail)
}
