//! Command-line front end: training, prediction, ensembling, evaluation,
//! and the supporting utilities (phantom data, normalization, gradient
//! checks, the 1-D averaging demo). Every failure prints a single
//! `kind: message` line on stderr and exits nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use emma::commands;
use emma::error::{EmmaError, Result};
use emma::preprocess::{NormalizationSpec, NormalizationVersion};

#[derive(Parser)]
#[command(name = "emma", version, about = "Ensembles of heterogeneous 3D CNNs for brain-tumour segmentation")]
struct Cli {
    /// Seed for commands that draw random numbers (phantom, gradcheck, toy-demo).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Training float width. Inference always runs in 64-bit.
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::P32)]
    precision: PrecisionArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    #[value(name = "32")]
    P32,
    #[value(name = "64")]
    P64,
}

impl From<PrecisionArg> for commands::Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::P32 => commands::Precision::F32,
            PrecisionArg::P64 => commands::Precision::F64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VersionArg {
    V1,
    V2,
    V3,
}

impl From<VersionArg> for NormalizationVersion {
    fn from(v: VersionArg) -> Self {
        match v {
            VersionArg::V1 => NormalizationVersion::V1,
            VersionArg::V2 => NormalizationVersion::V2,
            VersionArg::V3 => NormalizationVersion::V3,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic head phantoms with nested tumour labels.
    Phantom {
        /// How many cases to generate.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Volume extents, `D,H,W` or a single cubic value (minimum 48).
        #[arg(long, value_delimiter = ',', default_value = "64")]
        extents: Vec<usize>,
        /// Directory receiving `<id>.emv` and `<id>.seg.emv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize one case, or fit intensity landmarks over several.
    Normalize {
        /// Directory holding `<case>.emv` volumes.
        #[arg(long)]
        data_dir: PathBuf,
        /// Cases to touch: one for normalization, any number for fitting.
        #[arg(long, value_delimiter = ',', required = true)]
        cases: Vec<String>,
        /// Normalization version (ignored when fitting landmarks).
        #[arg(long, value_enum, default_value_t = VersionArg::V1)]
        version: VersionArg,
        /// Polynomial degree of the bias-field fit.
        #[arg(long, default_value_t = 3)]
        bias_degree: usize,
        /// Trained landmarks file (required by v3).
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Fit landmarks over `--cases` and write them to `--out` instead of
        /// normalizing.
        #[arg(long, default_value_t = false)]
        fit_landmarks: bool,
        /// Output directory (or the landmarks file when fitting).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model from a JSON run configuration.
    Train {
        /// Path to the run configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Predict one case with a single trained model.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Case id within the data directory.
        #[arg(long)]
        case: String,
        /// Directory receiving `<case>.prob.emv` and `<case>.pred.emv`.
        #[arg(long)]
        out: PathBuf,
        /// Override the output tile extent.
        #[arg(long)]
        tile: Option<usize>,
        /// Override the landmarks file recorded in the checkpoint.
        #[arg(long)]
        landmarks: Option<PathBuf>,
    },
    /// Predict one case with every member of a manifest and average them.
    Ensemble {
        /// JSON array of `{checkpoint, spec_id, normalization}` entries.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        case: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tile: Option<usize>,
    },
    /// Score a predicted label volume against a reference.
    Evaluate {
        /// Predicted `.pred.emv` / `.seg.emv` label volume.
        #[arg(long)]
        pred: PathBuf,
        /// Reference label volume.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Name to print for the case.
        #[arg(long, default_value = "case")]
        case_id: String,
        /// Optional JSON report destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every differentiable op and loss.
    Gradcheck {
        /// `all` or one check name.
        #[arg(long, default_value = "all")]
        scope: String,
        /// Random instances per check.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// 1-D demo: averaging diverse logistic classifiers recovers the midpoint.
    ToyDemo {
        /// Optional JSON report destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn cubic_extents(extents: &[usize]) -> Result<[usize; 3]> {
    match extents {
        [e] => Ok([*e; 3]),
        [d, h, w] => Ok([*d, *h, *w]),
        other => Err(EmmaError::Usage(format!(
            "--extents takes one or three values, got {}",
            other.len()
        ))),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| EmmaError::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Phantom { count, extents, out } => {
            let ids = commands::cmd_phantom(cli.seed, count, cubic_extents(&extents)?, &out)?;
            for id in ids {
                println!("{}", out.join(format!("{id}.emv")).display());
            }
        }
        Command::Normalize {
            data_dir,
            cases,
            version,
            bias_degree,
            landmarks,
            fit_landmarks,
            out,
        } => {
            if fit_landmarks {
                commands::cmd_fit_landmarks(&data_dir, &cases, &out)?;
                println!("{}", out.display());
            } else {
                let spec = NormalizationSpec {
                    version: version.into(),
                    bias_degree,
                    landmarks,
                };
                for case in &cases {
                    let path = commands::cmd_normalize(&data_dir, case, &spec, &out)?;
                    println!("{}", path.display());
                }
            }
        }
        Command::Train { config } => {
            let outcome = commands::cmd_train(&config, cli.precision.into())?;
            for (iteration, loss) in &outcome.losses {
                println!("iter {iteration}\tloss {loss:.9}");
            }
            println!("{}", outcome.checkpoint.display());
        }
        Command::Predict { checkpoint, data_dir, case, out, tile, landmarks } => {
            let (prob, pred) =
                commands::cmd_predict(&checkpoint, &data_dir, &case, &out, tile, landmarks)?;
            println!("{}", prob.display());
            println!("{}", pred.display());
        }
        Command::Ensemble { manifest, data_dir, case, out, tile } => {
            let (prob, pred) = commands::cmd_ensemble(&manifest, &data_dir, &case, &out, tile)?;
            println!("{}", prob.display());
            println!("{}", pred.display());
        }
        Command::Evaluate { pred, reference, case_id, out } => {
            let report = commands::cmd_evaluate(&pred, &reference, &case_id)?;
            print!("{}", report.text_table());
            if let Some(path) = out {
                emma::fsio::write_json(&path, &report.cases)?;
            }
        }
        Command::Gradcheck { scope, instances } => {
            let outcomes = commands::cmd_gradcheck(&scope, instances, cli.seed)?;
            let mut failures = 0usize;
            for o in &outcomes {
                let verdict = if o.passed() { "pass" } else { "FAIL" };
                println!(
                    "{:<24} instances {:>3}  max_rel_err {:.3e}  tol {:.1e}  {verdict}",
                    o.name, o.instances, o.max_rel_err, o.tolerance
                );
                failures += usize::from(!o.passed());
            }
            if failures > 0 {
                return Err(EmmaError::Numeric(format!(
                    "{failures} gradient check(s) exceeded tolerance"
                )));
            }
        }
        Command::ToyDemo { out } => {
            let report = commands::cmd_toydemo(cli.seed, out.as_deref())?;
            for m in &report.members {
                println!(
                    "{:<22} weight {:+.4}  bias {:+.4}  boundary {:+.3}",
                    m.id,
                    m.weight,
                    m.bias,
                    -m.bias / m.weight
                );
            }
            println!("averaged posterior crosses 0.5 at {:+.3}", report.crossing);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
