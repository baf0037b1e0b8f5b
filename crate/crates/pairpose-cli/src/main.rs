//! Experiment driver: dataset generation, training, evaluation, ablation,
//! gradient checking, and refiner training.
//!
//! Exit code 0 on success; on failure a machine-readable JSON error is
//! printed to stderr and the exit code is nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pairpose_core::checkpoint::{read_checkpoint, write_checkpoint};
use pairpose_core::config::ExperimentConfig;
use pairpose_core::error::{Error, Result};
use pairpose_core::eval::emit_results;
use pairpose_core::synth::{
    generate_dataset, models_from_config, read_dataset, write_dataset, GeneratedDataset,
};
use pairpose_core::{gradcheck, train};

#[derive(Parser)]
#[command(name = "pairpose", version, about = "Pixel-pair 6D pose regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long)]
    out: PathBuf,

    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Directory with pre-generated `train.ppd` / `test.ppd`; when absent
    /// the dataset is regenerated from the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test datasets.
    GenData(CommonOpts),
    /// Train the pose network and write a checkpoint.
    Train(CommonOpts),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Refinement iterations; defaults to the config value.
        #[arg(long)]
        refine: Option<usize>,
    },
    /// Train and evaluate the {ELS, CON, LRBP} x {±DCM} grid.
    Ablate {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run the gradient-check suite and print one line per check.
    Gradcheck {
        /// Trials per operation.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Trials for the composed-network checks.
        #[arg(long, default_value_t = 100)]
        network_trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train the residual refiner against a frozen checkpoint and write the
    /// merged checkpoint.
    RefineTrain {
        #[command(flatten)]
        common: CommonOpts,
        /// Main-network checkpoint to refine.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(opts: &CommonOpts) -> Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_or_generate(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<GeneratedDataset> {
    match data_dir {
        Some(dir) => {
            let (train, intr_a) = read_dataset(&dir.join("train.ppd"))?;
            let (test, intr_b) = read_dataset(&dir.join("test.ppd"))?;
            if intr_a != intr_b {
                return Err(Error::config(
                    "train and test datasets were rendered with different cameras",
                ));
            }
            let expected = cfg.dataset.camera.to_intrinsics()?;
            if intr_a != expected {
                return Err(Error::config(
                    "dataset camera does not match the config camera",
                ));
            }
            Ok(GeneratedDataset {
                train,
                test,
                models: models_from_config(&cfg.dataset, cfg.seed)?,
                intrinsics: intr_a,
            })
        }
        None => generate_dataset(&cfg.dataset, cfg.seed),
    }
}

fn write_manifest(cfg: &ExperimentConfig, command: &str, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let manifest = serde_json::json!({ "command": command, "config": cfg });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(opts) => {
            let cfg = load_config(&opts)?;
            let data = generate_dataset(&cfg.dataset, cfg.seed)?;
            std::fs::create_dir_all(&opts.out)?;
            write_dataset(&data.train, &data.intrinsics, &opts.out.join("train.ppd"))?;
            write_dataset(&data.test, &data.intrinsics, &opts.out.join("test.ppd"))?;
            write_manifest(&cfg, "gen-data", &opts.out)?;
            println!(
                "wrote {} train / {} test samples to {} (train hash {})",
                data.train.len(),
                data.test.len(),
                opts.out.display(),
                train::dataset_hash(&data.train, &data.intrinsics),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(opts) => {
            let cfg = load_config(&opts)?;
            let data = load_or_generate(&cfg, opts.data.as_deref())?;
            let outcome = train::train(&cfg, &data, Some(&opts.out))?;
            let last = outcome.log.last();
            println!(
                "trained {} steps; final joint loss {}",
                cfg.train.steps,
                last.map_or("n/a".to_string(), |r| format!("{:.6}", r.l_joint)),
            );
            println!("checkpoint: {}", opts.out.join("checkpoint.bin").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            common,
            checkpoint,
            refine,
        } => {
            let cfg = load_config(&common)?;
            let data = load_or_generate(&cfg, common.data.as_deref())?;
            let store = read_checkpoint(&checkpoint)?;
            let k = refine.unwrap_or(cfg.eval.refine_iterations);
            let (records, summary) =
                train::evaluate(&store, &cfg, &data.test, &data.models, &data.intrinsics, k)?;
            emit_results(&records, &summary, &common.out)?;
            write_manifest(&cfg, "eval", &common.out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { common, seeds } => {
            let cfg = load_config(&common)?;
            let seeds = seeds.unwrap_or_else(|| vec![cfg.seed]);
            let table = train::run_ablation(&cfg, &seeds)?;
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(
                common.out.join("ablation.json"),
                serde_json::to_string_pretty(&table)?,
            )?;
            std::fs::write(common.out.join("ablation.txt"), table.to_text())?;
            write_manifest(&cfg, "ablate", &common.out)?;
            print!("{}", table.to_text());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            trials,
            network_trials,
            seed,
        } => {
            let reports = gradcheck::run_full_suite(trials, network_trials, seed)?;
            let mut all_passed = true;
            for r in &reports {
                println!("{r}");
                all_passed &= r.passed();
            }
            if all_passed {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(2))
            }
        }
        Command::RefineTrain { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let data = load_or_generate(&cfg, common.data.as_deref())?;
            let main_store = read_checkpoint(&checkpoint)?;
            let refiner_store = train::train_refiner(&cfg, &main_store, &data)?;
            let mut merged = main_store;
            merged.extend(&refiner_store)?;
            std::fs::create_dir_all(&common.out)?;
            let out_path = common.out.join("checkpoint_refined.bin");
            write_checkpoint(&merged, &out_path)?;
            write_manifest(&cfg, "refine-train", &common.out)?;
            println!("refined checkpoint: {}", out_path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let payload = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.to_string() }
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
