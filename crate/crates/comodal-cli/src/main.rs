//! `comodal` — train, evaluate, extract, and ablate co-trained multimodal
//! models. Every run is reproducible from (config file, seed); the only
//! environment dependence is the optional `COMODAL_THREADS` worker cap used
//! by `ablate`.
//!
//! Failures print exactly one `category: message` line on stderr and exit
//! nonzero; categories are `config`, `io`, `format`, `mismatch`, `train`,
//! `tensor`, and `usage`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use comodal::config::{parse_config, ConfigError, ExperimentConfig, RunMode};
use comodal::io::{
    self, read_checkpoint, run_id, save_checkpoint, save_entries, IoError,
};
use comodal::model::build_model;
use comodal::trainer::{
    evaluate, generate_synthetic, run_ablation, select_best, train, AblationVariant, Dataset,
    TrainError,
};
use comodal::TensorError;

#[derive(Parser)]
#[command(name = "comodal", version, about = "Co-training of unimodal models with a multimodal transformer branch")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics.jsonl plus selected checkpoints.
    Train {
        /// JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split and print its metrics as JSON lines.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// The config the checkpoint was trained with.
        #[arg(long)]
        config: PathBuf,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write a standalone unimodal checkpoint (one modality, no fused branch).
    Extract {
        /// Full-model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Modality to extract.
        #[arg(long)]
        modality: String,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a matched ablation over several seeds and write a CSV table.
    Ablate {
        /// JSON experiment config (the shared base of all arms).
        #[arg(long)]
        config: PathBuf,
        /// One of: no_kt, frozen_shared, alpha_sweep.
        #[arg(long)]
        variant: String,
        /// Number of seeds (config seed, config seed + 1, ...).
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite; exits nonzero on any failure.
    Gradcheck {
        /// Substring filter on check names, or "all".
        #[arg(long, default_value = "all")]
        ops: String,
    },
}

enum CliError {
    Config(ConfigError),
    Io(IoError),
    Train(TrainError),
    Tensor(TensorError),
    Usage(String),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Config(ConfigError::Io(_)) => "io",
            CliError::Config(_) => "config",
            CliError::Io(IoError::Io(_)) => "io",
            CliError::Io(IoError::Format { .. }) => "format",
            CliError::Io(IoError::Mismatch(_)) => "mismatch",
            CliError::Train(TrainError::Config(ConfigError::Io(_))) => "io",
            CliError::Train(TrainError::Config(_)) => "config",
            CliError::Train(TrainError::Tensor(_)) => "tensor",
            CliError::Train(TrainError::Diverged { .. }) => "train",
            CliError::Tensor(_) => "tensor",
            CliError::Usage(_) => "usage",
        }
    }

    fn message(&self) -> String {
        let raw = match self {
            CliError::Config(e) => e.to_string(),
            CliError::Io(e) => e.to_string(),
            CliError::Train(e) => e.to_string(),
            CliError::Tensor(e) => e.to_string(),
            CliError::Usage(m) => m.clone(),
        };
        // one line, and no doubled prefix when the source error already
        // names the category
        let raw = raw.replace('\n', " ");
        let prefix = format!("{}: ", self.category());
        raw.strip_prefix(&prefix).map_or(raw.clone(), str::to_string)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}
impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e)
    }
}
impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e)
    }
}
impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Tensor(e)
    }
}
impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(IoError::Io(e))
    }
}

/// Config plus the raw bytes it was parsed from (the run-id key).
fn load_config(path: &Path, seed: Option<u64>) -> Result<(ExperimentConfig, String), CliError> {
    let mut cfg = parse_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let bytes = std::fs::read(path)?;
    Ok((cfg.clone(), run_id(&bytes, cfg.seed)))
}

fn dataset_for(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    Ok(generate_synthetic(cfg, cfg.seed)?)
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let (cfg, rid) = load_config(config, seed)?;
    std::fs::create_dir_all(out)?;
    let dataset = dataset_for(&cfg)?;
    let mut result = train(&cfg, &dataset)?;

    let metrics_path = out.join("metrics.jsonl");
    std::fs::write(&metrics_path, io::metrics_lines(&rid, &result.records))?;
    let final_path = out.join("final.ckpt");
    save_checkpoint(&final_path, &result.model.store)?;

    let mut branches = result.model.names.clone();
    if cfg.mode != RunMode::NoMm {
        branches.push("mm".to_string());
    }
    println!("run_id {rid}");
    println!("wrote {}", metrics_path.display());
    println!("wrote {}", final_path.display());
    for branch in &branches {
        let Some((epoch, _)) = select_best(&result.records, branch) else {
            continue;
        };
        result.restore_epoch(epoch).map_err(CliError::Tensor)?;
        let path = out.join(format!("best_{branch}.ckpt"));
        save_checkpoint(&path, &result.model.store)?;
        println!("wrote {} (epoch {epoch})", path.display());
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, config: &Path, split: &str) -> Result<(), CliError> {
    let (cfg, rid) = load_config(config, None)?;
    let cfg = cfg.validated()?;
    let mut model = build_model(&cfg)?;
    let entries = read_checkpoint(checkpoint)?;
    io::load_into(&mut model.store, &entries)?;

    let dataset = dataset_for(&cfg)?;
    let part = match split {
        "train" => &dataset.train,
        "val" => &dataset.val,
        "test" => &dataset.test,
        other => {
            return Err(CliError::Usage(format!(
                "unknown split \"{other}\" (expected train, val, or test)"
            )))
        }
    };
    let mut record = evaluate(&model, part, &cfg.task).map_err(CliError::Tensor)?;
    record.split = split.to_string();
    print!("{}", io::metrics_lines(&rid, &[record]));
    Ok(())
}

fn cmd_extract(checkpoint: &Path, modality: &str, out: &Path) -> Result<(), CliError> {
    let entries = read_checkpoint(checkpoint)?;
    let prefix = format!("{modality}.");
    let kept: Vec<_> = entries.iter().filter(|e| e.name.starts_with(&prefix)).cloned().collect();
    if kept.is_empty() {
        return Err(CliError::Io(IoError::Mismatch(format!(
            "checkpoint has no parameters for modality \"{modality}\""
        ))));
    }
    save_entries(out, &kept)?;
    println!("wrote {} ({} parameters)", out.display(), kept.len());
    Ok(())
}

fn cmd_ablate(config: &Path, variant: &str, seeds: u64, out: &Path) -> Result<(), CliError> {
    let (cfg, _) = load_config(config, None)?;
    let variant: AblationVariant = variant.parse().map_err(CliError::Usage)?;
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
    let table = run_ablation(&cfg, variant, &seed_list)?;
    std::fs::create_dir_all(out)?;
    let name = match variant {
        AblationVariant::NoKt => "ablation_no_kt.csv",
        AblationVariant::FrozenSharedMm => "ablation_frozen_shared.csv",
        AblationVariant::AlphaSweep => "ablation_alpha_sweep.csv",
    };
    let path = out.join(name);
    std::fs::write(&path, table.to_csv())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gradcheck(ops: &str) -> Result<bool, CliError> {
    let results = comodal::gradcheck::run_all().map_err(CliError::Tensor)?;
    let mut all_pass = true;
    let mut matched = 0usize;
    for r in &results {
        if ops != "all" && !r.name.contains(ops) {
            continue;
        }
        matched += 1;
        all_pass &= r.pass();
        println!(
            "{} {} max_rel_err {:.3e} (tolerance {:.0e})",
            if r.pass() { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            comodal::gradcheck::TOLERANCE
        );
    }
    if matched == 0 {
        return Err(CliError::Usage(format!("no gradient check matches \"{ops}\"")));
    }
    Ok(all_pass)
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.cmd {
        Cmd::Train { config, out, seed } => cmd_train(&config, &out, seed).map(|()| true),
        Cmd::Eval { checkpoint, config, split } => {
            cmd_eval(&checkpoint, &config, &split).map(|()| true)
        }
        Cmd::Extract { checkpoint, modality, out } => {
            cmd_extract(&checkpoint, &modality, &out).map(|()| true)
        }
        Cmd::Ablate { config, variant, seeds, out } => {
            cmd_ablate(&config, &variant, seeds, &out).map(|()| true)
        }
        Cmd::Gradcheck { ops } => cmd_gradcheck(&ops),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("{}: {}", e.category(), e.message());
            ExitCode::FAILURE
        }
    }
}
