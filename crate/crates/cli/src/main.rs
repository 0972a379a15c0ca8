//! Command-line front end: synthetic data, training, evaluation and
//! embedding export.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dbdc::checkpoint::Checkpoint;
use dbdc::data::{generate_synthetic, Dataset, DatasetManifest, LabelFilter, Split};
use dbdc::evaluate::{evaluate_samples, export_embeddings};
use dbdc::mlpb::write_embedding_table;
use dbdc::trainer::Trainer;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "dbdc", version, about = "Semi-supervised multi-modality segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for data generation and training.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides, self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-modality dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Replace an existing non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train and write logs and checkpoints to the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Replace an existing non-empty run directory.
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on one split and write a CSV table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root; defaults to the configured one.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Output table; defaults to `eval.csv` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample labeled pixels and write their embeddings as a binary table.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Number of pixels to sample.
        #[arg(long, default_value_t = 10_000)]
        pixels: usize,
        /// Output table; defaults to `embeddings.bin` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing output file.
        #[arg(long)]
        force: bool,
    },
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if occupied {
            if !force {
                bail!("{} exists and is not empty; pass --force to replace it", dir.display());
            }
            fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        bail!("dataset {} does not exist", path.display());
    }
    Ok(Dataset::open(path)?)
}

fn gen_data(common: &Common, force: bool) -> Result<()> {
    let cfg = common.resolve()?;
    prepare_dir(&cfg.dataset, force)?;
    let manifest = generate_synthetic(&cfg.synth, &cfg.dataset)?;
    DatasetManifest::load(&cfg.dataset)?;
    println!(
        "wrote {} samples ({} modalities, {} classes) to {}",
        manifest.samples.len(),
        manifest.num_modalities,
        manifest.num_classes,
        cfg.dataset.display()
    );
    Ok(())
}

fn train(common: &Common, force: bool) -> Result<()> {
    let cfg = common.resolve()?;
    let dataset = open_dataset(&cfg.dataset)?;
    prepare_dir(&cfg.output, force)?;
    let echo = cfg.output.join("run_config.toml");
    fs::write(&echo, cfg.to_toml()?).with_context(|| format!("writing {}", echo.display()))?;
    let mut trainer = Trainer::new(cfg.trainer(), &dataset)?;
    let summary = trainer.fit(Some(&cfg.output))?;
    for e in &summary.epochs {
        let per: Vec<String> = e.val_dsc.iter().map(|d| format!("{d:.4}")).collect();
        println!("epoch {:>3}  lambda {:.4}  val dsc [{}]", e.epoch, e.lambda, per.join(", "));
    }
    if let Some(best) = summary.best_epoch {
        println!("best mean val dsc {:.4} at epoch {best}", summary.best_dsc);
    }
    Ok(())
}

fn split_samples(dataset: &Dataset, split: Split) -> Result<Vec<dbdc::backbone::ModalityBatch>> {
    let mut out = Vec::new();
    for k in 0..dataset.num_modalities() {
        out.extend(dataset.batches(k, split, LabelFilter::Labeled)?);
    }
    if out.is_empty() {
        bail!("split {split} has no labeled samples");
    }
    Ok(out)
}

fn eval(common: &Common, checkpoint: &Path, dataset: Option<&Path>, split: Split, out: Option<&Path>) -> Result<()> {
    let cfg = common.resolve()?;
    let ck = Checkpoint::load(checkpoint)?;
    let dataset = open_dataset(dataset.unwrap_or(&cfg.dataset))?;
    let samples = split_samples(&dataset, split)?;
    let result = evaluate_samples(&ck.net, &ck.mlmb, &ck.mlpb, &samples, &cfg.eval)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.join("eval.csv"));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    result.write_csv(&path)?;
    for m in &result.modalities {
        println!(
            "modality {}  images {}  dsc {:.6}  hd95 {:.3}",
            m.modality,
            m.images,
            m.mean_dsc(),
            m.mean_hd95()
        );
    }
    println!("mean dsc {:.6}  mean hd95 {:.3}", result.mean_dsc(), result.mean_hd95());
    Ok(())
}

fn export(
    common: &Common,
    checkpoint: &Path,
    dataset: Option<&Path>,
    split: Split,
    pixels: usize,
    out: Option<&Path>,
    force: bool,
) -> Result<()> {
    let cfg = common.resolve()?;
    let ck = Checkpoint::load(checkpoint)?;
    let dataset = open_dataset(dataset.unwrap_or(&cfg.dataset))?;
    let samples = split_samples(&dataset, split)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.join("embeddings.bin"));
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    let rows = export_embeddings(&ck.net, &ck.mlmb, &ck.mlpb, &samples, pixels, cfg.train.seed)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_embedding_table(&path, &rows)?;
    println!(
        "wrote {} rows of {} + 2 columns to {}",
        rows.len(),
        ck.net.config().embed_dim,
        path.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, force } => gen_data(&common, force),
        Command::Train { common, force } => train(&common, force),
        Command::Eval {
            common,
            checkpoint,
            dataset,
            split,
            out,
        } => eval(&common, &checkpoint, dataset.as_deref(), split, out.as_deref()),
        Command::ExportEmbeddings {
            common,
            checkpoint,
            dataset,
            split,
            pixels,
            out,
            force,
        } => export(&common, &checkpoint, dataset.as_deref(), split, pixels, out.as_deref(), force),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
