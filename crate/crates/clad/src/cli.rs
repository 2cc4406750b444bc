//! Command-line pipeline: synth → prepare → pretrain → finetune →
//! evaluate/predict, every stage a pure function of (configuration, input
//! artifacts, seed) composing through files in the work directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::compressor::{compress_window, read_container, write_container, CompressedWindow};
use crate::config::{RunConfig, RunManifest, WorkDir};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_streams, predict_streams};
use crate::finetune::finetune;
use crate::ingest::{
    load_labeled_entries, split, window_entries, DatasetSpec, LabelAdapter, SplitStrategy,
    Windowing,
};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::model::ModelParameters;
use crate::pretrain::pretrain;
use crate::synthgen::{generate_corpus, write_corpus_file, AnomalyKind, CorpusParams};

/// Detect anomalies in compressed log streams without decompressing them.
#[derive(Debug, Parser)]
#[command(name = "clad", version, about)]
pub struct Cli {
    /// Run configuration file (defaults to ./clad.toml when present).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override the configured global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Force deterministic mode regardless of the configuration.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate the seeded synthetic labeled corpus.
    Synth,
    /// Ingest, window, split, and compress the corpus into sample files.
    Prepare,
    /// Self-supervised pretraining on the training split.
    Pretrain,
    /// Supervised fine-tuning from the pretrained checkpoint.
    Finetune,
    /// Score the fine-tuned model on the test split.
    Evaluate,
    /// Write per-window predictions for the test split.
    Predict,
}

/// Parse the real process arguments and execute.
pub fn run() -> Result<()> {
    execute(Cli::parse())
}

/// Execute a parsed invocation (also the entry point for tests).
pub fn execute(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let default_path = Path::new("clad.toml");
            if default_path.exists() {
                RunConfig::load(default_path)?
            } else {
                RunConfig::default()
            }
        }
    };
    if cli.deterministic {
        config.deterministic = true;
    }
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    let (seed, from_entropy) = resolve_seed(&config);
    config.seed = Some(seed);
    if from_entropy {
        log::info!("drew seed {seed} from the operating system; recording it in the manifest");
    }

    let work = WorkDir::new(config.work_dir());
    work.ensure_layout()?;
    let manifest = RunManifest::load_or_new(
        &work.manifest_path(),
        &config.content_hash(),
        seed,
        config.deterministic,
    )?;
    let mut ctx = Context { config, work, seed, manifest };
    match cli.command {
        Command::Synth => cmd_synth(&mut ctx),
        Command::Prepare => cmd_prepare(&mut ctx),
        Command::Pretrain => cmd_pretrain(&mut ctx),
        Command::Finetune => cmd_finetune(&mut ctx),
        Command::Evaluate => cmd_evaluate(&mut ctx),
        Command::Predict => cmd_predict(&mut ctx),
    }
}

/// Effective seed: CLI and config overrides first, then 0 in deterministic
/// mode, then operating-system entropy (flagged so it can be logged).
fn resolve_seed(config: &RunConfig) -> (u64, bool) {
    match config.seed {
        Some(seed) => (seed, false),
        None if config.deterministic => (0, false),
        None => (rand::random::<u64>(), true),
    }
}

struct Context {
    config: RunConfig,
    work: WorkDir,
    seed: u64,
    manifest: RunManifest,
}

impl Context {
    fn record(&mut self, command: &str, entry: serde_json::Value) -> Result<()> {
        self.manifest.record(&self.work.manifest_path(), command, entry)
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("report serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_split(work: &WorkDir, split_name: &str) -> Result<Vec<CompressedWindow>> {
    let path = work.sample_file(split_name);
    if !path.exists() {
        return Err(Error::MissingArtifact { path, hint: "run `clad prepare` first".into() });
    }
    read_container(&path)
}

fn load_tagged_checkpoint(work: &WorkDir, tag: &str, producer: &str) -> Result<Checkpoint> {
    let path = work.checkpoint_path(tag);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            hint: format!("run `clad {producer}` first"),
        });
    }
    let checkpoint = load_checkpoint(&path)?;
    if checkpoint.tag != tag {
        return Err(Error::Format(format!(
            "{}: expected a \"{tag}\" checkpoint, found \"{}\"",
            path.display(),
            checkpoint.tag
        )));
    }
    Ok(checkpoint)
}

/// Dataset specification actually in effect: the configured external
/// dataset, or the synthetic corpus produced by `synth`. The run seed
/// replaces any seed embedded in the dataset section.
fn effective_dataset_spec(ctx: &Context) -> Result<DatasetSpec> {
    if let Some(spec) = &ctx.config.dataset {
        let mut spec = spec.clone();
        spec.seed = ctx.seed;
        return Ok(spec);
    }
    let entry_file = ctx.work.corpus_file(&ctx.config.synth.name);
    if !entry_file.exists() {
        return Err(Error::MissingArtifact {
            path: entry_file,
            hint: "run `clad synth` first (or configure a [dataset] section)".into(),
        });
    }
    Ok(DatasetSpec {
        name: ctx.config.synth.name.clone(),
        entry_file,
        label_file: None,
        label_adapter: LabelAdapter::InlinePrefix,
        windowing: Windowing::Sliding,
        window_size: ctx.config.synth.window_size,
        target_window_count: None,
        session_id_pattern: None,
        split: SplitStrategy::Chronological,
        train_fraction: 0.8,
        seed: ctx.seed,
    })
}

fn cmd_synth(ctx: &mut Context) -> Result<()> {
    let synth = &ctx.config.synth;
    let corpus = generate_corpus(&CorpusParams {
        seed: ctx.seed,
        n_windows: synth.n_windows,
        window_size: synth.window_size,
        anomaly_ratio: synth.anomaly_ratio,
        kinds: AnomalyKind::all().to_vec(),
    })?;
    let path = ctx.work.corpus_file(&synth.name);
    write_corpus_file(&path, &corpus)?;
    let entry = json!({
        "file": format!("corpus/{}.log", synth.name),
        "windows": corpus.set.len(),
        "anomalous_windows": corpus.set.anomaly_count,
        "window_size": synth.window_size,
    });
    ctx.record("synth", entry)?;
    println!(
        "wrote {} ({} windows, {} anomalous)",
        path.display(),
        corpus.set.len(),
        corpus.set.anomaly_count
    );
    Ok(())
}

fn split_census(name: &str, windows: &[CompressedWindow]) -> serde_json::Value {
    let anomalous = windows.iter().filter(|w| w.label == 1).count();
    let ids: Vec<u64> = windows.iter().map(|w| w.window_id).collect();
    json!({
        "split": name,
        "windows": windows.len(),
        "anomalous": anomalous,
        "first_window_id": ids.iter().min(),
        "last_window_id": ids.iter().max(),
    })
}

fn cmd_prepare(ctx: &mut Context) -> Result<()> {
    let spec = effective_dataset_spec(ctx)?;
    let entries = load_labeled_entries(&spec)?;
    let set = window_entries(&spec, &entries)?;
    let splits = split(&set, &spec)?;

    let mut censuses = Vec::new();
    for (name, subset) in [
        ("train", &splits.train),
        ("val", &splits.validation),
        ("test", &splits.test),
    ] {
        let compressed: Vec<CompressedWindow> =
            subset.windows.iter().map(compress_window).collect();
        write_container(&ctx.work.sample_file(name), &compressed)?;
        censuses.push(split_census(name, &compressed));
    }
    let sidecar = json!({
        "dataset": spec.name,
        "windows": set.len(),
        "anomalous_windows": set.anomaly_count,
        "splits": censuses,
    });
    write_json(&ctx.work.split_manifest_path(), &sidecar)?;
    ctx.record("prepare", sidecar)?;
    println!(
        "prepared {} windows → train {}, val {}, test {}",
        set.len(),
        splits.train.len(),
        splits.validation.len(),
        splits.test.len()
    );
    Ok(())
}

fn cmd_pretrain(ctx: &mut Context) -> Result<()> {
    let train = read_split(&ctx.work, "train")?;
    let streams: Vec<Vec<u8>> = train.into_iter().map(|w| w.stream).collect();
    let mut params = ModelParameters::init(&ctx.config.model, ctx.seed);
    let report = pretrain(&ctx.config.model, &mut params, &streams, &ctx.config.pretrain, ctx.seed)?;
    let path = ctx.work.checkpoint_path("pretrained");
    save_checkpoint(&path, "pretrained", &ctx.config.model, &params)?;
    let report_value = serde_json::to_value(&report)
        .map_err(|e| Error::Format(format!("report serialization failed: {e}")))?;
    write_json(&ctx.work.report_path("pretrain_report.json"), &report_value)?;
    let entry = json!({
        "checkpoint": "checkpoints/pretrained.ckpt",
        "report": "reports/pretrain_report.json",
        "epochs": report.epoch_losses.len(),
        "final_loss": report.epoch_losses.last(),
        "skipped_batches": report.skipped_batches,
        "steps": report.steps,
    });
    ctx.record("pretrain", entry)?;
    println!(
        "pretrained {} epochs, final loss {:.4} → {}",
        report.epoch_losses.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn cmd_finetune(ctx: &mut Context) -> Result<()> {
    let train = read_split(&ctx.work, "train")?;
    let val = read_split(&ctx.work, "val")?;
    let checkpoint = load_tagged_checkpoint(&ctx.work, "pretrained", "pretrain")?;
    if checkpoint.config != ctx.config.model {
        return Err(Error::Config(
            "the pretrained checkpoint was built with a different model configuration; \
             re-run `clad pretrain` under this configuration"
                .into(),
        ));
    }
    let train_pairs: Vec<(Vec<u8>, u8)> = train.into_iter().map(|w| (w.stream, w.label)).collect();
    let val_pairs: Vec<(Vec<u8>, u8)> = val.into_iter().map(|w| (w.stream, w.label)).collect();
    let mut params = checkpoint.params;
    let outcome = finetune(
        &ctx.config.model,
        &mut params,
        &train_pairs,
        &val_pairs,
        &ctx.config.finetune,
        ctx.seed,
    )?;
    let path = ctx.work.checkpoint_path("finetuned-ema");
    save_checkpoint(&path, "finetuned-ema", &ctx.config.model, &outcome.params)?;
    let history = json!({
        "best_epoch": outcome.best_epoch,
        "best_score": outcome.best_score,
        "stopped_early": outcome.stopped_early,
        "epochs": outcome.history,
    });
    write_json(&ctx.work.report_path("finetune_history.json"), &history)?;
    let entry = json!({
        "checkpoint": "checkpoints/finetuned-ema.ckpt",
        "report": "reports/finetune_history.json",
        "best_epoch": outcome.best_epoch,
        "best_score": outcome.best_score,
        "epochs_run": outcome.history.len(),
        "stopped_early": outcome.stopped_early,
    });
    ctx.record("finetune", entry)?;
    println!(
        "finetuned {} epochs (best {} with score {:.4}) → {}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_score,
        path.display()
    );
    Ok(())
}

fn cmd_evaluate(ctx: &mut Context) -> Result<()> {
    let test = read_split(&ctx.work, "test")?;
    let checkpoint = load_tagged_checkpoint(&ctx.work, "finetuned-ema", "finetune")?;
    let items: Vec<(&[u8], u8)> = test.iter().map(|w| (w.stream.as_slice(), w.label)).collect();
    let report = evaluate_streams(
        "test",
        &checkpoint.config,
        &checkpoint.params,
        &items,
        ctx.config.finetune.batch_size,
    )?;
    let value = serde_json::to_value(&report)
        .map_err(|e| Error::Format(format!("report serialization failed: {e}")))?;
    write_json(&ctx.work.report_path("metrics_test.json"), &value)?;
    ctx.record("evaluate", value)?;
    println!(
        "test: precision {:.4}, recall {:.4}, F1 {:.4} over {} windows",
        report.precision, report.recall, report.f1, report.samples
    );
    Ok(())
}

fn cmd_predict(ctx: &mut Context) -> Result<()> {
    let test = read_split(&ctx.work, "test")?;
    let checkpoint = load_tagged_checkpoint(&ctx.work, "finetuned-ema", "finetune")?;
    let items: Vec<(&[u8], u8)> = test.iter().map(|w| (w.stream.as_slice(), w.label)).collect();
    let predictions = predict_streams(
        &checkpoint.config,
        &checkpoint.params,
        &items,
        ctx.config.finetune.batch_size,
    )?;
    let mut csv = String::from("window_id,label,prediction\n");
    for (window, &prediction) in test.iter().zip(&predictions) {
        csv.push_str(&format!("{},{},{}\n", window.window_id, window.label, prediction));
    }
    let path = ctx.work.report_path("predictions.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let positive = predictions.iter().filter(|&&p| p == 1).count();
    let entry = json!({
        "file": "reports/predictions.csv",
        "rows": predictions.len(),
        "predicted_anomalous": positive,
    });
    ctx.record("predict", entry)?;
    println!("wrote {} predictions ({} anomalous) → {}", predictions.len(), positive, path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_resolve_in_priority_order() {
        let mut config = RunConfig { seed: Some(42), ..RunConfig::default() };
        assert_eq!(resolve_seed(&config), (42, false));
        config.seed = None;
        config.deterministic = true;
        assert_eq!(resolve_seed(&config), (0, false));
        config.deterministic = false;
        let (_, from_entropy) = resolve_seed(&config);
        assert!(from_entropy);
    }

    #[test]
    fn command_line_parses_global_flags() {
        let cli = Cli::try_parse_from(["clad", "--seed", "9", "--deterministic", "synth"]).unwrap();
        assert_eq!(cli.seed, Some(9));
        assert!(cli.deterministic);
        assert!(matches!(cli.command, Command::Synth));
        let cli = Cli::try_parse_from(["clad", "evaluate", "--config", "run.toml"]).unwrap();
        assert_eq!(cli.config.as_deref(), Some(Path::new("run.toml")));
        assert!(matches!(cli.command, Command::Evaluate));
        assert!(Cli::try_parse_from(["clad", "bogus"]).is_err());
    }

    #[test]
    fn synthetic_dataset_spec_points_into_the_work_dir() {
        let dir = tempfile::tempdir().unwrap();
        let work = WorkDir::new(dir.path().to_path_buf());
        work.ensure_layout().unwrap();
        let config = RunConfig::default();
        let manifest = RunManifest::new("h".into(), 3, true);
        let ctx = Context { config, work, seed: 3, manifest };
        // Corpus absent → actionable pointer at the producing command.
        let err = effective_dataset_spec(&ctx).unwrap_err();
        match err {
            Error::MissingArtifact { hint, .. } => assert!(hint.contains("synth")),
            other => panic!("unexpected error {other:?}"),
        }
        // Corpus present → inline-prefix sliding spec seeded by the run.
        fs::write(ctx.work.corpus_file("synthetic"), "- a\n").unwrap();
        let spec = effective_dataset_spec(&ctx).unwrap();
        assert_eq!(spec.label_adapter, LabelAdapter::InlinePrefix);
        assert_eq!(spec.windowing, Windowing::Sliding);
        assert_eq!(spec.window_size, 100);
        assert_eq!(spec.seed, 3);
    }
}
