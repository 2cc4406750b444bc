//! Declarative run configuration and the work-directory contract.
//!
//! One TOML file drives every command. In deterministic mode each command is
//! a pure function of (config, input artifacts, seed); the work directory's
//! manifest records the configuration hash and the effective seed so a run
//! can be audited and reproduced byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::ingest::DatasetSpec;
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;

/// Environment variable overriding the configured work directory.
pub const WORK_DIR_ENV: &str = "CLAD_WORK_DIR";

/// Filesystem locations, all relative to the invoking directory unless
/// absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    /// Root for corpus/, samples/, checkpoints/, and reports/.
    pub work_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { work_dir: PathBuf::from("clad-work") }
    }
}

/// Synthetic-corpus settings used when no external dataset is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub name: String,
    pub n_windows: usize,
    pub window_size: usize,
    pub anomaly_ratio: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            name: "synthetic".to_string(),
            n_windows: 2000,
            window_size: 100,
            anomaly_ratio: 0.10,
        }
    }
}

/// The complete declarative run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed; omitted plus `deterministic = false` draws one from the
    /// operating system and records it in the manifest.
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub paths: PathsSection,
    /// External dataset; absent means the synthetic corpus from `[synth]`.
    pub dataset: Option<DatasetSpec>,
    pub synth: SynthSection,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            deterministic: true,
            paths: PathsSection::default(),
            dataset: None,
            synth: SynthSection::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a TOML configuration file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    /// Parse configuration from TOML text.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad configuration: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Check every section.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if let Some(spec) = &self.dataset {
            spec.validate()?;
        }
        if self.synth.n_windows == 0 || self.synth.window_size == 0 {
            return Err(Error::Config("synth: n_windows and window_size must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.synth.anomaly_ratio) {
            return Err(Error::Config("synth: anomaly_ratio must lie in [0, 1]".into()));
        }
        if self.synth.name.is_empty() || self.synth.name.contains(['/', '\\']) {
            return Err(Error::Config("synth: name must be a plain file stem".into()));
        }
        Ok(())
    }

    /// Work directory after the environment override.
    pub fn work_dir(&self) -> PathBuf {
        match std::env::var_os(WORK_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.paths.work_dir.clone(),
        }
    }

    /// Content hash of the configuration (hex SHA-256 of its canonical JSON
    /// form), used to tie artifacts in a work directory to the
    /// configuration that produced them.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Resolved work-directory layout.
#[derive(Debug, Clone)]
pub struct WorkDir {
    pub root: PathBuf,
}

impl WorkDir {
    pub fn new(root: PathBuf) -> WorkDir {
        WorkDir { root }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn corpus_file(&self, name: &str) -> PathBuf {
        self.corpus_dir().join(format!("{name}.log"))
    }

    pub fn sample_file(&self, split: &str) -> PathBuf {
        self.samples_dir().join(format!("{split}.cwbs"))
    }

    pub fn split_manifest_path(&self) -> PathBuf {
        self.samples_dir().join("split_manifest.json")
    }

    pub fn checkpoint_path(&self, tag: &str) -> PathBuf {
        self.checkpoints_dir().join(format!("{tag}.ckpt"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.reports_dir().join(name)
    }

    /// Create the four artifact subdirectories.
    pub fn ensure_layout(&self) -> Result<()> {
        for dir in
            [self.corpus_dir(), self.samples_dir(), self.checkpoints_dir(), self.reports_dir()]
        {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }
}

/// Run manifest tying artifacts to the configuration and seed that produced
/// them. Contains no timestamps, so identical runs write identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub deterministic: bool,
    /// Per-command artifact records, keyed by command name.
    pub commands: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64, deterministic: bool) -> RunManifest {
        RunManifest { config_hash, seed, deterministic, commands: BTreeMap::new() }
    }

    /// Load the manifest from a work directory, or start a fresh one. A
    /// manifest produced under a different configuration or seed is an
    /// error: artifacts in the directory would not match this run.
    pub fn load_or_new(
        path: &Path,
        config_hash: &str,
        seed: u64,
        deterministic: bool,
    ) -> Result<RunManifest> {
        if !path.exists() {
            return Ok(RunManifest::new(config_hash.to_string(), seed, deterministic));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: bad manifest: {e}", path.display())))?;
        if manifest.config_hash != config_hash || manifest.seed != seed {
            return Err(Error::Config(format!(
                "{} was produced by a different configuration or seed; \
                 point at a fresh work directory or remove the old one",
                path.display()
            )));
        }
        Ok(manifest)
    }

    /// Record a command's artifacts and persist the manifest.
    pub fn record(&mut self, path: &Path, command: &str, entry: serde_json::Value) -> Result<()> {
        self.commands.insert(command.to_string(), entry);
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_an_empty_document() {
        let config = RunConfig::from_toml("").unwrap();
        assert_eq!(config, RunConfig::default());
        assert!(config.deterministic);
        assert_eq!(config.synth.n_windows, 2000);
        assert_eq!(config.synth.window_size, 100);
        assert_eq!(config.synth.anomaly_ratio, 0.10);
        assert_eq!(config.model.model_dim, 512);
        assert_eq!(config.finetune.gamma, 2.0);
    }

    #[test]
    fn sections_override_defaults() {
        let text = r#"
            seed = 7
            deterministic = true

            [paths]
            work_dir = "/tmp/clad-run"

            [synth]
            n_windows = 64
            window_size = 5
            anomaly_ratio = 0.25

            [model]
            model_dim = 64
            embed_dim = 16
            heads = 4
            ffn_dim = 128
            cnn_blocks = [
                { channels = 32, kernel = 3, stride = 2, dilation = 1 },
                { channels = 64, kernel = 3, stride = 2, dilation = 2 },
                { channels = 64, kernel = 3, stride = 4, dilation = 4 },
            ]

            [pretrain]
            epochs = 3

            [finetune]
            epochs = 5
            batch_size = 16
        "#;
        let config = RunConfig::from_toml(text).unwrap();
        assert_eq!(config.seed, Some(7));
        assert_eq!(config.paths.work_dir, PathBuf::from("/tmp/clad-run"));
        assert_eq!(config.synth.n_windows, 64);
        assert_eq!(config.model.model_dim, 64);
        assert_eq!(config.pretrain.epochs, 3);
        assert_eq!(config.finetune.epochs, 5);
        assert_eq!(config.finetune.batch_size, 16);
    }

    #[test]
    fn invalid_sections_are_rejected_on_load() {
        // Model dimension not divisible by the head count.
        let text = "[model]\nmodel_dim = 30\n";
        assert!(RunConfig::from_toml(text).is_err());
        // Malformed TOML.
        assert!(RunConfig::from_toml("seed = ").is_err());
        // Bad synth ratio.
        let text = "[synth]\nanomaly_ratio = 1.5\n";
        assert!(RunConfig::from_toml(text).is_err());
    }

    #[test]
    fn content_hash_tracks_meaningful_changes() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.content_hash(), b.content_hash());
        b.seed = Some(1);
        assert_ne!(a.content_hash(), b.content_hash());
        let hash = a.content_hash();
        assert_eq!(hash.len(), 64);
        assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn work_dir_layout_is_under_one_root() {
        let wd = WorkDir::new(PathBuf::from("/w"));
        assert_eq!(wd.corpus_file("synthetic"), PathBuf::from("/w/corpus/synthetic.log"));
        assert_eq!(wd.sample_file("train"), PathBuf::from("/w/samples/train.cwbs"));
        assert_eq!(wd.checkpoint_path("pretrained"), PathBuf::from("/w/checkpoints/pretrained.ckpt"));
        assert_eq!(wd.report_path("metrics_test.json"), PathBuf::from("/w/reports/metrics_test.json"));
        assert_eq!(wd.manifest_path(), PathBuf::from("/w/manifest.json"));
    }

    #[test]
    fn manifest_round_trips_and_rejects_foreign_runs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut manifest = RunManifest::new("abc".into(), 7, true);
        manifest
            .record(&path, "synth", serde_json::json!({"windows": 10}))
            .unwrap();
        let loaded = RunManifest::load_or_new(&path, "abc", 7, true).unwrap();
        assert_eq!(loaded.commands["synth"]["windows"], serde_json::json!(10));
        // Different hash or seed → refuse to mix artifacts.
        assert!(RunManifest::load_or_new(&path, "other", 7, true).is_err());
        assert!(RunManifest::load_or_new(&path, "abc", 8, true).is_err());
    }

    #[test]
    fn manifest_bytes_are_stable_across_identical_runs() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str| {
            let path = dir.path().join(name);
            let mut manifest = RunManifest::new("h".into(), 3, true);
            manifest.record(&path, "synth", serde_json::json!({"windows": 4})).unwrap();
            manifest.record(&path, "prepare", serde_json::json!({"train": 2})).unwrap();
            fs::read(&path).unwrap()
        };
        assert_eq!(write("a.json"), write("b.json"));
    }
}
