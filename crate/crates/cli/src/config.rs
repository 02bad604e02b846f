//! Run configuration: a TOML file, overridden by flags, resolved against the
//! data root, then snapshotted next to every output.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use inflect_core::model::{AdamConfig, ModelConfig, TrainConfig};
use inflect_core::sampler::SamplerConfig;
use inflect_core::SplitConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Environment variable naming the directory relative paths resolve against.
pub const DATA_ROOT_ENV: &str = "INFLECT_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One model per language.
    #[default]
    Mono,
    /// One model over all languages.
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpora: PathBuf,
    pub splits: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpora: "corpora".into(),
            splits: "splits".into(),
            checkpoints: "runs".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub min_lemmas_per_split: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        let d = SplitConfig::default();
        Self { seed: d.seed, ratios: d.mass_ratios, min_lemmas_per_split: d.min_lemmas_per_split }
    }
}

impl SplitSection {
    pub fn to_config(&self) -> SplitConfig {
        SplitConfig { mass_ratios: self.ratios, seed: self.seed, min_lemmas_per_split: self.min_lemmas_per_split }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub temperature: f64,
    /// Defaults to 512 in mono mode and 1024 in multi mode.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { temperature: 0.5, batch_size: None, seed: 0 }
    }
}

/// Architecture overrides; unset fields take the preset of the run mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub d_ffn: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
    pub attention_dropout: Option<f64>,
    pub activation_dropout: Option<f64>,
    pub layer_drop: Option<f64>,
    pub max_source_len: Option<usize>,
    pub max_target_len: Option<usize>,
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub initial_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub max_epochs: usize,
    pub eval_every_epochs: usize,
    pub eval_every_steps: Option<usize>,
    pub patience: Option<usize>,
    pub stop_at_perfect: bool,
    pub micro_batch: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            initial_lr: t.initial_lr,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            weight_decay: t.weight_decay,
            grad_clip_norm: t.grad_clip_norm,
            max_epochs: t.max_epochs,
            eval_every_epochs: t.eval_every_epochs,
            eval_every_steps: t.eval_every_steps,
            patience: t.patience,
            stop_at_perfect: t.stop_at_perfect,
            micro_batch: t.micro_batch,
            seed: t.seed,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            initial_lr: self.initial_lr,
            adam: AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps },
            grad_clip_norm: self.grad_clip_norm,
            weight_decay: self.weight_decay,
            max_epochs: self.max_epochs,
            eval_every_epochs: self.eval_every_epochs,
            eval_every_steps: self.eval_every_steps,
            patience: self.patience,
            stop_at_perfect: self.stop_at_perfect,
            micro_batch: self.micro_batch,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub languages: Vec<String>,
    pub paths: Paths,
    pub split: SplitSection,
    pub sampler: SamplerSection,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl RunConfig {
    /// Reads `path`, or the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    pub fn batch_size(&self) -> usize {
        self.sampler.batch_size.unwrap_or(match self.mode {
            Mode::Mono => SamplerConfig::monolingual(0).batch_size,
            Mode::Multi => SamplerConfig::multilingual(0).batch_size,
        })
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig { temperature: self.sampler.temperature, batch_size: self.batch_size(), seed: self.sampler.seed }
    }

    /// The mode's preset with every override applied.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut c = match self.mode {
            Mode::Mono => ModelConfig::monolingual(vocab_size),
            Mode::Multi => ModelConfig::multilingual(vocab_size),
        };
        let m = &self.model;
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = m.$f { c.$f = v; } )* };
        }
        apply!(enc_layers, dec_layers, d_model, d_ffn, heads, dropout, attention_dropout, activation_dropout, layer_drop, max_source_len, max_target_len);
        c
    }

    pub fn init_seed(&self) -> u64 {
        self.model.init_seed.unwrap_or(self.train.seed)
    }

    /// Fills every defaulted field with its effective value so the snapshot
    /// alone re-creates the run.
    pub fn resolved(&self, root: &Path) -> Self {
        let mut r = self.clone();
        r.sampler.batch_size = Some(self.batch_size());
        let c = self.model_config(4);
        r.model = ModelSection {
            enc_layers: Some(c.enc_layers),
            dec_layers: Some(c.dec_layers),
            d_model: Some(c.d_model),
            d_ffn: Some(c.d_ffn),
            heads: Some(c.heads),
            dropout: Some(c.dropout),
            attention_dropout: Some(c.attention_dropout),
            activation_dropout: Some(c.activation_dropout),
            layer_drop: Some(c.layer_drop),
            max_source_len: Some(c.max_source_len),
            max_target_len: Some(c.max_target_len),
            init_seed: Some(self.init_seed()),
        };
        r.paths = Paths {
            corpora: resolve(root, &self.paths.corpora),
            splits: resolve(root, &self.paths.splits),
            checkpoints: resolve(root, &self.paths.checkpoints),
            reports: resolve(root, &self.paths.reports),
        };
        r
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// `INFLECT_DATA_ROOT`, or the working directory.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

pub fn resolve(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_means_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.batch_size(), 512);
        assert_eq!(c.model_config(10), ModelConfig::monolingual(10));
        assert_eq!(c.train.to_config(), TrainConfig::default());
    }

    #[test]
    fn overrides_and_snapshot_round_trip() {
        let c: RunConfig = toml::from_str(
            "mode = \"multi\"\nlanguages = [\"en\", \"de\"]\n[model]\nenc_layers = 2\n[train]\nmax_epochs = 5\n",
        )
        .unwrap();
        assert_eq!(c.batch_size(), 1024);
        let m = c.model_config(10);
        assert_eq!((m.enc_layers, m.dec_layers), (2, 4));
        let snap = c.resolved(Path::new("/data"));
        let back: RunConfig = toml::from_str(&snap.to_toml()).unwrap();
        assert_eq!(back, snap);
        assert_eq!(back.model_config(10), m);
        assert_eq!(back.paths.splits, PathBuf::from("/data/splits"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rate = 1.0\n").is_err());
    }
}
