//! Run configuration files and the built-in profiles.
//!
//! A config is TOML with a mandatory top-level `seed` and sections
//! `[data]`, `[synthetic]`, `[model]`, `[pretrain]`, `[finetune]`,
//! `[sweep]` and `[ablation]`. Every random draw of a run derives from
//! `seed` through named substreams.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic_corpus, read_corpus, split_by_clip, Corpus, SyntheticSpec};
use crate::error::{Error, Result};
use crate::grouping::{AugmentKind, SamplerConfig};
use crate::network::{EncoderConfig, ModelConfig, ProjectorConfig};
use crate::objective::{FinetuneConfig, LossConfig, PretrainConfig};

/// Built-in profiles: name and TOML text.
pub const PROFILES: [(&str, &str); 3] = [
    ("desk", include_str!("../profiles/desk.toml")),
    ("deap-like", include_str!("../profiles/deap-like.toml")),
    ("seed-like", include_str!("../profiles/seed-like.toml")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Corpus file to read. When unset the `[synthetic]` corpus is generated
    /// in memory.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Train/validation/test clip fractions applied to generated corpora.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_split() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            split: default_split(),
        }
    }
}

/// Either a preset name or a full encoder table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EncoderChoice {
    Preset(String),
    Custom(EncoderConfig),
}

impl EncoderChoice {
    pub fn resolve(&self) -> Result<EncoderConfig> {
        match self {
            EncoderChoice::Preset(name) => EncoderConfig::preset(name),
            EncoderChoice::Custom(c) => Ok(c.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: EncoderChoice,
    #[serde(default)]
    pub projector: ProjectorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub p: usize,
    pub q: usize,
    pub lr: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Windows per iteration, `2PQ`; checked when given.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_augment")]
    pub augment: AugmentKind,
    #[serde(default = "yes")]
    pub consistent: bool,
    #[serde(default)]
    pub redraw_subjects: bool,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
}

fn default_temperature() -> f64 {
    LossConfig::default().temperature
}

fn default_augment() -> AugmentKind {
    AugmentKind::Crossover
}

fn yes() -> bool {
    true
}

fn default_eval_batches() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub labels_per_class: Option<usize>,
    #[serde(default = "five")]
    pub n_runs: usize,
    #[serde(default = "default_hidden")]
    pub classifier_hidden: Vec<usize>,
    #[serde(default = "half")]
    pub dropout: f64,
}

fn five() -> usize {
    5
}

fn default_hidden() -> Vec<usize> {
    vec![512, 256, 128]
}

fn half() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub p: Vec<usize>,
    pub q: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            p: vec![2, 4, 8, 16, 32, 64],
            q: vec![1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub variants: Vec<String>,
    /// Trials of the held-out stimulus-retrieval probe per variant.
    #[serde(default = "default_eval_batches")]
    pub probe_trials: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            variants: crate::objective::Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
            probe_trials: default_eval_batches(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn profile(name: &str) -> Result<Self> {
        let (_, text) = PROFILES.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = PROFILES.iter().map(|(n, _)| *n).collect();
            Error::config(format!("unknown profile {name:?} (expected one of {})", names.join(", ")))
        })?;
        Self::from_text(text)
    }

    /// Checks everything that does not need the corpus.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        let p = &self.pretrain;
        if let Some(b) = p.batch_size {
            if b != 2 * p.p * p.q {
                return Err(Error::config(format!(
                    "pretrain batch_size {b} must equal 2PQ = {}",
                    2 * p.p * p.q
                )));
            }
        }
        self.pretrain_config().validate_standalone()?;
        self.finetune_config().validate()?;
        if self.sweep.p.is_empty() || self.sweep.q.is_empty() {
            return Err(Error::config("sweep lists must be nonempty"));
        }
        for v in &self.ablation.variants {
            v.parse::<crate::objective::Variant>()?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            encoder: self.model.encoder.resolve()?,
            projector: self.model.projector.clone(),
            classifier: None,
        })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            sampler: SamplerConfig {
                p: p.p,
                q: p.q,
                consistent: p.consistent,
                redraw_subjects: p.redraw_subjects,
            },
            augment: p.augment,
            loss: LossConfig {
                temperature: p.temperature,
            },
            lr: p.lr,
            seed: self.seed,
            checkpoint_every: p.checkpoint_every,
            eval_every: p.eval_every,
            eval_batches: p.eval_batches,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            epochs: f.epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            labels_per_class: f.labels_per_class,
            n_runs: f.n_runs,
            seed: self.seed,
            classifier_hidden: f.classifier_hidden.clone(),
            dropout: f.dropout,
        }
    }

    /// The `[synthetic]` spec with its seed tied to the run seed.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            ..self.synthetic.clone()
        }
    }

    /// Generates and splits the synthetic corpus.
    pub fn generate_corpus(&self) -> Result<Corpus> {
        let corpus = generate_synthetic_corpus(&self.synthetic_spec())?;
        split_by_clip(&corpus, self.data.split, self.seed)
    }

    /// Reads `[data].path` when set, otherwise generates the synthetic
    /// corpus.
    pub fn load_corpus(&self) -> Result<Corpus> {
        match &self.data.path {
            Some(path) => read_corpus(path),
            None => self.generate_corpus(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_profile_parses_and_round_trips() {
        for (name, _) in PROFILES {
            let c = RunConfig::profile(name).unwrap();
            assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c, "{name}");
        }
    }

    #[test]
    fn deap_like_matches_recipe() {
        let c = RunConfig::profile("deap-like").unwrap();
        let p = &c.pretrain;
        assert_eq!((p.epochs, p.lr, p.temperature, p.p, p.q), (2800, 1e-4, 0.1, 8, 2));
        assert_eq!(p.batch_size, Some(32));
        let f = &c.finetune;
        assert_eq!((f.epochs, f.batch_size, f.lr), (60, 2048, 1e-3));
        let s = &c.synthetic;
        assert_eq!((s.n_clips, s.n_subjects, s.n_channels, s.n_times), (2400, 32, 32, 128));
        assert_eq!(c.model_config().unwrap().encoder, EncoderConfig::full());
        assert_eq!(c.model.projector, ProjectorConfig::default());
        assert_eq!(f.classifier_hidden, vec![512, 256, 128]);
    }

    #[test]
    fn seed_like_matches_recipe() {
        let c = RunConfig::profile("seed-like").unwrap();
        let p = &c.pretrain;
        assert_eq!((p.epochs, p.lr, p.temperature, p.p, p.q), (3288, 1e-3, 0.1, 16, 2));
        assert_eq!(p.batch_size, Some(64));
        let f = &c.finetune;
        assert_eq!((f.epochs, f.batch_size, f.lr), (70, 256, 1e-3));
        let s = &c.synthetic;
        assert_eq!((s.n_clips, s.n_subjects, s.n_channels, s.n_times), (3394, 45, 62, 200));
    }

    #[test]
    fn desk_profile_shape() {
        let c = RunConfig::profile("desk").unwrap();
        let s = &c.synthetic;
        assert_eq!((s.n_clips, s.n_subjects, s.n_channels, s.n_times, s.n_classes), (32, 8, 4, 32, 2));
        assert_eq!((c.pretrain.p, c.pretrain.q, c.pretrain.temperature), (4, 2, 0.1));
        assert!(c.pretrain.epochs <= 300);
        assert_eq!(c.model_config().unwrap().encoder, EncoderConfig::tiny());
    }

    #[test]
    fn generated_split_sizes() {
        let c = RunConfig::profile("deap-like").unwrap();
        let n = c.synthetic.n_clips as f64;
        let [_, val, test] = c.data.split;
        assert_eq!(((n * val).round(), (n * test).round()), (360.0, 360.0));
        assert_eq!(n - 720.0, 1680.0);
    }

    #[test]
    fn seed_is_mandatory() {
        let text = RunConfig::profile("desk").unwrap().to_text();
        let without: String = text.lines().filter(|l| !l.starts_with("seed =")).collect::<Vec<_>>().join("\n");
        assert!(matches!(RunConfig::from_text(&without), Err(Error::Config(_))));
    }

    #[test]
    fn inconsistent_batch_size_rejected() {
        let mut c = RunConfig::profile("deap-like").unwrap();
        c.pretrain.batch_size = Some(33);
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = RunConfig::profile("desk").unwrap().to_text() + "\n[extra]\nx = 1\n";
        assert!(RunConfig::from_text(&text).is_err());
    }
}
