//! Experiment configuration: one JSON file describes every stage of a
//! pipeline run. All randomness flows from the single `seed` through named
//! sub-seeds, so any stage can be reproduced on its own.

use std::fs;
use std::path::{Path, PathBuf};

use meg_core::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Unparseable {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where the dynamic neuron attaches: a fixed FFN layer index, or "sweep"
/// to pick the layer with the best replay rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttachChoice {
    Layer(usize),
    Mode(String),
}

impl AttachChoice {
    pub fn is_sweep(&self) -> bool {
        matches!(self, AttachChoice::Mode(_))
    }

    pub fn layer(&self) -> Option<usize> {
        match self {
            AttachChoice::Layer(n) => Some(*n),
            AttachChoice::Mode(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub edit: usize,
    pub pseudo: usize,
    pub irrelevant: usize,
    pub paraphrases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmParams {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub target_accuracy: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub d_embed: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub tau: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamiliarityParams {
    pub k: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    /// Entropy threshold in nats; queries below it route to editing.
    pub epsilon: f32,
    pub max_epochs: usize,
    pub lr: f32,
    pub target_accuracy: f32,
    pub target_entropy: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectParams {
    pub attach: AttachChoice,
    /// Edit facts sampled by the layer sweep when attach is "sweep".
    pub sweep_facts: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub max_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionParams {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Reverse steps at inference time.
    pub n_steps: usize,
    pub augment: bool,
    pub augment_ratio: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub t_embed: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_final: f32,
    pub check_every: usize,
    pub gate_steps: usize,
    pub gate_threshold: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    /// Generation budget per response.
    pub max_new: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Single source of randomness; every stage derives a named sub-seed.
    pub seed: u64,
    /// Artifact directory; `--artifacts` and MEG_ARTIFACTS override it.
    pub artifacts: PathBuf,
    pub corpus: CorpusParams,
    pub lm: LmParams,
    pub encoder: EncoderParams,
    pub familiarity: FamiliarityParams,
    pub collect: CollectParams,
    pub diffusion: DiffusionParams,
    pub eval: EvalParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            artifacts: PathBuf::from("artifacts"),
            corpus: CorpusParams { edit: 64, pseudo: 128, irrelevant: 256, paraphrases: 3 },
            lm: LmParams {
                d_model: 64,
                n_layers: 6,
                n_heads: 4,
                ffn_hidden: 256,
                max_seq_len: 32,
                max_epochs: 400,
                batch_size: 64,
                lr: 2e-3,
                target_accuracy: 0.99,
            },
            encoder: EncoderParams {
                d_embed: 64,
                n_layers: 2,
                n_heads: 4,
                ffn_hidden: 256,
                max_seq_len: 32,
                tau: 0.1,
                epochs: 30,
                batch_size: 32,
                lr: 5e-4,
            },
            familiarity: FamiliarityParams {
                k: 10,
                hidden: 128,
                n_blocks: 5,
                epsilon: 0.1,
                max_epochs: 2000,
                lr: 1e-3,
                target_accuracy: 0.99,
                target_entropy: 0.05,
            },
            collect: CollectParams {
                attach: AttachChoice::Mode("sweep".into()),
                sweep_facts: 16,
                lr: 1e-2,
                weight_decay: 0.0,
                max_steps: 500,
            },
            diffusion: DiffusionParams {
                t_max: 1000,
                beta_start: 1e-4,
                beta_end: 0.02,
                n_steps: 50,
                augment: true,
                augment_ratio: 4,
                patch_size: 100,
                width: 128,
                depth: 4,
                heads: 4,
                t_embed: 128,
                epochs: 4000,
                batch_size: 16,
                lr: 2e-3,
                lr_final: 1e-5,
                check_every: 200,
                gate_steps: 50,
                gate_threshold: 0.5,
            },
            eval: EvalParams { max_new: 8 },
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Unreadable { path: path.to_path_buf(), source })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|source| ConfigError::Unparseable { path: path.to_path_buf(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text)
            .map_err(|source| ConfigError::Unreadable { path: path.to_path_buf(), source })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        let c = &self.corpus;
        if c.edit == 0 || c.pseudo == 0 || c.irrelevant == 0 || c.paraphrases == 0 {
            return fail("corpus counts must all be positive".into());
        }
        if self.lm.d_model % self.lm.n_heads != 0 {
            return fail(format!(
                "lm.d_model {} must divide evenly into {} heads",
                self.lm.d_model, self.lm.n_heads
            ));
        }
        if self.lm.n_layers == 0 || self.lm.max_epochs == 0 || self.lm.batch_size == 0 {
            return fail("lm layer count, epochs, and batch size must be positive".into());
        }
        if self.encoder.d_embed % self.encoder.n_heads != 0 {
            return fail(format!(
                "encoder.d_embed {} must divide evenly into {} heads",
                self.encoder.d_embed, self.encoder.n_heads
            ));
        }
        if self.familiarity.k < 2 {
            return fail(format!("familiarity.k must be at least 2, got {}", self.familiarity.k));
        }
        if !(self.familiarity.epsilon > 0.0 && self.familiarity.epsilon.is_finite()) {
            return fail(format!(
                "familiarity.epsilon must be positive and finite, got {}",
                self.familiarity.epsilon
            ));
        }
        match &self.collect.attach {
            AttachChoice::Layer(n) if *n >= self.lm.n_layers => {
                return fail(format!(
                    "collect.attach layer {n} is outside the {}-layer model",
                    self.lm.n_layers
                ));
            }
            AttachChoice::Mode(word) if word != "sweep" => {
                return fail(format!(
                    "collect.attach must be a layer index or \"sweep\", got \"{word}\""
                ));
            }
            _ => {}
        }
        if self.collect.attach.is_sweep() && self.collect.sweep_facts > self.corpus.edit {
            return fail(format!(
                "collect.sweep_facts {} exceeds the {} edit facts",
                self.collect.sweep_facts, self.corpus.edit
            ));
        }
        let d = &self.diffusion;
        if d.t_max == 0 || d.n_steps == 0 || d.n_steps > d.t_max {
            return fail(format!(
                "diffusion.n_steps must be in 1..={}, got {}",
                d.t_max, d.n_steps
            ));
        }
        if !(0.0 < d.beta_start && d.beta_start <= d.beta_end && d.beta_end < 1.0) {
            return fail(format!(
                "diffusion betas must satisfy 0 < start <= end < 1, got {} and {}",
                d.beta_start, d.beta_end
            ));
        }
        if d.patch_size == 0 || d.width % d.heads != 0 || d.t_embed % 2 != 0 {
            return fail(
                "diffusion needs patch_size > 0, width divisible by heads, even t_embed"
                    .into(),
            );
        }
        if d.augment && d.augment_ratio == 0 {
            return fail("diffusion.augment_ratio must be positive when augmenting".into());
        }
        if self.eval.max_new == 0 {
            return fail("eval.max_new must be positive".into());
        }
        Ok(())
    }

    /// Named sub-seed for one pipeline component.
    pub fn subseed(&self, label: &str) -> u64 {
        Rng::subseed(self.seed, label)
    }
}

/// Hash of one stage's relevant config slice: the global seed plus the
/// parameters that stage consumes. Stages whose slices are untouched by a
/// config edit stay up to date.
pub fn slice_hash<T: Serialize>(seed: u64, slice: &T) -> String {
    let bytes = serde_json::to_vec(&(seed, slice)).expect("config slice serializes");
    let mut h = Sha256::new();
    h.update(&bytes);
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json_unchanged() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        // And again through a file.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.json");
        cfg.save(&path).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn attach_accepts_layer_or_sweep_only() {
        let mut cfg = ExperimentConfig::default();
        cfg.collect.attach = AttachChoice::Layer(3);
        cfg.validate().unwrap();
        cfg.collect.attach = AttachChoice::Mode("sweep".into());
        cfg.validate().unwrap();
        cfg.collect.attach = AttachChoice::Mode("best".into());
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        cfg.collect.attach = AttachChoice::Layer(6);
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));

        let layer: AttachChoice = serde_json::from_str("2").unwrap();
        assert_eq!(layer, AttachChoice::Layer(2));
        let sweep: AttachChoice = serde_json::from_str("\"sweep\"").unwrap();
        assert!(sweep.is_sweep());
    }

    #[test]
    fn validation_catches_bad_dimensions() {
        let mut cfg = ExperimentConfig::default();
        cfg.lm.d_model = 65;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.diffusion.n_steps = 2000;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.familiarity.epsilon = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.corpus.pseudo = 0;
        assert!(cfg.validate().is_err());

        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn stage_slices_hash_stably_and_separately() {
        let cfg = ExperimentConfig::default();
        let a = slice_hash(cfg.seed, &cfg.corpus);
        let b = slice_hash(cfg.seed, &cfg.corpus);
        assert_eq!(a, b);
        assert_ne!(a, slice_hash(cfg.seed + 1, &cfg.corpus));
        assert_ne!(a, slice_hash(cfg.seed, &cfg.lm));
    }

    #[test]
    fn subseeds_differ_by_label() {
        let cfg = ExperimentConfig::default();
        assert_ne!(cfg.subseed("pipeline/corpus"), cfg.subseed("pipeline/lm/init"));
        assert_eq!(cfg.subseed("pipeline/corpus"), cfg.subseed("pipeline/corpus"));
    }
}
