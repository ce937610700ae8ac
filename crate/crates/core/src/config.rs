//! Versioned run configuration. Every tunable default lives here.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::synth::SynthConfig;
use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    /// Attention heads of the transformer stacks.
    pub heads: usize,
    pub encoder_layers: usize,
    pub utterance_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub gat_heads: usize,
    pub gat_layers: usize,
    /// Positions per utterance, `[SEN]` included; also the response cap.
    pub max_len: usize,
    /// Global positions: context utterances plus the appended-node slot.
    pub max_utts: usize,
    pub max_appended: usize,
    pub n_emo: usize,
    /// Probability on the true label needed to select an appended keyword.
    pub keyword_threshold: f64,
    /// Filled in from the corpus vocabulary.
    #[serde(default)]
    pub vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            encoder_layers: 2,
            utterance_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            gat_heads: 4,
            gat_layers: 4,
            max_len: 32,
            max_utts: 16,
            max_appended: 20,
            n_emo: 8,
            keyword_threshold: 0.8,
            vocab: 0,
        }
    }
}

impl ModelConfig {
    /// Full-size settings: d=768, 32 emotions, six-layer stacks.
    pub fn full_size() -> Self {
        Self {
            d: 768,
            heads: 12,
            encoder_layers: 6,
            utterance_layers: 6,
            decoder_layers: 6,
            ffn_dim: 3072,
            n_emo: 32,
            max_len: 64,
            max_utts: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.gat_heads == 0 || self.d % self.gat_heads != 0 {
            return bad(format!("d={} must be divisible by gat_heads={}", self.d, self.gat_heads));
        }
        if self.max_len < 2 || self.max_utts < 2 || self.n_emo == 0 {
            return bad("max_len and max_utts must be ≥ 2, n_emo ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.keyword_threshold) {
            return bad("keyword_threshold must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Vocabulary cap applied when loading a corpus file.
    pub max_vocab: usize,
    pub split: [f64; 3],
    pub synth: SynthConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            max_vocab: 1000,
            split: [0.8, 0.1, 0.1],
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsSection {
    pub pmi_threshold: f64,
}

impl Default for PairsSection {
    fn default() -> Self {
        Self { pmi_threshold: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Weights of the emotion, keyword, and generation losses.
    pub loss_weights: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr: 1e-3,
            max_epochs: 30,
            patience: 3,
            loss_weights: [1.0, 1.0, 1.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(
                "patience and batch_size must be ≥ 1 and lr positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    Greedy,
    Nucleus { p: f64 },
    TopK { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_len: usize,
    pub strategy: Strategy,
    /// Softmax temperature applied before sampling strategies.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_len: 30,
            strategy: Strategy::Greedy,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub enabled: bool,
    pub tau: f64,
    /// Discriminator training batch size.
    pub batch_size: usize,
    pub disc_epochs: usize,
    pub disc_lr: f64,
    /// Negative samples per perturbation iteration (each a sum of three ANs).
    pub n_neg: usize,
    pub n_iter: usize,
    pub step_size: f64,
    pub kl_weight: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            tau: 0.5,
            batch_size: 64,
            disc_epochs: 10,
            disc_lr: 1e-3,
            n_neg: 4,
            n_iter: 3,
            step_size: 1.0,
            kl_weight: 0.01,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || self.n_iter == 0 {
            return Err(Error::Config("cpplm requires tau > 0 and n_iter ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Slice {
    #[default]
    All,
    Multiturn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub slice: Slice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub corpus: CorpusSection,
    pub pairs: PairsSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generate: GenerationConfig,
    pub cpplm: ContrastiveConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            corpus: CorpusSection::default(),
            pairs: PairsSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generate: GenerationConfig::default(),
            cpplm: ContrastiveConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.cpplm.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}
