//! End-to-end training on the summed objectives, early stopping on
//! validation perplexity, and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::corpus::Vocab;
use crate::cpplm;
use crate::error::{Error, Result};
use crate::evaluation;
use crate::keypairs::PairIndex;
use crate::model::{example_loss, Example, LossParts, Model};
use crate::params::{accumulate, Adam, ParamStore, TensorRecord};
use crate::tape::{Graph, Mat};

/// Names that receive gradients: everything except the frozen snapshot and
/// the discriminator heads.
fn trainable(name: &str) -> bool {
    !name.starts_with("frozen.") && !name.starts_with(cpplm::PREFIX)
}

/// Mean loss components and mean gradients over a batch. Per-example
/// gradients are computed in parallel and summed in batch order.
pub fn batch_gradients(
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &[&Example],
    index: &PairIndex,
    weights: [f64; 3],
) -> Result<(LossParts, BTreeMap<String, Mat>)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let per: Vec<(LossParts, BTreeMap<String, Mat>)> = batch
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new(params);
            let (loss, parts) = example_loss(&mut g, cfg, ex, index, weights)?;
            let mut grads = g.param_grads(loss);
            grads.retain(|n, _| trainable(n));
            Ok((parts, grads))
        })
        .collect::<Result<_>>()?;
    let k = 1.0 / batch.len() as f64;
    let mut mean = LossParts::default();
    let mut grads = BTreeMap::new();
    for (p, g) in per {
        mean.emotion += p.emotion * k;
        mean.keyword += p.keyword * k;
        mean.generation += p.generation * k;
        mean.total += p.total * k;
        accumulate(&mut grads, g);
    }
    for g in grads.values_mut() {
        *g *= k;
    }
    Ok((mean, grads))
}

/// Mean loss of `examples` without gradients.
pub fn mean_loss(
    params: &ParamStore,
    cfg: &ModelConfig,
    examples: &[Example],
    index: &PairIndex,
    weights: [f64; 3],
) -> Result<LossParts> {
    let per: Vec<LossParts> = examples
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new(params);
            example_loss(&mut g, cfg, ex, index, weights).map(|r| r.1)
        })
        .collect::<Result<_>>()?;
    let k = 1.0 / per.len().max(1) as f64;
    Ok(per.iter().fold(LossParts::default(), |a, p| LossParts {
        emotion: a.emotion + p.emotion * k,
        keyword: a.keyword + p.keyword * k,
        generation: a.generation + p.generation * k,
        total: a.total + p.total * k,
    }))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub emotion: f64,
    pub keyword: f64,
    pub generation: f64,
    pub total: f64,
    pub valid_ppl: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss_emotion={:.6} loss_keyword={:.6} loss_generation={:.6} loss_total={:.6} valid_ppl={:.6}",
            self.epoch, self.emotion, self.keyword, self.generation, self.total, self.valid_ppl
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the retained parameters; 0 means the initial ones.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub diverged: Option<usize>,
    /// Not part of [`TrainLog::to_text`], which must be reproducible.
    pub wall_secs: f64,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s: String = self.epochs.iter().map(|e| format!("{e}\n")).collect();
        s.push_str(&format!("best_epoch={}", self.best_epoch));
        if self.stopped_early {
            s.push_str(" stopped_early=true");
        }
        if let Some(e) = self.diverged {
            s.push_str(&format!(" diverged_at={e}"));
        }
        s.push('\n');
        s
    }
}

/// Tracks the best validation score; lower is better.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad: 0,
        }
    }

    /// Records a score. Returns whether it improved on the best so far.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score < self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.bad = 0;
            true
        } else {
            self.bad += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Trains `model` in place and leaves it holding the best parameters by
/// `validate` (lower is better). Divergence stops training early and keeps
/// the best finite parameters; it is reported in the log, not as an error.
pub fn fit<F>(
    model: &mut Model,
    train: &[Example],
    index: &PairIndex,
    tcfg: &TrainConfig,
    seed: u64,
    mut validate: F,
) -> Result<TrainLog>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    tcfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("no training examples".into()));
    }
    let start = Instant::now();
    let cfg = model.cfg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(tcfg.lr);
    let mut stopper = EarlyStopper::new(tcfg.patience);
    let mut best = model.params.clone();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 1..=tcfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (parts, grads) = batch_gradients(&model.params, &cfg, &batch, index, tcfg.loss_weights)?;
            if !parts.total.is_finite() || grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
                log::error!("non-finite loss in epoch {epoch}; keeping epoch {}", stopper.best_epoch());
                log.diverged = Some(epoch);
                break 'epochs;
            }
            let w = chunk.len() as f64 / train.len() as f64;
            sum.emotion += parts.emotion * w;
            sum.keyword += parts.keyword * w;
            sum.generation += parts.generation * w;
            sum.total += parts.total * w;
            adam.step(&mut model.params, &grads);
        }
        let valid_ppl = validate(&model.params)?;
        let rec = EpochRecord {
            epoch,
            emotion: sum.emotion,
            keyword: sum.keyword,
            generation: sum.generation,
            total: sum.total,
            valid_ppl,
        };
        log::info!("{rec}");
        log.epochs.push(rec);
        if !valid_ppl.is_finite() {
            log.diverged = Some(epoch);
            break;
        }
        if stopper.observe(epoch, valid_ppl) {
            best = model.params.clone();
        } else if stopper.should_stop() {
            log.stopped_early = true;
            break;
        }
    }
    log.best_epoch = stopper.best_epoch();
    model.params = best;
    log.wall_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

/// [`fit`] with validation perplexity as the selection criterion.
pub fn train(
    model: &mut Model,
    train: &[Example],
    valid: &[Example],
    index: &PairIndex,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    if valid.is_empty() {
        return Err(Error::Empty("no validation examples".into()));
    }
    let cfg = model.cfg.clone();
    fit(model, train, index, tcfg, seed, |p| {
        evaluation::perplexity(p, &cfg, valid, index)
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub epoch: usize,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new(model: &Model, vocab: &Vocab, seed: u64, epoch: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            seed,
            epoch,
            config: model.cfg.clone(),
            vocab: vocab.clone(),
            params: model.params.to_archive(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.vocab.len() != ck.config.vocab {
            return Err(Error::Config(format!(
                "checkpoint vocabulary has {} entries but the model expects {}",
                ck.vocab.len(),
                ck.config.vocab
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn model(&self) -> Result<Model> {
        self.config.validate()?;
        let params = ParamStore::from_archive(&self.params).map_err(Error::Config)?;
        Ok(Model {
            cfg: self.config.clone(),
            params,
        })
    }
}
