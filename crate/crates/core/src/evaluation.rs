//! Automatic metrics: perplexity, Dist-n, emotion accuracy and macro-F1,
//! token-level keyword P/R/F1, plus per-instance dumps.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ContrastiveConfig, GenerationConfig, ModelConfig, Slice};
use crate::corpus::{EmotionId, TokenId, Vocab};
use crate::cpplm;
use crate::error::{Error, Result};
use crate::keypairs::PairIndex;
use crate::model::{self, Example};
use crate::params::ParamStore;

/// `exp(Σ nll / Σ tokens)` over per-instance `(summed NLL, token count)`.
pub fn perplexity_from(parts: &[(f64, usize)]) -> Result<f64> {
    let tokens: usize = parts.iter().map(|p| p.1).sum();
    if tokens == 0 {
        return Err(Error::Empty("perplexity over zero tokens".into()));
    }
    let nll: f64 = parts.iter().map(|p| p.0).sum();
    Ok((nll / tokens as f64).exp())
}

/// Teacher-forced response NLL of every example under predicted
/// conditioning, in example order.
pub fn response_nlls(
    params: &ParamStore,
    cfg: &ModelConfig,
    examples: &[Example],
    index: &PairIndex,
) -> Result<Vec<(f64, usize)>> {
    examples
        .par_iter()
        .map(|ex| {
            let pred = model::predict(params, cfg, ex, index)?;
            model::response_nll(params, cfg, ex, &pred)
        })
        .collect()
}

pub fn perplexity(params: &ParamStore, cfg: &ModelConfig, examples: &[Example], index: &PairIndex) -> Result<f64> {
    perplexity_from(&response_nlls(params, cfg, examples, index)?)
}

/// Distinct n-grams across all responses over total generated tokens, ×100.
pub fn dist_n(responses: &[Vec<TokenId>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("dist-n needs n ≥ 1".into()));
    }
    if responses.is_empty() {
        return Err(Error::Empty("dist-n over an empty response set".into()));
    }
    let total: usize = responses.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Empty("dist-n over responses with no tokens".into()));
    }
    let grams: HashSet<&[TokenId]> = responses.iter().flat_map(|r| r.windows(n)).collect();
    Ok(grams.len() as f64 / total as f64 * 100.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmotionScores {
    pub top1: f64,
    pub top5: f64,
    pub macro_f1: f64,
    /// Classes never gold and never predicted, left out of the macro average.
    pub excluded: Vec<EmotionId>,
}

/// Rank of `gold` under `p` with ties broken toward the lower index.
fn rank_of(p: &[f64], gold: usize) -> usize {
    p.iter()
        .enumerate()
        .filter(|&(i, &v)| v > p[gold] || (v == p[gold] && i < gold))
        .count()
}

/// Top-k accuracies and macro-F1 over argmax predictions, as fractions.
pub fn emotion_metrics(p_e: &[Vec<f64>], gold: &[EmotionId]) -> Result<EmotionScores> {
    if p_e.len() != gold.len() {
        return Err(Error::Shape(format!("{} predictions for {} gold labels", p_e.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(Error::Empty("emotion metrics over zero instances".into()));
    }
    let n_classes = p_e.iter().map(Vec::len).max().unwrap_or(0);
    let n = gold.len() as f64;
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fnn = vec![0usize; n_classes];
    for (p, &g) in p_e.iter().zip(gold) {
        if g >= p.len() {
            return Err(Error::EmotionOutOfRange { id: g, n_emo: p.len() });
        }
        let r = rank_of(p, g);
        top1 += (r < 1) as usize;
        top5 += (r < 5) as usize;
        let pred = crate::detection::argmax(p);
        if pred == g {
            tp[g] += 1;
        } else {
            fp[pred] += 1;
            fnn[g] += 1;
        }
    }
    let mut f1s = Vec::new();
    let mut excluded = Vec::new();
    for c in 0..n_classes {
        if tp[c] + fp[c] + fnn[c] == 0 {
            excluded.push(c);
            continue;
        }
        f1s.push(2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fnn[c]) as f64);
    }
    if !excluded.is_empty() {
        log::debug!("macro-F1 excludes absent classes {excluded:?}");
    }
    Ok(EmotionScores {
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        macro_f1: f1s.iter().sum::<f64>() / f1s.len() as f64,
        excluded,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

/// Set precision, recall and F1 of one instance. An empty prediction has
/// precision 1; an empty gold set has recall 1 only for an empty prediction.
pub fn set_prf(pred: &[TokenId], gold: &[TokenId]) -> Prf {
    let pred: BTreeSet<_> = pred.iter().collect();
    let gold: BTreeSet<_> = gold.iter().collect();
    let hit = pred.intersection(&gold).count() as f64;
    let p = if pred.is_empty() { 1.0 } else { hit / pred.len() as f64 };
    let r = match (gold.is_empty(), pred.is_empty()) {
        (false, _) => hit / gold.len() as f64,
        (true, true) => 1.0,
        (true, false) => 0.0,
    };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    Prf { p, r, f1 }
}

/// Instance-macro token-level P/R/F1.
pub fn token_level_prf(pred: &[Vec<TokenId>], gold: &[Vec<TokenId>]) -> Prf {
    assert_eq!(pred.len(), gold.len(), "prediction and gold lists differ in length");
    if pred.is_empty() {
        return Prf::default();
    }
    let mut acc = Prf::default();
    for (p, g) in pred.iter().zip(gold) {
        let s = set_prf(p, g);
        acc.p += s.p;
        acc.r += s.r;
        acc.f1 += s.f1;
    }
    let n = pred.len() as f64;
    Prf {
        p: acc.p / n,
        r: acc.r / n,
        f1: acc.f1 / n,
    }
}

/// External semantic-similarity scorer, e.g. an embedding-based F-score.
pub trait SemanticScorer: Sync {
    fn name(&self) -> &str;
    fn score(&self, candidate: &str, reference: &str) -> f64;
}

/// Everything produced for one evaluated example.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub id: String,
    pub multi_turn: bool,
    pub gold_emotion: EmotionId,
    pub p_e: Vec<f64>,
    pub pred_emotion: EmotionId,
    pub gold_keywords: Vec<TokenId>,
    pub pred_keywords: Vec<TokenId>,
    pub nll: f64,
    pub tokens: usize,
    pub generated: Vec<TokenId>,
    pub reference: Vec<TokenId>,
}

/// Seed of the `i`-th example's decoding stream.
pub fn instance_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(i as u64)
}

/// Runs detection, perplexity and generation over `examples`. Outcomes keep
/// example order; decoding seeds depend only on the example position.
pub fn run(
    params: &ParamStore,
    cfg: &ModelConfig,
    examples: &[Example],
    index: &PairIndex,
    gen: &GenerationConfig,
    ccfg: &ContrastiveConfig,
) -> Result<Vec<Outcome>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let pred = model::predict(params, cfg, ex, index)?;
            let (nll, tokens) = model::response_nll(params, cfg, ex, &pred)?;
            let g = GenerationConfig {
                seed: instance_seed(gen.seed, i),
                ..gen.clone()
            };
            let guidance = if ccfg.enabled { pred.guidance.as_ref() } else { None };
            let generated = cpplm::generate_guided(params, cfg, &pred.cond, &g, guidance, ccfg)?;
            Ok(Outcome {
                id: ex.id.clone(),
                multi_turn: ex.multi_turn,
                gold_emotion: ex.emotion,
                pred_emotion: pred.detection.emotion,
                pred_keywords: pred.detection.keywords(),
                p_e: pred.detection.p_e,
                gold_keywords: ex.keywords.clone(),
                nll,
                tokens,
                generated,
                reference: ex.response.clone(),
            })
        })
        .collect()
}

/// All reported metrics. Emotion and keyword scores are fractions in
/// `[0, 1]`; Dist-n is ×100.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub slice: Slice,
    pub ppl: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub top1_acc: f64,
    pub top5_acc: f64,
    pub macro_f1: f64,
    pub tl_p: f64,
    pub tl_r: f64,
    pub tl_f1: f64,
    /// Instances in the full set, in its multi-turn subset, and evaluated.
    pub n_all: usize,
    pub n_multiturn: usize,
    pub n_evaluated: usize,
    pub semantic: Option<(String, f64)>,
}

pub fn in_slice(o: &Outcome, slice: Slice) -> bool {
    match slice {
        Slice::All => true,
        Slice::Multiturn => o.multi_turn,
    }
}

pub fn report(
    outcomes: &[Outcome],
    slice: Slice,
    vocab: &Vocab,
    scorer: Option<&dyn SemanticScorer>,
) -> Result<MetricReport> {
    let sel: Vec<&Outcome> = outcomes.iter().filter(|o| in_slice(o, slice)).collect();
    if sel.is_empty() {
        return Err(Error::Empty(format!("no instances in slice {slice:?}")));
    }
    let ppl = perplexity_from(&sel.iter().map(|o| (o.nll, o.tokens)).collect::<Vec<_>>())?;
    let responses: Vec<Vec<TokenId>> = sel.iter().map(|o| o.generated.clone()).collect();
    let (dist1, dist2) = if responses.iter().all(Vec::is_empty) {
        log::warn!("every generated response is empty; Dist-n reported as 0");
        (0.0, 0.0)
    } else {
        (dist_n(&responses, 1)?, dist_n(&responses, 2)?)
    };
    let emo = emotion_metrics(
        &sel.iter().map(|o| o.p_e.clone()).collect::<Vec<_>>(),
        &sel.iter().map(|o| o.gold_emotion).collect::<Vec<_>>(),
    )?;
    let tl = token_level_prf(
        &sel.iter().map(|o| o.pred_keywords.clone()).collect::<Vec<_>>(),
        &sel.iter().map(|o| o.gold_keywords.clone()).collect::<Vec<_>>(),
    );
    let semantic = scorer.map(|s| {
        let total: f64 = sel
            .par_iter()
            .map(|o| s.score(&vocab.decode(&o.generated), &vocab.decode(&o.reference)))
            .collect::<Vec<_>>()
            .iter()
            .sum();
        (s.name().to_string(), total / sel.len() as f64)
    });
    Ok(MetricReport {
        slice,
        ppl,
        dist1,
        dist2,
        top1_acc: emo.top1,
        top5_acc: emo.top5,
        macro_f1: emo.macro_f1,
        tl_p: tl.p,
        tl_r: tl.r,
        tl_f1: tl.f1,
        n_all: outcomes.len(),
        n_multiturn: outcomes.iter().filter(|o| o.multi_turn).count(),
        n_evaluated: sel.len(),
        semantic,
    })
}

impl MetricReport {
    fn rows(&self) -> Vec<(String, String)> {
        let slice = match self.slice {
            Slice::All => "all",
            Slice::Multiturn => "multiturn",
        };
        let mut rows = vec![
            ("slice".to_string(), slice.to_string()),
            ("ppl".into(), format!("{:.4}", self.ppl)),
            ("dist1".into(), format!("{:.4}", self.dist1)),
            ("dist2".into(), format!("{:.4}", self.dist2)),
            ("top1_acc".into(), format!("{:.4}", self.top1_acc)),
            ("top5_acc".into(), format!("{:.4}", self.top5_acc)),
            ("macro_f1".into(), format!("{:.4}", self.macro_f1)),
            ("tl_p".into(), format!("{:.4}", self.tl_p)),
            ("tl_r".into(), format!("{:.4}", self.tl_r)),
            ("tl_f1".into(), format!("{:.4}", self.tl_f1)),
            ("n_all".into(), self.n_all.to_string()),
            ("n_multiturn".into(), self.n_multiturn.to_string()),
            ("n_evaluated".into(), self.n_evaluated.to_string()),
        ];
        if let Some((name, v)) = &self.semantic {
            rows.push((format!("semantic_{name}"), format!("{v:.4}")));
        }
        rows
    }

    /// One `key=value` line per metric.
    pub fn to_kv(&self) -> String {
        self.rows().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn table(&self) -> String {
        let rows = self.rows();
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<w$}  {v:>12}");
        }
        s
    }
}

/// Per-instance detection dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    pub multi_turn: bool,
    pub gold_emotion: EmotionId,
    pub pred_emotion: EmotionId,
    pub p_e: Vec<f64>,
    pub gold_keywords: Vec<String>,
    pub pred_keywords: Vec<String>,
}

/// Per-instance generation dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub emotion: EmotionId,
    pub keywords: Vec<String>,
    pub response: String,
    pub reference: String,
}

fn words(ids: &[TokenId], vocab: &Vocab) -> Vec<String> {
    ids.iter().map(|&t| vocab.word(t).to_string()).collect()
}

impl DetectionRecord {
    pub fn new(o: &Outcome, vocab: &Vocab) -> Self {
        Self {
            id: o.id.clone(),
            multi_turn: o.multi_turn,
            gold_emotion: o.gold_emotion,
            pred_emotion: o.pred_emotion,
            p_e: o.p_e.clone(),
            gold_keywords: words(&o.gold_keywords, vocab),
            pred_keywords: words(&o.pred_keywords, vocab),
        }
    }
}

impl GenerationRecord {
    pub fn new(o: &Outcome, vocab: &Vocab) -> Self {
        Self {
            id: o.id.clone(),
            emotion: o.pred_emotion,
            keywords: words(&o.pred_keywords, vocab),
            response: vocab.decode(&o.generated),
            reference: vocab.decode(&o.reference),
        }
    }
}

/// Serialises records as JSON lines.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Token-level scores recomputed from a detection dump, keyed by word.
pub fn prf_from_records(records: &[DetectionRecord]) -> Prf {
    fn intern<'a>(ids: &mut BTreeMap<&'a str, TokenId>, ws: &'a [String]) -> Vec<TokenId> {
        ws.iter()
            .map(|w| {
                let n = ids.len();
                *ids.entry(w.as_str()).or_insert(n)
            })
            .collect()
    }
    let mut ids = BTreeMap::new();
    let mut pred = Vec::with_capacity(records.len());
    let mut gold = Vec::with_capacity(records.len());
    for r in records {
        pred.push(intern(&mut ids, &r.pred_keywords));
        gold.push(intern(&mut ids, &r.gold_keywords));
    }
    token_level_prf(&pred, &gold)
}
