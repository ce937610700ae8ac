//! Next-emotion and next-keyword detection over the fused context.

use rand::Rng;

use crate::config::ModelConfig;
use crate::corpus::{EmotionId, TokenId};
use crate::encoder::EMOTION;
use crate::params::ParamStore;
use crate::tape::{softmax_rows, Graph, Var};

pub const W_AN: &str = "detection.w_an";
/// Column of the "true" class in keyword logits.
pub const TRUE: usize = 1;

pub fn init<R: Rng>(p: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    p.init_normal(W_AN, 2, 2 * cfg.d, (1.0 / (2 * cfg.d) as f64).sqrt(), rng);
}

/// Coordinatewise max over utterances, `[1 × d]`.
pub fn max_pool(g: &mut Graph, h: Var) -> Var {
    g.max_rows(h)
}

/// Logits `M_e · MP(H)`, `[1 × n_emo]`.
pub fn emotion_logits(g: &mut Graph, mp: Var) -> Var {
    let m_e = g.param(EMOTION);
    g.matmul_t(mp, m_e)
}

/// Two-way logits `W_AN [v̂; MP(H)]` for every appended node, `[A × 2]`.
pub fn keyword_logits(g: &mut Graph, an_reps: Var, mp: Var) -> Var {
    let (a, _) = g.shape(an_reps);
    let tiled = g.gather_rows(mp, &vec![0; a]);
    let cat = g.concat_cols(&[an_reps, tiled]);
    let w = g.param(W_AN);
    g.matmul_t(cat, w)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Indices into `p_true` at or above `threshold`, by descending probability
/// then index.
pub fn select(p_true: &[f64], threshold: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p_true.len()).filter(|&i| p_true[i] >= threshold).collect();
    idx.sort_by(|&a, &b| p_true[b].total_cmp(&p_true[a]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub p_e: Vec<f64>,
    pub emotion: EmotionId,
    /// Appended-node tokens with their true-class probability, node order.
    pub p_k: Vec<(TokenId, f64)>,
    /// Positions into `p_k` of the selected keywords.
    pub selected: Vec<usize>,
}

impl Detection {
    pub fn keywords(&self) -> Vec<TokenId> {
        self.selected.iter().map(|&i| self.p_k[i].0).collect()
    }
}

/// Reads detection outputs off evaluated logits.
pub fn detect(
    g: &Graph,
    emo_logits: Var,
    kw_logits: Option<Var>,
    an_tokens: &[TokenId],
    threshold: f64,
) -> Detection {
    let p_e = softmax_rows(g.value(emo_logits), None).row(0).to_vec();
    let p_true: Vec<f64> = match kw_logits {
        Some(l) => softmax_rows(g.value(l), None).column(TRUE).to_vec(),
        None => Vec::new(),
    };
    let selected = select(&p_true, threshold);
    Detection {
        emotion: argmax(&p_e),
        p_e,
        p_k: an_tokens.iter().copied().zip(p_true).collect(),
        selected,
    }
}
