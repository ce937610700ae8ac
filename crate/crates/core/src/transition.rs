//! Feature transition recognizer: emotion, meaning and keyword transitions
//! against the previous two utterances.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::Features;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Graph, Var};

pub const W_ETI: &str = "transition.w_eti";
pub const W_UTI: &str = "transition.w_uti";
pub const W_KTI: &str = "transition.w_kti";
pub const W_Q: &str = "transition.w_q";
pub const W_K: &str = "transition.w_k";
pub const FC_UTT: &str = "transition.fc_utt";
pub const FC_KEY: &str = "transition.fc_key";

pub fn init<R: Rng>(p: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let d = cfg.d;
    p.init_normal(W_ETI, d, 4 * cfg.n_emo, (1.0 / (4 * cfg.n_emo) as f64).sqrt(), rng);
    p.init_normal(W_UTI, d, 4 * d, (1.0 / (4 * d) as f64).sqrt(), rng);
    p.init_normal(W_KTI, d, 4 * d, (1.0 / (4 * d) as f64).sqrt(), rng);
    p.init_normal(W_Q, d, d, (1.0 / d as f64).sqrt(), rng);
    p.init_normal(W_K, d, d, (1.0 / d as f64).sqrt(), rng);
    p.init_linear(FC_UTT, 3 * d, d, rng);
    p.init_linear(FC_KEY, 2 * d, d, rng);
}

/// `[(x−x1)²; x⊙x1; (x−x2)²; x⊙x2]` on plain vectors.
pub fn f_com_values(x: &[f64], x1: &[f64], x2: &[f64]) -> Result<Vec<f64>> {
    if x.len() != x1.len() || x.len() != x2.len() {
        return Err(Error::Shape(format!(
            "f_com inputs of lengths {}, {}, {}",
            x.len(),
            x1.len(),
            x2.len()
        )));
    }
    let mut out = Vec::with_capacity(4 * x.len());
    for h in [x1, x2] {
        out.extend(x.iter().zip(h).map(|(a, b)| (a - b) * (a - b)));
        out.extend(x.iter().zip(h).map(|(a, b)| a * b));
    }
    Ok(out)
}

/// Row-wise comparison function on the tape; all three inputs share a shape.
pub fn f_com(g: &mut Graph, x: Var, x1: Var, x2: Var) -> Result<Var> {
    let s = g.shape(x);
    if g.shape(x1) != s || g.shape(x2) != s {
        return Err(Error::Shape(format!(
            "f_com inputs shaped {:?}, {:?}, {:?}",
            s,
            g.shape(x1),
            g.shape(x2)
        )));
    }
    let mut blocks = Vec::with_capacity(4);
    for h in [x1, x2] {
        let diff = g.sub(x, h);
        blocks.push(g.mul(diff, diff));
        blocks.push(g.mul(x, h));
    }
    Ok(g.concat_cols(&blocks))
}

fn transition_info(g: &mut Graph, w: &str, x: Var, x1: Var, x2: Var) -> Result<Var> {
    let c = f_com(g, x, x1, x2)?;
    let w = g.param(w);
    let (_, cols) = g.shape(w);
    if g.shape(c).1 != cols {
        return Err(Error::Shape(format!(
            "comparison vector of width {} against {w:?} expecting {cols}",
            g.shape(c).1
        )));
    }
    let z = g.matmul_t(c, w);
    Ok(g.relu(z))
}

/// `eti = ReLU(W_eti f_com(ê, ê¹, ê²))`, `[1 × d]`.
pub fn emotion_transition(g: &mut Graph, e: Var, e1: Var, e2: Var) -> Result<Var> {
    transition_info(g, W_ETI, e, e1, e2)
}

/// `uti = ReLU(W_uti f_com(ĥ, ĥ¹, ĥ²))`, `[1 × d]`.
pub fn meaning_transition(g: &mut Graph, h: Var, h1: Var, h2: Var) -> Result<Var> {
    transition_info(g, W_UTI, h, h1, h2)
}

/// `h̄ = FC_utt([ĥ_0; eti; uti])`.
pub fn enhance_utterance(g: &mut Graph, h0: Var, eti: Var, uti: Var) -> Var {
    let cat = g.concat_cols(&[h0, eti, uti]);
    g.linear(cat, FC_UTT)
}

/// Cross-encodes current keywords over a history keyword matrix:
/// `softmax((k W_Q)(k_t W_K)ᵀ) k_t`. Returns the encoded rows and the
/// attention weights.
pub fn cross_encode(g: &mut Graph, k: Var, kt: Var) -> (Var, Var) {
    let wq = g.param(W_Q);
    let wk = g.param(W_K);
    let q = g.matmul(k, wq);
    let kk = g.matmul(kt, wk);
    let s = g.matmul_t(q, kk);
    let a = g.softmax(s);
    (g.matmul(a, kt), a)
}

/// Keyword transition information and enhanced keyword vectors, both
/// `[P × d]`.
pub fn keyword_transition(g: &mut Graph, k: Var, k1: Var, k2: Var) -> Result<(Var, Var)> {
    let (c1, _) = cross_encode(g, k, k1);
    let (c2, _) = cross_encode(g, k, k2);
    let kti = transition_info(g, W_KTI, k, c1, c2)?;
    let cat = g.concat_cols(&[k, kti]);
    Ok((kti, g.linear(cat, FC_KEY)))
}

/// Features of the two utterances before index `i` (0-based), substituting
/// the padded fallback for missing slots.
pub fn history(feats: &[Features], i: usize, fallback: &Features) -> (Features, Features) {
    let at = |j: Option<usize>| j.map(|j| feats[j]).unwrap_or(*fallback);
    (at(i.checked_sub(1)), at(i.checked_sub(2)))
}

#[derive(Clone, Copy, Debug)]
pub struct Recognized {
    pub eti: Var,
    pub uti: Var,
    /// `h̄`, `[1 × d]`.
    pub utt: Var,
    /// `(kti, k̄)`, absent for an utterance without keywords.
    pub keys: Option<(Var, Var)>,
}

/// Runs the recognizer over every utterance of a context.
pub fn recognize(g: &mut Graph, feats: &[Features], fallback: &Features) -> Result<Vec<Recognized>> {
    let fb_keys = fallback.keys.unwrap_or(fallback.utt);
    let mut out = Vec::with_capacity(feats.len());
    for (i, f) in feats.iter().enumerate() {
        let (p1, p2) = history(feats, i, fallback);
        let eti = emotion_transition(g, f.emo, p1.emo, p2.emo)?;
        let uti = meaning_transition(g, f.utt, p1.utt, p2.utt)?;
        let utt = enhance_utterance(g, f.utt, eti, uti);
        let keys = match f.keys {
            Some(k) => Some(keyword_transition(
                g,
                k,
                p1.keys.unwrap_or(fb_keys),
                p2.keys.unwrap_or(fb_keys),
            )?),
            None => None,
        };
        out.push(Recognized { eti, uti, utt, keys });
    }
    Ok(out)
}
