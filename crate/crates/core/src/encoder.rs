//! Word-level utterance encoding and feature extraction.

use rand::Rng;

use crate::config::ModelConfig;
use crate::corpus::vocab::{PAD, SEN};
use crate::corpus::{EmotionId, Role, TokenId};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamStore;
use crate::tape::{Graph, Var};

pub const WORD: &str = "embed.word";
pub const POSITION: &str = "embed.pos";
pub const ROLE: &str = "embed.role";
/// The emotion matrix, shared by input embeddings, emotion vectors and the
/// next-emotion head.
pub const EMOTION: &str = "embed.emotion";
pub const GPE: &str = "embed.gpe";
pub const DECODER_POSITION: &str = "embed.dec_pos";
pub const STACK: &str = "encoder";

pub fn init_embeddings<R: Rng>(p: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let std = 0.1;
    p.init_normal(WORD, cfg.vocab, cfg.d, std, rng);
    p.init_normal(POSITION, cfg.max_len, cfg.d, std, rng);
    p.init_normal(ROLE, 2, cfg.d, std, rng);
    p.init_normal(EMOTION, cfg.n_emo, cfg.d, std, rng);
    p.init_normal(GPE, cfg.max_utts, cfg.d, std, rng);
    p.init_normal(DECODER_POSITION, cfg.max_len + 1, cfg.d, std, rng);
}

pub fn init<R: Rng>(p: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    nn::init_encoder_stack(p, STACK, cfg.encoder_layers, cfg.d, cfg.ffn_dim, rng);
}

/// Token sequence with the `[SEN]` prefix, plus the hidden-state rows of the
/// keywords that survived truncation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prepared {
    pub tokens: Vec<TokenId>,
    pub keyword_rows: Vec<usize>,
    /// Keyword tokens in row order.
    pub keyword_tokens: Vec<TokenId>,
}

/// Prefixes `[SEN]` and truncates to `max_len` positions, keeping keyword
/// positions first and then the earliest remaining tokens.
pub fn prepare(tokens: &[TokenId], keyword_positions: &[usize], max_len: usize) -> Prepared {
    let valid: Vec<usize> = keyword_positions
        .iter()
        .copied()
        .filter(|&p| p < tokens.len())
        .collect();
    if valid.len() < keyword_positions.len() {
        log::warn!("dropping keyword positions beyond {} tokens", tokens.len());
    }
    let budget = max_len.saturating_sub(1);
    let kept: Vec<usize> = if tokens.len() <= budget {
        (0..tokens.len()).collect()
    } else {
        log::warn!("truncating utterance of {} tokens to {budget}", tokens.len());
        let mut keep = vec![false; tokens.len()];
        let mut left = budget;
        for &p in &valid {
            if left > 0 {
                keep[p] = true;
                left -= 1;
            }
        }
        for k in keep.iter_mut() {
            if left == 0 {
                break;
            }
            if !*k {
                *k = true;
                left -= 1;
            }
        }
        (0..tokens.len()).filter(|&i| keep[i]).collect()
    };
    let mut out = Prepared {
        tokens: Vec::with_capacity(kept.len() + 1),
        keyword_rows: Vec::new(),
        keyword_tokens: Vec::new(),
    };
    out.tokens.push(SEN);
    for (row, &i) in kept.iter().enumerate() {
        out.tokens.push(tokens[i]);
        if valid.binary_search(&i).is_ok() {
            out.keyword_rows.push(row + 1);
            out.keyword_tokens.push(tokens[i]);
        }
    }
    if out.keyword_rows.len() < valid.len() {
        log::warn!("truncation dropped {} keywords", valid.len() - out.keyword_rows.len());
    }
    out
}

pub fn check_tokens(tokens: &[TokenId], cfg: &ModelConfig) -> Result<()> {
    match tokens.iter().find(|&&t| t >= cfg.vocab) {
        Some(&id) => Err(Error::TokenOutOfVocab { id, vocab: cfg.vocab }),
        None => Ok(()),
    }
}

pub fn check_emotion(e: EmotionId, cfg: &ModelConfig) -> Result<()> {
    if e >= cfg.n_emo {
        return Err(Error::EmotionOutOfRange { id: e, n_emo: cfg.n_emo });
    }
    Ok(())
}

/// `word[t_j] + position[j] + role + M_e[emotion]` for every position.
/// `tokens` must already carry the `[SEN]` prefix.
pub fn embed_utterance(
    g: &mut Graph,
    cfg: &ModelConfig,
    tokens: &[TokenId],
    role: Role,
    emotion: EmotionId,
) -> Result<Var> {
    check_tokens(tokens, cfg)?;
    check_emotion(emotion, cfg)?;
    if tokens.len() > cfg.max_len {
        return Err(Error::Shape(format!(
            "{} positions exceed max_len {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    let n = tokens.len();
    let word = g.param(WORD);
    let pos = g.param(POSITION);
    let role_t = g.param(ROLE);
    let emo_t = g.param(EMOTION);
    let w = g.gather_rows(word, tokens);
    let positions: Vec<usize> = (0..n).collect();
    let p = g.gather_rows(pos, &positions);
    let r = g.gather_rows(role_t, &vec![role.index(); n]);
    let e = g.gather_rows(emo_t, &vec![emotion; n]);
    let s = g.add(w, p);
    let s = g.add(s, r);
    Ok(g.add(s, e))
}

pub fn encode_utterance(g: &mut Graph, cfg: &ModelConfig, emb: Var) -> Var {
    nn::encoder_stack(g, STACK, cfg.encoder_layers, cfg.heads, emb)
}

/// Per-utterance feature vectors on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub hidden: Var,
    /// `ĥ_0`, `[1 × d]`.
    pub utt: Var,
    /// `M_e ĥ_0`, `[1 × n_emo]`.
    pub emo: Var,
    /// Keyword states `[P × d]`, `None` when the utterance has no keywords.
    pub keys: Option<Var>,
}

pub fn extract_features(g: &mut Graph, hidden: Var, keyword_rows: &[usize]) -> Features {
    let (len, _) = g.shape(hidden);
    let rows: Vec<usize> = keyword_rows.iter().copied().filter(|&r| r < len).collect();
    if rows.len() < keyword_rows.len() {
        log::warn!("dropping keyword rows beyond {len} hidden states");
    }
    let utt = g.row_at(hidden, 0);
    let m_e = g.param(EMOTION);
    let emo = g.matmul_t(utt, m_e);
    let keys = (!rows.is_empty()).then(|| g.gather_rows(hidden, &rows));
    Features { hidden, utt, emo, keys }
}

/// Features of an all-`[PAD]` utterance: the first output state serves as
/// utterance vector and single keyword row.
pub fn padded_fallback(g: &mut Graph, cfg: &ModelConfig) -> Features {
    let word = g.param(WORD);
    let pos = g.param(POSITION);
    let w = g.gather_rows(word, &[PAD]);
    let p = g.gather_rows(pos, &[0]);
    let emb = g.add(w, p);
    let hidden = encode_utterance(g, cfg, emb);
    let mut f = extract_features(g, hidden, &[]);
    f.keys = Some(f.utt);
    f
}

/// Embeds, encodes and extracts features of one utterance.
pub fn encode(
    g: &mut Graph,
    cfg: &ModelConfig,
    prepared: &Prepared,
    role: Role,
    emotion: EmotionId,
) -> Result<Features> {
    let emb = embed_utterance(g, cfg, &prepared.tokens, role, emotion)?;
    let hidden = encode_utterance(g, cfg, emb);
    Ok(extract_features(g, hidden, &prepared.keyword_rows))
}
