//! Keyword-prefixed, emotion-conditioned response decoder.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{GenerationConfig, ModelConfig, Strategy};
use crate::corpus::vocab::{BOS, EOS, PAD, SEN, UNK};
use crate::corpus::{EmotionId, Role, TokenId};
use crate::detection::argmax;
use crate::encoder::{check_emotion, check_tokens, DECODER_POSITION, EMOTION, ROLE, WORD};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamStore;
use crate::tape::{softmax_rows, Graph, Mat, Var};

pub const STACK: &str = "decoder";
pub const LM_BIAS: &str = "lm.bias";

pub fn init<R: Rng>(p: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    nn::init_decoder_stack(p, STACK, cfg.decoder_layers, cfg.d, cfg.ffn_dim, rng);
    p.init_zeros(LM_BIAS, 1, cfg.vocab);
}

/// Position-table rows for `n` tokens. The prefix slot carries no positional
/// term, so table row `j` belongs to sequence position `j + 1`.
fn pos_rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Prefix row followed by `word + position + role(listener) + M_e[emotion]`
/// for every token. `tokens` starts with `[BOS]`.
pub fn build_decoder_input(
    g: &mut Graph,
    cfg: &ModelConfig,
    tokens: &[TokenId],
    emotion: EmotionId,
    prefix: Var,
) -> Result<Var> {
    check_tokens(tokens, cfg)?;
    check_emotion(emotion, cfg)?;
    let n = tokens.len();
    if n == 0 || n > cfg.max_len + 1 {
        return Err(Error::Shape(format!(
            "decoder input of {n} tokens outside 1..={}",
            cfg.max_len + 1
        )));
    }
    let word = g.param(WORD);
    let pos = g.param(DECODER_POSITION);
    let role = g.param(ROLE);
    let emo = g.param(EMOTION);
    let w = g.gather_rows(word, tokens);
    let p = g.gather_rows(pos, &pos_rows(n));
    let r = g.gather_rows(role, &vec![Role::Listener.index(); n]);
    let e = g.gather_rows(emo, &vec![emotion; n]);
    let s = g.add(w, p);
    let s = g.add(s, r);
    let s = g.add(s, e);
    Ok(g.concat_rows(&[prefix, s]))
}

/// Decoder states and vocabulary logits (tied to the word embedding).
pub fn decode(g: &mut Graph, cfg: &ModelConfig, input: Var, memory: Var, deltas: Option<&[Var]>) -> (Var, Var) {
    let hidden = nn::decoder_stack(g, STACK, cfg.decoder_layers, cfg.heads, input, Some(memory), deltas);
    let word = g.param(WORD);
    let bias = g.param(LM_BIAS);
    let logits = g.matmul_t(hidden, word);
    (hidden, g.add_row(logits, bias))
}

/// Summed teacher-forced NLL of `response` followed by `[EOS]`, and the
/// number of predicted tokens. The prefix position carries no loss.
pub fn teacher_forced_nll(
    g: &mut Graph,
    cfg: &ModelConfig,
    prefix: Var,
    emotion: EmotionId,
    response: &[TokenId],
    memory: Var,
) -> Result<(Var, usize)> {
    let response = &response[..response.len().min(cfg.max_len)];
    let mut tokens = Vec::with_capacity(response.len() + 1);
    tokens.push(BOS);
    tokens.extend_from_slice(response);
    let input = build_decoder_input(g, cfg, &tokens, emotion, prefix)?;
    let (_, logits) = decode(g, cfg, input, memory, None);
    let mut targets = vec![None];
    targets.extend(response.iter().map(|&t| Some(t)));
    targets.push(Some(EOS));
    Ok(g.cross_entropy_sum(logits, &targets))
}

/// Fixed conditioning for one generation: context representation `H`, the
/// keyword-sum prefix, and the detected emotion.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub memory: Mat,
    pub prefix: Mat,
    pub emotion: EmotionId,
}

/// Next-token distribution after `generated` (without `[BOS]`).
pub fn step_distribution(
    params: &ParamStore,
    cfg: &ModelConfig,
    cond: &Conditioning,
    generated: &[TokenId],
) -> Result<Vec<f64>> {
    let mut g = Graph::new(params);
    let logits = step_logits(&mut g, cfg, cond, generated, None)?;
    Ok(softmax_rows(g.value(logits), None).row(0).to_vec())
}

/// Last-position logits `[1 × V]` and, through `deltas`, optional per-layer
/// perturbations of the decoder states.
pub fn step_logits(
    g: &mut Graph,
    cfg: &ModelConfig,
    cond: &Conditioning,
    generated: &[TokenId],
    deltas: Option<&[Var]>,
) -> Result<Var> {
    Ok(step_states(g, cfg, cond, generated, deltas)?.1)
}

/// Last-position decoder state `[1 × d]` and logits `[1 × V]`.
pub fn step_states(
    g: &mut Graph,
    cfg: &ModelConfig,
    cond: &Conditioning,
    generated: &[TokenId],
    deltas: Option<&[Var]>,
) -> Result<(Var, Var)> {
    let mut tokens = Vec::with_capacity(generated.len() + 1);
    tokens.push(BOS);
    tokens.extend_from_slice(generated);
    let prefix = g.leaf(cond.prefix.clone());
    let memory = g.leaf(cond.memory.clone());
    let input = build_decoder_input(g, cfg, &tokens, cond.emotion, prefix)?;
    let (hidden, logits) = decode(g, cfg, input, memory, deltas);
    let (t, _) = g.shape(logits);
    let h = g.row_at(hidden, t - 1);
    Ok((h, g.row_at(logits, t - 1)))
}

/// Tokens never emitted by the decoder.
pub const BANNED: [TokenId; 4] = [PAD, SEN, BOS, UNK];

/// Picks the next token from a distribution under `strategy`.
pub fn choose(probs: &[f64], strategy: Strategy, temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
    let mut p: Vec<f64> = probs.to_vec();
    for &b in &BANNED {
        if b < p.len() {
            p[b] = 0.0;
        }
    }
    if let Strategy::Greedy = strategy {
        return argmax(&p);
    }
    if temperature != 1.0 {
        for v in p.iter_mut() {
            *v = v.powf(1.0 / temperature);
        }
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let keep = match strategy {
        Strategy::TopK { k } => k.max(1),
        Strategy::Nucleus { p: top_p } => {
            let total: f64 = p.iter().sum();
            let mut acc = 0.0;
            let mut n = 0;
            for &i in &order {
                acc += p[i] / total;
                n += 1;
                if acc >= top_p {
                    break;
                }
            }
            n
        }
        Strategy::Greedy => unreachable!(),
    };
    let cand = &order[..keep.min(order.len())];
    let weights: Vec<f64> = cand.iter().map(|&i| p[i]).collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => cand[dist.sample(rng)],
        Err(_) => cand[0],
    }
}

/// Autoregressive decoding with a caller-supplied step distribution.
/// Stops at `[EOS]` (not returned) or after `gen.max_len` tokens.
pub fn generate_with<F>(cfg: &ModelConfig, gen: &GenerationConfig, mut step: F) -> Result<Vec<TokenId>>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    let max_len = gen.max_len.min(cfg.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
    let mut out = Vec::new();
    while out.len() < max_len {
        let probs = step(&out)?;
        let t = choose(&probs, gen.strategy, gen.temperature, &mut rng);
        if t == EOS {
            break;
        }
        out.push(t);
    }
    Ok(out)
}

pub fn generate(
    params: &ParamStore,
    cfg: &ModelConfig,
    cond: &Conditioning,
    gen: &GenerationConfig,
) -> Result<Vec<TokenId>> {
    generate_with(cfg, gen, |prefix| step_distribution(params, cfg, cond, prefix))
}

/// Frozen copies of the decoder-side tables and stack used by [`represent`].
pub const FROZEN_WORD: &str = "frozen.embed.word";
pub const FROZEN_POSITION: &str = "frozen.embed.dec_pos";
pub const FROZEN_STACK: &str = "frozen.decoder";

/// Snapshots the word table, decoder positions and decoder stack under the
/// `frozen.` namespace. Training never binds these names.
pub fn freeze(p: &mut ParamStore) {
    let copies: Vec<(String, Mat)> = p
        .iter()
        .filter(|(n, _)| {
            n.as_str() == WORD || n.as_str() == DECODER_POSITION || n.starts_with("decoder.")
        })
        .map(|(n, m)| (format!("frozen.{n}"), m.clone()))
        .collect();
    for (n, m) in copies {
        p.insert(n, m);
    }
}

/// Frozen representation of a token sequence: last state of the frozen
/// decoder over `word + position`, without cross-attention.
pub fn represent(g: &mut Graph, cfg: &ModelConfig, tokens: &[TokenId]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Empty("representation of an empty sequence".into()));
    }
    check_tokens(tokens, cfg)?;
    let n = tokens.len().min(cfg.max_len + 1);
    let tokens = &tokens[tokens.len() - n..];
    let word = g.param(FROZEN_WORD);
    let pos = g.param(FROZEN_POSITION);
    let w = g.gather_rows(word, tokens);
    let p = g.gather_rows(pos, &pos_rows(n));
    let x = g.add(w, p);
    let h = nn::decoder_stack(g, FROZEN_STACK, cfg.decoder_layers, cfg.heads, x, None, None);
    Ok(g.row_at(h, n - 1))
}

/// [`represent`] over `tokens` followed by one soft token whose embedding is
/// `probs · word` for a `1 × vocab` distribution `probs`.
pub fn represent_soft(g: &mut Graph, cfg: &ModelConfig, tokens: &[TokenId], probs: Var) -> Result<Var> {
    check_tokens(tokens, cfg)?;
    let n = (tokens.len() + 1).min(cfg.max_len + 1);
    let tokens = &tokens[tokens.len() + 1 - n..];
    let word = g.param(FROZEN_WORD);
    let pos = g.param(FROZEN_POSITION);
    let soft = g.matmul(probs, word);
    let x = if tokens.is_empty() {
        soft
    } else {
        let w = g.gather_rows(word, tokens);
        g.concat_rows(&[w, soft])
    };
    let p = g.gather_rows(pos, &pos_rows(n));
    let x = g.add(x, p);
    let h = nn::decoder_stack(g, FROZEN_STACK, cfg.decoder_layers, cfg.heads, x, None, None);
    Ok(g.row_at(h, n - 1))
}

/// Sum of the single-token representations of `tokens`.
pub fn represent_set(params: &ParamStore, cfg: &ModelConfig, tokens: &[TokenId]) -> Result<Mat> {
    if tokens.is_empty() {
        return Err(Error::Empty("representation of an empty set".into()));
    }
    let mut s = Mat::zeros((1, cfg.d));
    for &t in tokens {
        s += &represent_value(params, cfg, &[t])?;
    }
    Ok(s)
}

/// [`represent`] evaluated off-tape.
pub fn represent_value(params: &ParamStore, cfg: &ModelConfig, tokens: &[TokenId]) -> Result<Mat> {
    let mut g = Graph::new(params);
    let r = represent(&mut g, cfg, tokens)?;
    Ok(g.value(r).clone())
}
