//! The full model: parameters, per-instance forward pass, losses and
//! inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::corpus::{Dialogue, EmotionId, Instance, Role, TokenId};
use crate::cpplm::{self, Guidance};
use crate::detection::{self, Detection, TRUE};
use crate::encoder::{self, Prepared};
use crate::error::{Error, Result};
use crate::fusion::{self, KeywordGraph};
use crate::generation::{self, Conditioning};
use crate::keypairs::PairIndex;
use crate::params::ParamStore;
use crate::tape::{Graph, Mat, Var};
use crate::transition;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.vocab == 0 {
            return Err(Error::Config("model vocabulary size is zero".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        encoder::init_embeddings(&mut params, &cfg, &mut rng);
        encoder::init(&mut params, &cfg, &mut rng);
        transition::init(&mut params, &cfg, &mut rng);
        fusion::init(&mut params, &cfg, &mut rng);
        detection::init(&mut params, &cfg, &mut rng);
        generation::init(&mut params, &cfg, &mut rng);
        generation::freeze(&mut params);
        cpplm::init(&mut params, &cfg);
        Ok(Self { cfg, params })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextUtterance {
    pub prepared: Prepared,
    pub role: Role,
    pub emotion: EmotionId,
}

/// A model-ready instance: truncated context plus gold targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub context: Vec<ContextUtterance>,
    pub response: Vec<TokenId>,
    pub emotion: EmotionId,
    pub keywords: Vec<TokenId>,
    pub multi_turn: bool,
}

/// Keeps the last `max_utts − 1` context utterances (one global position is
/// reserved for appended nodes) and truncates every utterance.
pub fn prepare_example(inst: &Instance, cfg: &ModelConfig) -> Example {
    let keep = cfg.max_utts - 1;
    let skip = inst.context.len().saturating_sub(keep);
    if skip > 0 {
        log::debug!("{}: dropping {skip} oldest context utterances", inst.id);
    }
    Example {
        id: inst.id.clone(),
        context: inst.context[skip..]
            .iter()
            .map(|u| ContextUtterance {
                prepared: encoder::prepare(&u.tokens, &u.keyword_positions, cfg.max_len),
                role: u.role,
                emotion: u.emotion,
            })
            .collect(),
        response: inst.target.tokens[..inst.target.tokens.len().min(cfg.max_len)].to_vec(),
        emotion: inst.target.emotion,
        keywords: inst.target.keyword_tokens(),
        multi_turn: inst.is_multi_turn(),
    }
}

pub fn examples_from(dialogues: &[Dialogue], cfg: &ModelConfig) -> Vec<Example> {
    dialogues
        .iter()
        .flat_map(crate::corpus::extract_instances)
        .map(|i| prepare_example(&i, cfg))
        .collect()
}

/// Everything computed from the context of one example.
pub struct ContextPass {
    /// `H`, `[(n−1) × d]`.
    pub memory: Var,
    pub emo_logits: Var,
    pub graph: KeywordGraph,
    /// Node representations after graph attention.
    pub nodes: Option<Var>,
    /// `[A × 2]` logits of the appended nodes.
    pub an_logits: Option<Var>,
}

pub fn forward_context(g: &mut Graph, cfg: &ModelConfig, ex: &Example, index: &PairIndex) -> Result<ContextPass> {
    if ex.context.is_empty() {
        return Err(Error::Empty(format!("{}: empty context", ex.id)));
    }
    let fallback = encoder::padded_fallback(g, cfg);
    let mut feats = Vec::with_capacity(ex.context.len());
    for u in &ex.context {
        feats.push(encoder::encode(g, cfg, &u.prepared, u.role, u.emotion)?);
    }
    let rec = transition::recognize(g, &feats, &fallback)?;
    let utts: Vec<Var> = rec.iter().map(|r| r.utt).collect();
    let enhanced = if utts.len() == 1 { utts[0] } else { g.concat_rows(&utts) };
    let utt_enc = fusion::utterance_level_encode(g, cfg, enhanced);

    let kw: Vec<Vec<TokenId>> = ex
        .context
        .iter()
        .map(|u| u.prepared.keyword_tokens.clone())
        .collect();
    let graph = fusion::build_graph(&kw, index, cfg.max_appended);
    let an_init = if graph.appended.is_empty() {
        None
    } else {
        let rows = graph
            .appended_tokens()
            .iter()
            .map(|&t| generation::represent_value(g.params(), cfg, &[t]))
            .collect::<Result<Vec<Mat>>>()?;
        let views: Vec<_> = rows.iter().map(|m| m.view()).collect();
        Some(g.leaf(ndarray::concatenate(ndarray::Axis(0), &views).expect("rows")))
    };
    let keys: Vec<Option<Var>> = rec.iter().map(|r| r.keys.map(|k| k.1)).collect();
    let nodes = fusion::node_inits(g, &graph, &keys, an_init).map(|v| fusion::graph_attention(g, cfg, &graph, v));
    let memory = fusion::fuse(g, &graph, utt_enc, nodes);
    let mp = detection::max_pool(g, memory);
    let emo_logits = detection::emotion_logits(g, mp);
    let an_logits = match nodes {
        Some(v) if !graph.appended.is_empty() => {
            let reps = g.gather_rows(v, &graph.appended);
            Some(detection::keyword_logits(g, reps, mp))
        }
        _ => None,
    };
    Ok(ContextPass {
        memory,
        emo_logits,
        graph,
        nodes,
        an_logits,
    })
}

/// Sum of the given node rows, or a zero row.
pub fn node_sum(g: &mut Graph, nodes: Option<Var>, idx: &[usize], d: usize) -> Var {
    match nodes {
        Some(v) if !idx.is_empty() => {
            let rows = g.gather_rows(v, idx);
            g.sum_rows(rows)
        }
        _ => g.zeros(1, d),
    }
}

/// Unweighted loss components of one example.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub emotion: f64,
    pub keyword: f64,
    pub generation: f64,
    pub total: f64,
}

/// Weighted sum of the emotion cross-entropy, the appended-node
/// cross-entropies summed over nodes, and the token-mean generation
/// cross-entropy, with teacher forcing on the gold emotion and gold keyword
/// nodes.
pub fn example_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    ex: &Example,
    index: &PairIndex,
    weights: [f64; 3],
) -> Result<(Var, LossParts)> {
    encoder::check_emotion(ex.emotion, cfg)?;
    let pass = forward_context(g, cfg, ex, index)?;
    let (emo, _) = g.cross_entropy_sum(pass.emo_logits, &[Some(ex.emotion)]);

    let an_tokens = pass.graph.appended_tokens();
    let gold_nodes: Vec<usize> = pass
        .graph
        .appended
        .iter()
        .zip(&an_tokens)
        .filter(|(_, t)| ex.keywords.contains(t))
        .map(|(&k, _)| k)
        .collect();
    let kw = pass.an_logits.map(|l| {
        let labels: Vec<Option<usize>> = an_tokens
            .iter()
            .map(|t| Some(if ex.keywords.contains(t) { TRUE } else { 1 - TRUE }))
            .collect();
        g.cross_entropy_sum(l, &labels).0
    });

    let prefix = node_sum(g, pass.nodes, &gold_nodes, cfg.d);
    let (nll, n) = generation::teacher_forced_nll(g, cfg, prefix, ex.emotion, &ex.response, pass.memory)?;
    let gen = g.scale(nll, 1.0 / n as f64);

    let we = g.scale(emo, weights[0]);
    let wg = g.scale(gen, weights[2]);
    let mut total = g.add(we, wg);
    if let Some(k) = kw {
        let wk = g.scale(k, weights[1]);
        total = g.add(total, wk);
    }
    let parts = LossParts {
        emotion: g.scalar(emo),
        keyword: kw.map(|k| g.scalar(k)).unwrap_or(0.0),
        generation: g.scalar(gen),
        total: g.scalar(total),
    };
    Ok((total, parts))
}

/// Detection results plus the conditioning and guidance for generation.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub detection: Detection,
    pub cond: Conditioning,
    /// Present when at least one keyword is selected.
    pub guidance: Option<Guidance>,
    pub graph: KeywordGraph,
}

pub fn predict(params: &ParamStore, cfg: &ModelConfig, ex: &Example, index: &PairIndex) -> Result<Prediction> {
    let mut g = Graph::new(params);
    let pass = forward_context(&mut g, cfg, ex, index)?;
    let det = detection::detect(
        &g,
        pass.emo_logits,
        pass.an_logits,
        &pass.graph.appended_tokens(),
        cfg.keyword_threshold,
    );
    let chosen: Vec<usize> = det.selected.iter().map(|&i| pass.graph.appended[i]).collect();
    let prefix = node_sum(&mut g, pass.nodes, &chosen, cfg.d);
    let guidance = if det.selected.is_empty() {
        None
    } else {
        let tokens = pass.graph.appended_tokens();
        let positive = generation::represent_set(params, cfg, &det.keywords())?;
        let pool = (0..tokens.len())
            .filter(|i| !det.selected.contains(i))
            .map(|i| generation::represent_value(params, cfg, &[tokens[i]]))
            .collect::<Result<_>>()?;
        Some(Guidance { positive, pool })
    };
    Ok(Prediction {
        cond: Conditioning {
            memory: g.value(pass.memory).clone(),
            prefix: g.value(prefix).clone(),
            emotion: det.emotion,
        },
        detection: det,
        guidance,
        graph: pass.graph,
    })
}

/// Summed NLL of the gold response (plus `[EOS]`) under the model's own
/// predicted emotion and keywords, and the token count.
pub fn response_nll(params: &ParamStore, cfg: &ModelConfig, ex: &Example, pred: &Prediction) -> Result<(f64, usize)> {
    let mut g = Graph::new(params);
    let prefix = g.leaf(pred.cond.prefix.clone());
    let memory = g.leaf(pred.cond.memory.clone());
    let (nll, n) = generation::teacher_forced_nll(&mut g, cfg, prefix, pred.cond.emotion, &ex.response, memory)?;
    Ok((g.scalar(nll), n))
}
