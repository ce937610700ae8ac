//! Utterance-level encoding, keyword graphs with appended candidate nodes,
//! graph attention, and fusion into the context representation `H`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::rc::Rc;

use rand::Rng;

use crate::config::ModelConfig;
use crate::corpus::{TokenId, Vocab};
use crate::encoder::GPE;
use crate::keypairs::PairIndex;
use crate::nn;
use crate::params::ParamStore;
use crate::tape::{Graph, Var};

pub const STACK: &str = "utterance";
pub const FC_FUSE: &str = "fusion.fc_fuse";

fn gat_name(layer: usize, head: usize, part: &str) -> String {
    format!("gat.layer{layer}.head{head}.{part}")
}

pub fn init<R: Rng>(p: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    nn::init_encoder_stack(p, STACK, cfg.utterance_layers, cfg.d, cfg.ffn_dim, rng);
    let dh = cfg.d / cfg.gat_heads;
    let std = (1.0 / cfg.d as f64).sqrt();
    // Residual rounds are unnormalised; shrink the value branch with depth.
    let v_std = std / ((2 * cfg.gat_layers.max(1)) as f64).sqrt();
    for l in 0..cfg.gat_layers {
        for h in 0..cfg.gat_heads {
            for part in ["v", "q", "key"] {
                let s = if part == "v" { v_std } else { std };
                p.init_normal(&gat_name(l, h, part), dh, cfg.d, s, rng);
            }
        }
    }
    p.init_linear(FC_FUSE, 2 * cfg.d, cfg.d, rng);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeSource {
    Utterance(usize),
    Appended,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub token: TokenId,
    pub source: NodeSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeywordGraph {
    pub nodes: Vec<Node>,
    /// Symmetric, no self-loops.
    pub adjacency: Vec<Vec<bool>>,
    /// Node indices of the appended candidates, by descending pmi.
    pub appended: Vec<usize>,
    pub appended_pmi: Vec<f64>,
    pub n_utterances: usize,
}

impl KeywordGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Undirected edges `(a, b)` with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut out = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if self.adjacency[a][b] {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.len();
        (0..n).all(|a| (0..n).all(|b| self.adjacency[a][b] == self.adjacency[b][a]))
    }

    pub fn utterance_nodes(&self, i: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&k| self.nodes[k].source == NodeSource::Utterance(i))
            .collect()
    }

    pub fn appended_tokens(&self) -> Vec<TokenId> {
        self.appended.iter().map(|&k| self.nodes[k].token).collect()
    }

    /// Attention neighbourhood: adjacency plus self, row-major.
    pub fn attention_mask(&self) -> Rc<Vec<bool>> {
        let n = self.len();
        Rc::new(
            (0..n * n)
                .map(|k| k / n == k % n || self.adjacency[k / n][k % n])
                .collect(),
        )
    }

    /// `node`/`edge` lines for inspection.
    pub fn dump(&self, vocab: &Vocab) -> String {
        let mut s = String::new();
        for (k, n) in self.nodes.iter().enumerate() {
            let src = match n.source {
                NodeSource::Utterance(i) => format!("u{i}"),
                NodeSource::Appended => "appended".to_string(),
            };
            let _ = writeln!(s, "node\t{k}\t{}\t{src}", vocab.word(n.token));
        }
        for (a, b) in self.edges() {
            let _ = writeln!(s, "edge\t{a}\t{b}");
        }
        s
    }
}

/// Builds the keyword graph of a context. Keyword nodes come first in
/// utterance order, then appended nodes (tails of pairs headed by a keyword
/// of the last utterance), deduplicated and capped by descending pmi.
pub fn build_graph(context_keywords: &[Vec<TokenId>], index: &PairIndex, cap: usize) -> KeywordGraph {
    let mut nodes = Vec::new();
    for (i, kws) in context_keywords.iter().enumerate() {
        for &t in kws {
            nodes.push(Node {
                token: t,
                source: NodeSource::Utterance(i),
            });
        }
    }
    let n_kw = nodes.len();
    let n_utt = context_keywords.len();

    // tail -> (best pmi, head nodes)
    let mut cands: BTreeMap<TokenId, (f64, Vec<usize>)> = BTreeMap::new();
    if n_utt > 0 {
        for k in 0..n_kw {
            if nodes[k].source != NodeSource::Utterance(n_utt - 1) {
                continue;
            }
            for &(tail, pmi) in index.tails(nodes[k].token) {
                let e = cands.entry(tail).or_insert((f64::NEG_INFINITY, Vec::new()));
                e.0 = e.0.max(pmi);
                if !e.1.contains(&k) {
                    e.1.push(k);
                }
            }
        }
    }
    let mut ranked: Vec<(TokenId, f64, Vec<usize>)> =
        cands.into_iter().map(|(t, (p, h))| (t, p, h)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if ranked.len() > cap {
        log::debug!("capping {} appended nodes at {cap}", ranked.len());
        ranked.truncate(cap);
    }
    if n_kw == 0 && ranked.is_empty() {
        log::warn!("context has no keywords; keyword graph is empty");
    }

    let n = n_kw + ranked.len();
    let mut adjacency = vec![vec![false; n]; n];
    for a in 0..n_kw {
        for b in a + 1..n_kw {
            let (NodeSource::Utterance(i), NodeSource::Utterance(j)) =
                (nodes[a].source, nodes[b].source)
            else {
                unreachable!()
            };
            if i.abs_diff(j) <= 2 {
                adjacency[a][b] = true;
                adjacency[b][a] = true;
            }
        }
    }
    let mut appended = Vec::with_capacity(ranked.len());
    let mut appended_pmi = Vec::with_capacity(ranked.len());
    for (tail, pmi, heads) in ranked {
        let k = nodes.len();
        nodes.push(Node {
            token: tail,
            source: NodeSource::Appended,
        });
        for h in heads {
            adjacency[k][h] = true;
            adjacency[h][k] = true;
        }
        appended.push(k);
        appended_pmi.push(pmi);
    }
    KeywordGraph {
        nodes,
        adjacency,
        appended,
        appended_pmi,
        n_utterances: n_utt,
    }
}

/// `[(n−1) × d]` utterance-level encoding of `h̄ + GPE`.
pub fn utterance_level_encode(g: &mut Graph, cfg: &ModelConfig, enhanced: Var) -> Var {
    let (n, _) = g.shape(enhanced);
    let gpe = g.param(GPE);
    let pos: Vec<usize> = (0..n).collect();
    let p = g.gather_rows(gpe, &pos);
    let x = g.add(enhanced, p);
    nn::encoder_stack(g, STACK, cfg.utterance_layers, cfg.heads, x)
}

/// Initial node matrix: `k̄ + GPE[i]` for keyword nodes of utterance `i`,
/// `an_init + GPE[n]` for appended nodes. `keys[i]` holds utterance `i`'s
/// enhanced keyword rows in node order.
pub fn node_inits(g: &mut Graph, graph: &KeywordGraph, keys: &[Option<Var>], an_init: Option<Var>) -> Option<Var> {
    let gpe = g.param(GPE);
    let mut parts = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        if let Some(k) = *k {
            let (rows, _) = g.shape(k);
            debug_assert_eq!(rows, graph.utterance_nodes(i).len());
            let p = g.gather_rows(gpe, &vec![i; rows]);
            parts.push(g.add(k, p));
        }
    }
    if !graph.appended.is_empty() {
        let a = an_init.expect("appended nodes need initial representations");
        let p = g.gather_rows(gpe, &vec![graph.n_utterances; graph.appended.len()]);
        parts.push(g.add(a, p));
    }
    match parts.len() {
        0 => None,
        1 => Some(parts[0]),
        _ => Some(g.concat_rows(&parts)),
    }
}

/// One graph-attention round. Returns the updated nodes and the attention
/// matrix of each head.
pub fn gat_layer(g: &mut Graph, cfg: &ModelConfig, layer: usize, v: Var, mask: &Rc<Vec<bool>>) -> (Var, Vec<Var>) {
    let mut heads = Vec::with_capacity(cfg.gat_heads);
    let mut alphas = Vec::with_capacity(cfg.gat_heads);
    for h in 0..cfg.gat_heads {
        let wq = g.param(&gat_name(layer, h, "q"));
        let wk = g.param(&gat_name(layer, h, "key"));
        let wv = g.param(&gat_name(layer, h, "v"));
        let q = g.matmul_t(v, wq);
        let k = g.matmul_t(v, wk);
        let val = g.matmul_t(v, wv);
        let s = g.matmul_t(q, k);
        let a = g.masked_softmax(s, mask.clone());
        heads.push(g.matmul(a, val));
        alphas.push(a);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
    (g.add(v, cat), alphas)
}

pub fn graph_attention(g: &mut Graph, cfg: &ModelConfig, graph: &KeywordGraph, v: Var) -> Var {
    let mask = graph.attention_mask();
    let mut v = v;
    for l in 0..cfg.gat_layers {
        v = gat_layer(g, cfg, l, v, &mask).0;
    }
    v
}

/// `h^i = FC_fuse([ḧ^i; Σ v̂ of utterance i])` for every context utterance.
pub fn fuse(g: &mut Graph, graph: &KeywordGraph, utt_enc: Var, nodes: Option<Var>) -> Var {
    let (n, d) = g.shape(utt_enc);
    let mut sums = Vec::with_capacity(n);
    for i in 0..n {
        let idx = graph.utterance_nodes(i);
        let s = match (nodes, idx.is_empty()) {
            (Some(v), false) => {
                let rows = g.gather_rows(v, &idx);
                g.sum_rows(rows)
            }
            _ => g.zeros(1, d),
        };
        sums.push(s);
    }
    let s = if n == 1 { sums[0] } else { g.concat_rows(&sums) };
    let cat = g.concat_cols(&[utt_enc, s]);
    g.linear(cat, FC_FUSE)
}
