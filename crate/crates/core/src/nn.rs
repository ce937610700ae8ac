//! Pre-norm transformer building blocks on the autodiff tape.
//!
//! Every residual branch ends in an output projection (`*.o`, `*.ffn.out`)
//! and every stack ends in a final layer norm (`*.ln_f`). [`make_identity`]
//! zeroes the projections and drops the final norm, which turns a stack into
//! the identity map.

use std::rc::Rc;

use rand::Rng;

use crate::params::ParamStore;
use crate::tape::{Graph, Var};

pub fn init_layer_norm(p: &mut ParamStore, prefix: &str, d: usize) {
    p.init_ones(&format!("{prefix}.g"), 1, d);
    p.init_zeros(&format!("{prefix}.b"), 1, d);
}

pub fn layer_norm(g: &mut Graph, prefix: &str, x: Var) -> Var {
    let gain = g.param(&format!("{prefix}.g"));
    let bias = g.param(&format!("{prefix}.b"));
    g.layer_norm(x, gain, bias)
}

pub fn init_attention<R: Rng>(p: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) {
    for part in ["q", "k", "v", "o"] {
        p.init_linear(&format!("{prefix}.{part}"), d, d, rng);
    }
}

/// Lower-triangular (causal) mask for a `t × t` score matrix.
pub fn causal_mask(t: usize) -> Rc<Vec<bool>> {
    Rc::new((0..t * t).map(|k| k % t <= k / t).collect())
}

/// Scaled dot-product multi-head attention of `xq` over `xkv`.
pub fn attention(
    g: &mut Graph,
    prefix: &str,
    xq: Var,
    xkv: Var,
    heads: usize,
    mask: Option<Rc<Vec<bool>>>,
) -> Var {
    let (_, d) = g.shape(xq);
    assert_eq!(d % heads, 0, "d={d} not divisible by heads={heads}");
    let dh = d / heads;
    let q = g.linear(xq, &format!("{prefix}.q"));
    let k = g.linear(xkv, &format!("{prefix}.k"));
    let v = g.linear(xkv, &format!("{prefix}.v"));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let s = g.matmul_t(qh, kh);
        let s = g.scale(s, scale);
        let a = match &mask {
            Some(m) => g.masked_softmax(s, m.clone()),
            None => g.softmax(s),
        };
        outs.push(g.matmul(a, vh));
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    g.linear(cat, &format!("{prefix}.o"))
}

pub fn init_ffn<R: Rng>(p: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut R) {
    p.init_linear(&format!("{prefix}.in"), d, hidden, rng);
    p.init_linear(&format!("{prefix}.out"), hidden, d, rng);
}

pub fn ffn(g: &mut Graph, prefix: &str, x: Var) -> Var {
    let h = g.linear(x, &format!("{prefix}.in"));
    let h = g.gelu(h);
    g.linear(h, &format!("{prefix}.out"))
}

pub fn init_encoder_stack<R: Rng>(
    p: &mut ParamStore,
    prefix: &str,
    layers: usize,
    d: usize,
    ffn_dim: usize,
    rng: &mut R,
) {
    for l in 0..layers {
        let lp = format!("{prefix}.layer{l}");
        init_layer_norm(p, &format!("{lp}.ln1"), d);
        init_attention(p, &format!("{lp}.self"), d, rng);
        init_layer_norm(p, &format!("{lp}.ln2"), d);
        init_ffn(p, &format!("{lp}.ffn"), d, ffn_dim, rng);
    }
    init_layer_norm(p, &format!("{prefix}.ln_f"), d);
}

/// Final norm of a stack, skipped when the stack has none.
fn final_norm(g: &mut Graph, prefix: &str, x: Var) -> Var {
    let name = format!("{prefix}.ln_f");
    if g.params().contains(&format!("{name}.g")) {
        layer_norm(g, &name, x)
    } else {
        x
    }
}

/// Bidirectional encoder stack: `x ↦ x + attn(ln(x)); x ↦ x + ffn(ln(x))`.
pub fn encoder_stack(g: &mut Graph, prefix: &str, layers: usize, heads: usize, mut x: Var) -> Var {
    for l in 0..layers {
        let lp = format!("{prefix}.layer{l}");
        let h = layer_norm(g, &format!("{lp}.ln1"), x);
        let a = attention(g, &format!("{lp}.self"), h, h, heads, None);
        x = g.add(x, a);
        let h = layer_norm(g, &format!("{lp}.ln2"), x);
        let f = ffn(g, &format!("{lp}.ffn"), h);
        x = g.add(x, f);
    }
    final_norm(g, prefix, x)
}

pub fn init_decoder_stack<R: Rng>(
    p: &mut ParamStore,
    prefix: &str,
    layers: usize,
    d: usize,
    ffn_dim: usize,
    rng: &mut R,
) {
    for l in 0..layers {
        let lp = format!("{prefix}.layer{l}");
        init_layer_norm(p, &format!("{lp}.ln1"), d);
        init_attention(p, &format!("{lp}.self"), d, rng);
        init_layer_norm(p, &format!("{lp}.ln2"), d);
        init_attention(p, &format!("{lp}.cross"), d, rng);
        init_layer_norm(p, &format!("{lp}.ln3"), d);
        init_ffn(p, &format!("{lp}.ffn"), d, ffn_dim, rng);
    }
    init_layer_norm(p, &format!("{prefix}.ln_f"), d);
}

/// Causal decoder stack. `memory` enables cross-attention; without it the
/// cross-attention sublayer is skipped. `deltas[l]`, when given, is added to
/// the output of layer `l` (same shape as `x`).
pub fn decoder_stack(
    g: &mut Graph,
    prefix: &str,
    layers: usize,
    heads: usize,
    mut x: Var,
    memory: Option<Var>,
    deltas: Option<&[Var]>,
) -> Var {
    let (t, _) = g.shape(x);
    let mask = causal_mask(t);
    for l in 0..layers {
        let lp = format!("{prefix}.layer{l}");
        let h = layer_norm(g, &format!("{lp}.ln1"), x);
        let a = attention(g, &format!("{lp}.self"), h, h, heads, Some(mask.clone()));
        x = g.add(x, a);
        if let Some(mem) = memory {
            let h = layer_norm(g, &format!("{lp}.ln2"), x);
            let c = attention(g, &format!("{lp}.cross"), h, mem, heads, None);
            x = g.add(x, c);
        }
        let h = layer_norm(g, &format!("{lp}.ln3"), x);
        let f = ffn(g, &format!("{lp}.ffn"), h);
        x = g.add(x, f);
        if let Some(ds) = deltas {
            x = g.add(x, ds[l]);
        }
    }
    final_norm(g, prefix, x)
}

/// Zeroes every residual-branch output projection under `prefix` and removes
/// the final norm.
pub fn make_identity(p: &mut ParamStore, prefix: &str) {
    p.remove(&format!("{prefix}.ln_f.g"));
    p.remove(&format!("{prefix}.ln_f.b"));
    let names: Vec<String> = p
        .names()
        .filter(|n| {
            n.starts_with(prefix)
                && (n.contains(".self.o.")
                    || n.contains(".cross.o.")
                    || n.contains(".ffn.out."))
        })
        .cloned()
        .collect();
    for n in names {
        p.get_mut(&n).expect("listed").fill(0.0);
    }
}
