//! Contrastive plug-and-play guidance: a discriminator trained with in-batch
//! negatives, and decode-time perturbation of decoder states toward the
//! detected keyword set.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ContrastiveConfig, GenerationConfig, ModelConfig};
use crate::corpus::TokenId;
use crate::error::Result;
use crate::generation::{self, generate_with, step_states, Conditioning};
use crate::params::{Adam, ParamStore};
use crate::tape::{softmax_rows, Graph, Mat, Var};

pub const W_R: &str = "disc.w_r";
pub const W_KS: &str = "disc.w_ks";
pub const PREFIX: &str = "disc.";

/// Identity-initialised projection heads for responses and keyword sets.
pub fn init(p: &mut ParamStore, cfg: &ModelConfig) {
    p.insert(W_R, Mat::eye(cfg.d));
    p.insert(W_KS, Mat::eye(cfg.d));
}

/// Mean over rows `a` of `−log softmax_b(r_a·ks_b / τ)[a]`.
pub fn contrastive_loss(g: &mut Graph, r: Var, ks: Var, tau: f64) -> Var {
    let (b, _) = g.shape(r);
    if b < 2 {
        log::warn!("contrastive batch of size {b} is degenerate");
    }
    let s = g.matmul_t(r, ks);
    let s = g.scale(s, 1.0 / tau);
    let targets: Vec<Option<usize>> = (0..b).map(Some).collect();
    let (sum, _) = g.cross_entropy_sum(s, &targets);
    g.scale(sum, 1.0 / b as f64)
}

/// [`contrastive_loss`] after the discriminator heads.
pub fn discriminator_loss(g: &mut Graph, r: Var, ks: Var, tau: f64) -> Var {
    let wr = g.param(W_R);
    let wks = g.param(W_KS);
    let r = g.matmul(r, wr);
    let ks = g.matmul(ks, wks);
    contrastive_loss(g, r, ks, tau)
}

/// Frozen response representation and summed keyword representations of
/// one example.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRep {
    pub r: Mat,
    pub ks: Mat,
}

pub fn pair_rep(params: &ParamStore, cfg: &ModelConfig, response: &[TokenId], keywords: &[TokenId]) -> Result<PairRep> {
    Ok(PairRep {
        r: generation::represent_value(params, cfg, response)?,
        ks: generation::represent_set(params, cfg, keywords)?,
    })
}

fn stack(rows: &[&Mat]) -> Mat {
    let views: Vec<_> = rows.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
}

/// Trains the discriminator heads on frozen representations. Returns the
/// mean loss of every epoch.
pub fn train_discriminator(
    params: &mut ParamStore,
    reps: &[PairRep],
    ccfg: &ContrastiveConfig,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(ccfg.disc_lr);
    let mut order: Vec<usize> = (0..reps.len()).collect();
    let mut history = Vec::with_capacity(ccfg.disc_epochs);
    for _ in 0..ccfg.disc_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(ccfg.batch_size.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let r = stack(&chunk.iter().map(|&i| &reps[i].r).collect::<Vec<_>>());
            let ks = stack(&chunk.iter().map(|&i| &reps[i].ks).collect::<Vec<_>>());
            let mut g = Graph::new(params);
            let (rv, kv) = (g.leaf(r), g.leaf(ks));
            let loss = discriminator_loss(&mut g, rv, kv, ccfg.tau);
            total += g.scalar(loss);
            batches += 1;
            let grads = g
                .param_grads(loss)
                .into_iter()
                .filter(|(n, _)| n.starts_with(PREFIX))
                .collect();
            adam.step(params, &grads);
        }
        history.push(if batches > 0 { total / batches as f64 } else { 0.0 });
    }
    history
}

/// Summed frozen representations of the selected keywords, and the frozen
/// representations of the remaining appended nodes used for negatives.
#[derive(Clone, Debug)]
pub struct Guidance {
    pub positive: Mat,
    pub pool: Vec<Mat>,
}

/// Sum of three pool entries, drawn without replacement when possible.
fn negative(pool: &[Mat], rng: &mut ChaCha8Rng) -> Mat {
    let idx: Vec<usize> = if pool.len() >= 3 {
        rand::seq::index::sample(rng, pool.len(), 3).into_vec()
    } else {
        (0..3).map(|_| rng.random_range(0..pool.len())).collect()
    };
    let mut s = pool[idx[0]].clone();
    for &i in &idx[1..] {
        s += &pool[i];
    }
    s
}

/// Next-token distribution after perturbing the last position's per-layer
/// decoder states along the contrastive gradient. The response side of the
/// loss is the frozen representation of the prefix extended by the expected
/// next token.
pub fn guided_step(
    params: &ParamStore,
    cfg: &ModelConfig,
    cond: &Conditioning,
    generated: &[TokenId],
    guidance: &Guidance,
    ccfg: &ContrastiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let base = generation::step_distribution(params, cfg, cond, generated)?;
    let t = generated.len() + 2;
    let mut deltas: Vec<Mat> = vec![Mat::zeros((t, cfg.d)); cfg.decoder_layers];
    let log_base = Mat::from_shape_fn((1, base.len()), |(_, j)| base[j].max(1e-300).ln());

    for _ in 0..ccfg.n_iter {
        let mut g = Graph::new(params);
        let dv: Vec<Var> = deltas.iter().map(|m| g.leaf(m.clone())).collect();
        let (_, logits) = step_states(&mut g, cfg, cond, generated, Some(&dv))?;
        let p = g.softmax(logits);
        let h = generation::represent_soft(&mut g, cfg, generated, p)?;

        let mut cands = vec![guidance.positive.clone()];
        if !guidance.pool.is_empty() {
            for _ in 0..ccfg.n_neg {
                cands.push(negative(&guidance.pool, rng));
            }
        }
        let views: Vec<&Mat> = cands.iter().collect();
        let ks = g.leaf(stack(&views));
        let wr = g.param(W_R);
        let wks = g.param(W_KS);
        let r = g.matmul(h, wr);
        let ks = g.matmul(ks, wks);
        let s = g.matmul_t(r, ks);
        let s = g.scale(s, 1.0 / ccfg.tau);
        let (loss, _) = g.cross_entropy_sum(s, &[Some(0)]);

        let logp = g.log_softmax(logits);
        let lb = g.leaf(log_base.clone());
        let diff = g.sub(logp, lb);
        let kl = g.mul(p, diff);
        let kl = g.sum(kl);
        let kl = g.scale(kl, ccfg.kl_weight);
        let total = g.add(loss, kl);

        let grads = g.backward(total);
        for (l, d) in deltas.iter_mut().enumerate() {
            let Some(gr) = grads.get(dv[l]) else { continue };
            let last = gr.row(t - 1);
            let norm = last.dot(&last).sqrt();
            if norm > 0.0 {
                let step = last.mapv(|v| v * ccfg.step_size / norm);
                let mut row = d.row_mut(t - 1);
                row -= &step;
            }
        }
    }

    let mut g = Graph::new(params);
    let dv: Vec<Var> = deltas.into_iter().map(|m| g.leaf(m)).collect();
    let (_, logits) = step_states(&mut g, cfg, cond, generated, Some(&dv))?;
    Ok(softmax_rows(g.value(logits), None).row(0).to_vec())
}

/// Seed of the negative-sampling stream, kept apart from token sampling so
/// that guidance never shifts the decoding random stream.
fn negative_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Guided decoding; falls back to plain decoding without a guidance target.
pub fn generate_guided(
    params: &ParamStore,
    cfg: &ModelConfig,
    cond: &Conditioning,
    gen: &GenerationConfig,
    guidance: Option<&Guidance>,
    ccfg: &ContrastiveConfig,
) -> Result<Vec<TokenId>> {
    let Some(guide) = guidance else {
        return generation::generate(params, cfg, cond, gen);
    };
    let mut neg_rng = ChaCha8Rng::seed_from_u64(negative_seed(gen.seed));
    generate_with(cfg, gen, |prefix| {
        guided_step(params, cfg, cond, prefix, guide, ccfg, &mut neg_rng)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_embeddings;
    use crate::gradcheck::{check_leaf_grads, check_param_grads, Tolerance};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy() -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            decoder_layers: 2,
            ffn_dim: 16,
            gat_heads: 2,
            max_len: 6,
            n_emo: 3,
            vocab: 14,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamStore::default();
        init_embeddings(&mut p, &cfg, &mut rng);
        generation::init(&mut p, &cfg, &mut rng);
        generation::freeze(&mut p);
        init(&mut p, &cfg);
        (cfg, p)
    }

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn loss_of(r: &Mat, ks: &Mat, tau: f64) -> f64 {
        let p = ParamStore::default();
        let mut g = Graph::new(&p);
        let (a, b) = (g.leaf(r.clone()), g.leaf(ks.clone()));
        let l = contrastive_loss(&mut g, a, b, tau);
        g.scalar(l)
    }

    #[test]
    fn loss_matches_hand_enumeration() {
        let r = array![[1.0, 0.0], [0.5, 0.5], [0.0, -1.0]];
        let ks = array![[0.2, 0.1], [1.0, 1.0], [-0.3, 0.4]];
        let tau = 0.5;
        let mut want = 0.0;
        for a in 0..3 {
            let s: Vec<f64> = (0..3).map(|b| r.row(a).dot(&ks.row(b)) / tau).collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            want -= (s[a].exp() / z).ln();
        }
        assert!((loss_of(&r, &ks, tau) - want / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_keyword_sets_give_log_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = rand_mat(4, 3, &mut rng);
        let row = rand_mat(1, 3, &mut rng);
        let ks = Mat::from_shape_fn((4, 3), |(_, j)| row[[0, j]]);
        assert!((loss_of(&r, &ks, 0.5) - 4f64.ln()).abs() < 1e-12);
        let one = loss_of(&r.slice(ndarray::s![0..1, ..]).to_owned(), &ks.slice(ndarray::s![0..1, ..]).to_owned(), 0.5);
        assert_eq!(one, 0.0);
    }

    #[test]
    fn orthogonal_negatives_limit() {
        // r_a ⟂ ks_b for b ≠ a and r_a·ks_a = s.
        let s: f64 = 2.0;
        let r = Mat::eye(3);
        let ks = Mat::eye(3) * s;
        let want = -((s / 0.5).exp() / ((s / 0.5).exp() + 2.0)).ln();
        assert!((loss_of(&r, &ks, 0.5) - want).abs() < 1e-12);
        let big = loss_of(&r, &(Mat::eye(3) * 60.0), 0.5);
        assert!(big < 1e-40);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [rand_mat(3, 4, &mut rng), rand_mat(3, 4, &mut rng)];
        let err = check_leaf_grads(&inputs, |g, v| contrastive_loss(g, v[0], v[1], 0.5), 1e-6);
        assert!(err < Tolerance::STRICT, "{err}");

        let cfg = ModelConfig { d: 4, ..ModelConfig::default() };
        let mut p = ParamStore::default();
        init(&mut p, &cfg);
        for n in [W_R, W_KS] {
            let m = p.get_mut(n).unwrap();
            *m += &rand_mat(4, 4, &mut rng).mapv(|v| 0.3 * v);
        }
        let report = check_param_grads(&p, &[PREFIX], 24, 4, 1e-6, |g| {
            let (a, b) = (g.leaf(inputs[0].clone()), g.leaf(inputs[1].clone()));
            discriminator_loss(g, a, b, 0.5)
        });
        assert!(report.coords.len() >= 20);
        assert!(report.max_rel_err() < Tolerance::STRICT, "{:?}", report.worst());
    }

    #[test]
    fn discriminator_training_lowers_the_loss() {
        let (cfg, mut p) = toy();
        let examples: Vec<(Vec<TokenId>, Vec<TokenId>)> = (0..8)
            .map(|i| (vec![5 + i, 6, 13 - i], vec![5 + i]))
            .collect();
        let reps: Vec<PairRep> = examples
            .iter()
            .map(|(r, k)| pair_rep(&p, &cfg, r, k).unwrap())
            .collect();
        let before = p.clone();
        let ccfg = ContrastiveConfig { batch_size: 8, disc_epochs: 60, disc_lr: 0.01, ..ContrastiveConfig::default() };
        let hist = train_discriminator(&mut p, &reps, &ccfg, 0);
        assert!(hist.last().unwrap() < &hist[0]);
        for (n, m) in before.iter() {
            if !n.starts_with(PREFIX) {
                assert_eq!(p.get(n).unwrap(), m, "{n} changed");
            }
        }
    }

    fn setup(cfg: &ModelConfig) -> (Conditioning, Guidance) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cond = Conditioning {
            memory: rand_mat(2, cfg.d, &mut rng),
            prefix: rand_mat(1, cfg.d, &mut rng),
            emotion: 0,
        };
        let guide = Guidance {
            positive: rand_mat(1, cfg.d, &mut rng),
            pool: (0..4).map(|_| rand_mat(1, cfg.d, &mut rng)).collect(),
        };
        (cond, guide)
    }

    #[test]
    fn zero_step_reproduces_the_plain_distribution() {
        let (cfg, p) = toy();
        let (cond, guide) = setup(&cfg);
        let ccfg = ContrastiveConfig { step_size: 0.0, ..ContrastiveConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for prefix in [vec![], vec![7, 8]] {
            let plain = generation::step_distribution(&p, &cfg, &cond, &prefix).unwrap();
            let guided = guided_step(&p, &cfg, &cond, &prefix, &guide, &ccfg, &mut rng).unwrap();
            assert_eq!(plain, guided);
        }
        let gen = GenerationConfig { strategy: crate::config::Strategy::Nucleus { p: 0.9 }, seed: 3, ..GenerationConfig::default() };
        assert_eq!(
            generate_guided(&p, &cfg, &cond, &gen, Some(&guide), &ccfg).unwrap(),
            generation::generate(&p, &cfg, &cond, &gen).unwrap()
        );
        assert_eq!(
            generate_guided(&p, &cfg, &cond, &gen, None, &ContrastiveConfig::default()).unwrap(),
            generation::generate(&p, &cfg, &cond, &gen).unwrap()
        );
    }

    #[test]
    fn guidance_moves_the_distribution_and_leaves_parameters() {
        let (cfg, p) = toy();
        let (cond, guide) = setup(&cfg);
        let sum = p.checksum();
        let ccfg = ContrastiveConfig { step_size: 0.5, ..ContrastiveConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plain = generation::step_distribution(&p, &cfg, &cond, &[7]).unwrap();
        let guided = guided_step(&p, &cfg, &cond, &[7], &guide, &ccfg, &mut rng).unwrap();
        assert_ne!(plain, guided);
        assert!((guided.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(p.checksum(), sum);
        let tiny = Guidance { pool: guide.pool[..1].to_vec(), ..guide };
        guided_step(&p, &cfg, &cond, &[], &tiny, &ccfg, &mut rng).unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn loss_is_nonnegative_and_order_invariant(seed in 0u64..1_000_000, b in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rand_mat(b, 3, &mut rng);
            let ks = rand_mat(b, 3, &mut rng);
            let l = loss_of(&r, &ks, 0.5);
            prop_assert!(l >= 0.0);
            let mut perm: Vec<usize> = (0..b).collect();
            perm.shuffle(&mut rng);
            let pr = Mat::from_shape_fn((b, 3), |(i, j)| r[[perm[i], j]]);
            let pk = Mat::from_shape_fn((b, 3), |(i, j)| ks[[perm[i], j]]);
            prop_assert!((loss_of(&pr, &pk, 0.5) - l).abs() < 1e-9);
        }
    }
}
