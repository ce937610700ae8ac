//! Central finite-difference checks for analytic gradients.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::ParamStore;
use crate::tape::{Graph, Mat, Var};

pub struct Tolerance;

impl Tolerance {
    /// Maximum relative error accepted at 64-bit precision.
    pub const STRICT: f64 = 1e-4;
}

/// Denominator floor so that coordinates with a vanishing gradient are judged
/// on absolute error instead of amplified round-off.
const DENOM_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Checks every coordinate of every input of `f`. Returns the maximum
/// relative error.
pub fn check_leaf_grads<F>(inputs: &[Mat], f: F, eps: f64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    check_leaf_grads_with(&ParamStore::default(), inputs, f, eps)
}

/// [`check_leaf_grads`] with parameters available to `f`.
pub fn check_leaf_grads_with<F>(store: &ParamStore, inputs: &[Mat], f: F, eps: f64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |inputs: &[Mat]| {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut worst: f64 = 0.0;
    for (k, m) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Mat::zeros(m.dim()));
        for idx in 0..m.len() {
            let (i, j) = (idx / m.ncols(), idx % m.ncols());
            let mut plus = inputs.to_vec();
            plus[k][[i, j]] += eps;
            let mut minus = inputs.to_vec();
            minus[k][[i, j]] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[[i, j]], numeric));
        }
    }
    worst
}

/// One sampled coordinate of a parameter check.
#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Samples `n_coords` coordinates from the parameters whose names start with
/// any of `prefixes` and compares the analytic gradient of `loss` against
/// central differences with step `eps`.
pub fn check_param_grads<F>(
    params: &ParamStore,
    prefixes: &[&str],
    n_coords: usize,
    seed: u64,
    eps: f64,
    loss: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
{
    let mut g = Graph::new(params);
    let out = loss(&mut g);
    let grads = g.param_grads(out);

    let candidates: Vec<&String> = grads
        .keys()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .collect();
    assert!(
        !candidates.is_empty(),
        "no bound parameter matches {prefixes:?}"
    );

    let eval = |p: &ParamStore| {
        let mut g = Graph::new(p);
        let out = loss(&mut g);
        g.scalar(out)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(n_coords);
    let mut work = params.clone();
    for _ in 0..n_coords {
        let name = (*candidates.choose(&mut rng).expect("nonempty")).clone();
        let shape = params.get(&name).expect("bound param").dim();
        let (row, col) = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
        let orig = params.get(&name).unwrap()[[row, col]];

        work.get_mut(&name).unwrap()[[row, col]] = orig + eps;
        let fp = eval(&work);
        work.get_mut(&name).unwrap()[[row, col]] = orig - eps;
        let fm = eval(&work);
        work.get_mut(&name).unwrap()[[row, col]] = orig;

        let numeric = (fp - fm) / (2.0 * eps);
        let analytic = grads[&name][[row, col]];
        coords.push(CoordCheck {
            rel_err: relative_error(analytic, numeric),
            param: name,
            row,
            col,
            analytic,
            numeric,
        });
    }
    GradCheckReport { coords }
}
