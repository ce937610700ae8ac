//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass. Named
//! parameters are bound lazily from a [`ParamStore`] the first time they are
//! requested, so a backward pass yields gradients keyed by parameter name.
//! Everything is a 2-D matrix; vectors are `1 × n` rows.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::ParamStore;

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `x + b` with `b` a `1 × n` row broadcast over every row of `x`.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    /// Row softmax; masked-out entries get probability zero.
    Softmax(Var),
    LogSoftmax(Var),
    /// Row layer normalisation; stores the normalised input and inverse std.
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    SumRows(Var),
    MaxRows(Var, Vec<usize>),
    Sum(Var),
    /// Sum of selected `(row, col)` entries.
    Pick(Var, Rc<Vec<(usize, usize)>>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: &'p ParamStore,
    bound: HashMap<String, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            params,
            bound: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant (or externally managed) input.
    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(Mat::zeros((rows, cols)))
    }

    pub fn row(&mut self, v: &[f64]) -> Var {
        self.leaf(Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape"))
    }

    /// Binds the named parameter, panicking if it does not exist.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.push(value, Op::Leaf);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (_, c) = self.shape(x);
        assert_eq!(self.shape(b), (1, c), "add_row expects a 1×{c} row");
        let v = self.value(x) + self.value(b);
        self.push(v, Op::AddRow(x, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a), None);
        self.push(v, Op::Softmax(a))
    }

    /// Row softmax restricted to entries where `mask` (row-major) is true.
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Var {
        let v = softmax_rows(self.value(a), Some(&mask));
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|z| z - lse);
        }
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (r, c) = xv.dim();
        let mut xhat = Mat::zeros((r, c));
        let mut rstd = Vec::with_capacity(r);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd.push(rs);
            for j in 0..c {
                xhat[[i, j]] = (row[j] - mean) * rs;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, len))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn row_at(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, 1)
    }

    /// Rows of `table` selected by `idx` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Mat::zeros((idx.len(), t.ncols()));
        for (i, &k) in idx.iter().enumerate() {
            v.row_mut(i).assign(&t.row(k));
        }
        self.push(v, Op::GatherRows(table, Rc::new(idx.to_vec())))
    }

    /// Column-wise sum, giving a `1 × n` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    /// Column-wise max (max pooling over rows), giving a `1 × n` row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dim();
        assert!(r > 0, "max_rows on empty matrix");
        let mut arg = vec![0usize; c];
        let mut v = Mat::zeros((1, c));
        for j in 0..c {
            let mut best = 0;
            for i in 1..r {
                if x[[i, j]] > x[[best, j]] {
                    best = i;
                }
            }
            arg[j] = best;
            v[[0, j]] = x[[best, j]];
        }
        self.push(v, Op::MaxRows(a, arg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Sum of the selected entries, as a `1 × 1` scalar.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let total: f64 = at.iter().map(|&(i, j)| x[[i, j]]).sum();
        self.push(Mat::from_elem((1, 1), total), Op::Pick(a, Rc::new(at.to_vec())))
    }

    /// Convenience: `x · W + b` where `W` and `b` are named parameters
    /// `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Mean token cross-entropy of `logits` rows against `targets`; rows with
    /// `None` are excluded. Returns `(sum_nll, count)`; the sum is a scalar var.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> (Var, usize) {
        let logp = self.log_softmax(logits);
        let at: Vec<(usize, usize)> = targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| (i, t)))
            .collect();
        let n = at.len();
        let picked = self.pick(logp, &at);
        (self.scale(picked, -1.0), n)
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(x, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, g.clone());
                    acc(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *gi *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| g[[i, j]] * y[[i, j]]).sum();
                        for j in 0..y.ncols() {
                            ga[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for i in 0..y.nrows() {
                        let gs: f64 = g.row(i).sum();
                        for j in 0..y.ncols() {
                            ga[[i, j]] -= y[[i, j]].exp() * gs;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gain_v = self.value(*gain);
                    let ggain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gxhat = &g * gain_v;
                    let (r, c) = xhat.dim();
                    let mut gx = Mat::zeros((r, c));
                    let n = c as f64;
                    for i in 0..r {
                        let mean_g: f64 = gxhat.row(i).sum() / n;
                        let mean_gx: f64 =
                            (0..c).map(|j| gxhat[[i, j]] * xhat[[i, j]]).sum::<f64>() / n;
                        for j in 0..c {
                            gx[[i, j]] =
                                rstd[i] * (gxhat[[i, j]] - mean_g - xhat[[i, j]] * mean_gx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + *len, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start, len) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(table, idx) => {
                    let mut gt = Mat::zeros(self.value(*table).dim());
                    for (i, &k) in idx.iter().enumerate() {
                        let mut row = gt.row_mut(k);
                        row += &g.row(i);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::SumRows(a) => {
                    let (r, _) = self.value(*a).dim();
                    let ga = g
                        .broadcast((r, g.ncols()))
                        .expect("sum_rows broadcast")
                        .to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::MaxRows(a, arg) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    for (j, &i) in arg.iter().enumerate() {
                        ga[[i, j]] = g[[0, j]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Pick(a, at) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    for &(i, j) in at.iter() {
                        ga[[i, j]] += g[[0, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
            }
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    /// Gradients of `loss` for every parameter bound in this graph.
    pub fn param_grads(&self, loss: Var) -> BTreeMap<String, Mat> {
        let grads = self.backward(loss);
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(self.value(v).dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Row softmax of a plain matrix, optionally masked.
pub fn softmax_rows(x: &Mat, mask: Option<&[bool]>) -> Mat {
    let (r, c) = x.dim();
    let mut out = Mat::zeros((r, c));
    for i in 0..r {
        let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
        let m = (0..c)
            .filter(|&j| keep(j))
            .map(|j| x[[i, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            continue;
        }
        let mut z = 0.0;
        for j in 0..c {
            if keep(j) {
                let e = (x[[i, j]] - m).exp();
                out[[i, j]] = e;
                z += e;
            }
        }
        for j in 0..c {
            out[[i, j]] /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_leaf_grads, Tolerance};
    use ndarray::array;

    fn store() -> ParamStore {
        ParamStore::default()
    }

    #[test]
    fn softmax_rows_sum_to_one_and_respect_mask() {
        let x = array![[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]];
        let mask = vec![true, false, true, true, true, false];
        let y = softmax_rows(&x, Some(&mask));
        assert_eq!(y[[0, 1]], 0.0);
        assert_eq!(y[[1, 2]], 0.0);
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_rows_picks_column_maxima() {
        let p = store();
        let mut g = Graph::new(&p);
        let x = g.leaf(array![[1.0, 5.0], [3.0, -2.0]]);
        let m = g.max_rows(x);
        assert_eq!(g.value(m), &array![[3.0, 5.0]]);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let inputs = vec![
            array![[0.3, -0.7, 1.1], [0.9, 0.2, -0.4]],
            array![[0.5, 0.1], [-0.3, 0.8], [0.6, -0.2]],
            array![[0.2, -0.1, 0.4]],
            array![[1.2, -0.5, 0.7], [0.1, 0.3, -0.9]],
        ];
        let f = |g: &mut Graph, v: &[Var]| {
            let ab = g.matmul(v[0], v[1]);
            let abt = g.matmul_t(v[0], v[3]);
            let ln = g.layer_norm(v[0], v[2], v[2]);
            let sm = g.softmax(abt);
            let mask = Rc::new(vec![true, false, true, true]);
            let msm = g.masked_softmax(abt, mask);
            let ls = g.log_softmax(ab);
            let ge = g.gelu(v[3]);
            let re = g.relu(v[3]);
            let ex = g.exp(ab);
            let cat = g.concat_cols(&[ab, sm]);
            let rows = g.concat_rows(&[v[0], v[3]]);
            let sl = g.slice_rows(rows, 1, 2);
            let sc = g.slice_cols(sl, 1, 2);
            let ga = g.gather_rows(v[1], &[2, 0, 2]);
            let sr = g.sum_rows(ga);
            let mr = g.max_rows(v[1]);
            let ar = g.add_row(v[0], v[2]);
            let m = g.mul(ar, ln);
            let d = g.sub(ge, re);
            let p1 = g.pick(ls, &[(0, 1), (1, 0)]);
            let parts = [
                g.sum(m),
                g.sum(d),
                g.sum(cat),
                g.sum(sc),
                g.sum(sr),
                g.sum(mr),
                g.sum(ex),
                g.sum(msm),
                p1,
            ];
            let mut total = parts[0];
            for (k, &p) in parts.iter().enumerate().skip(1) {
                let w = g.scale(p, 0.3 + 0.1 * k as f64);
                total = g.add(total, w);
            }
            let sq = g.mul(total, total);
            g.add(sq, total)
        };
        let err = check_leaf_grads(&inputs, f, 1e-6);
        assert!(err < Tolerance::STRICT, "max relative error {err}");
    }
}
