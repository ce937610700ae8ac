//! Named parameter storage, initialisation, and the Adam optimiser.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::Mat;

/// All learnable tensors of a model, keyed by module-qualified name
/// (e.g. `encoder.layer0.attn.q.w`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    /// Gaussian init with the given std.
    pub fn init_normal<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) {
        let dist = Normal::new(0.0, std).expect("valid std");
        let m = Mat::from_shape_fn((rows, cols), |_| dist.sample(rng));
        self.insert(name, m);
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Mat::zeros((rows, cols)));
    }

    pub fn init_ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Mat::from_elem((rows, cols), 1.0));
    }

    /// Affine layer `{prefix}.w : [fan_in × fan_out]`, `{prefix}.b : [1 × fan_out]`.
    pub fn init_linear<R: Rng>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let std = (1.0 / fan_in as f64).sqrt();
        self.init_normal(&format!("{prefix}.w"), fan_in, fan_out, std, rng);
        self.init_zeros(&format!("{prefix}.b"), 1, fan_out);
    }

    /// Zeroes every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, m) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                m.fill(0.0);
            }
        }
    }

    /// Order-stable checksum over names and exact bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h = fnv1a::OFFSET;
        for (name, m) in &self.tensors {
            h = fnv1a::update(h, name.as_bytes());
            for x in m.iter() {
                h = fnv1a::update(h, &x.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn to_archive(&self) -> BTreeMap<String, TensorRecord> {
        self.tensors
            .iter()
            .map(|(k, m)| {
                (
                    k.clone(),
                    TensorRecord {
                        rows: m.nrows(),
                        cols: m.ncols(),
                        data: m.iter().copied().collect(),
                    },
                )
            })
            .collect()
    }

    pub fn from_archive(archive: &BTreeMap<String, TensorRecord>) -> Result<Self, String> {
        let mut store = Self::default();
        for (k, rec) in archive {
            let m = Mat::from_shape_vec((rec.rows, rec.cols), rec.data.clone())
                .map_err(|e| format!("parameter `{k}`: {e}"))?;
            store.insert(k.clone(), m);
        }
        Ok(store)
    }
}

/// Serialised form of one tensor.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

mod fnv1a {
    pub const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn update(mut h: u64, bytes: &[u8]) -> u64 {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
        h
    }
}

/// First-order adaptive-moment optimiser.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Mat>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Sums gradient maps in iteration order (deterministic reduction).
pub fn accumulate(into: &mut BTreeMap<String, Mat>, other: BTreeMap<String, Mat>) {
    for (k, g) in other {
        match into.get_mut(&k) {
            Some(acc) => *acc += &g,
            None => {
                into.insert(k, g);
            }
        }
    }
}
