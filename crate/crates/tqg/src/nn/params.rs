use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor2;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Entry {
    name: String,
    value: Tensor2,
    grad: Tensor2,
    m: Tensor2,
    v: Tensor2,
}

/// Named parameter tensors with paired gradients and Adam moments.
///
/// Iteration order is insertion order everywhere (updates, checkpoints),
/// which keeps training bitwise-reproducible.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor2) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter `{name}`"
        );
        assert!(value.is_finite(), "non-finite init for `{name}`");
        let (r, c) = value.shape();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad: Tensor2::zeros(r, c),
            m: Tensor2::zeros(r, c),
            v: Tensor2::zeros(r, c),
        });
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn get(&self, name: &str) -> &Tensor2 {
        &self.entries[self.index[name]].value
    }

    pub fn set(&mut self, name: &str, value: Tensor2) {
        let e = &mut self.entries[self.index[name]];
        assert_eq!(e.value.shape(), value.shape(), "shape change for `{name}`");
        e.value = value;
    }

    pub fn grad(&self, name: &str) -> &Tensor2 {
        &self.entries[self.index[name]].grad
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad = Tensor2::zeros(e.grad.rows(), e.grad.cols());
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor2) {
        self.entries[self.index[name]].grad.add_assign(delta);
    }

    /// One bias-corrected Adam update over every parameter.
    pub fn adam_step(&mut self, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for e in self.entries.iter_mut() {
            for k in 0..e.value.data().len() {
                let g = e.grad.data()[k];
                let m = BETA1 * e.m.data()[k] + (1.0 - BETA1) * g;
                let v = BETA2 * e.v.data()[k] + (1.0 - BETA2) * g * g;
                e.m.data_mut()[k] = m;
                e.v.data_mut()[k] = v;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                e.value.data_mut()[k] -= update;
            }
        }
    }

    /// Deep copy of the parameter values (grads/moments excluded).
    pub fn snapshot(&self) -> Vec<(String, Tensor2)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[(String, Tensor2)]) {
        for (name, value) in snapshot {
            self.set(name, value.clone());
        }
    }
}

/// Glorot-style uniform init: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut t = Tensor2::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.random_range(-a..a);
    }
    t
}

/// Deterministic stream splitting: mixes `base` with `salt` words into a
/// fresh ChaCha8 stream, so independent draws (per epoch, per root, per
/// view) never share state.
pub fn derive_rng(base: u64, salt: &[u64]) -> ChaCha8Rng {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &s in salt {
        state = splitmix64(state ^ s.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
