use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor2D;
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor2D,
    pub grad: Tensor2D,
    m: Tensor2D,
    v: Tensor2D,
}

/// Named parameter arrays with gradient accumulators and Adam moments.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    seed: u64,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// FNV-1a over the parameter name, mixed with the store seed, gives each
/// parameter its own PRNG stream.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(seed ^ h)
}

pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { params: Vec::new(), index: BTreeMap::new(), seed, step: 0 }
    }

    fn insert(&mut self, name: &str, value: Tensor2D) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let (r, c) = value.shape();
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: Tensor2D::zeros(r, c),
            m: Tensor2D::zeros(r, c),
            v: Tensor2D::zeros(r, c),
        });
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) from the parameter's stream.
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, name));
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor2D::from_vec(rows, cols, data))
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.insert(name, Tensor2D::filled(rows, cols, value))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2D {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2D {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2D {
        &self.params[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor2D) {
        self.params[id.0].grad.add_assign(g);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Overwrite a parameter's value by name, checking shape.
    pub fn load_value(&mut self, name: &str, value: Tensor2D) -> Result<(), NnError> {
        let id = self.id(name).ok_or_else(|| NnError::Checkpoint(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(NnError::Checkpoint(format!(
                "shape mismatch for {name}: expected {:?}, found {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// One bias-corrected Adam update; gradients are cleared afterwards.
    ///
    /// All gradients are checked before anything is updated, so a non-finite
    /// gradient leaves the store untouched.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), NnError> {
        for p in &self.params {
            if let Some(pos) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGradient { param: p.name.clone(), index: pos, value: p.grad.data()[pos] });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = p.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }
}
