//! Minimal deterministic dense-math substrate: 64-bit tensors, reverse-mode
//! differentiation on a tape, masked multi-head attention, losses, Adam, and
//! a binary checkpoint format.

pub mod checkpoint;
pub mod kernels;
pub mod mask;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use mask::BoolMask;
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tape::{bce_loss, Gradients, Tape, Var};
pub use tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("mask row {row} has no visible keys")]
    EmptyMaskRow { row: usize },
    #[error("non-finite gradient in parameter `{param}` at index {index}: {value}")]
    NonFiniteGradient { param: String, index: usize, value: f64 },
    #[error("non-finite activation in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Dense layer parameters `y = x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.uniform(&format!("{name}.w"), fan_in, fan_out, fan_in);
        let b = store.uniform(&format!("{name}.b"), 1, fan_out, fan_in);
        Self { w, b }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.constant(&format!("{name}.w"), fan_in, fan_out, 0.0);
        let b = store.constant(&format!("{name}.b"), 1, fan_out, 0.0);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor2D) -> Tensor2D {
        kernels::linear(x, store.value(self.w), store.value(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.constant(&format!("{name}.gamma"), 1, width, 1.0);
        let beta = store.constant(&format!("{name}.beta"), 1, width, 0.0);
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor2D) -> Tensor2D {
        kernels::layer_norm(x, store.value(self.gamma), store.value(self.beta))
    }
}
