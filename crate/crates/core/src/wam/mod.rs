//! Toy world-action model: from the current observation latent and a learned
//! task embedding, regress an `H`-step action chunk and the `H/r` future
//! observation latents that go with it.

mod sampler;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use sampler::{check_horizon, sample_training_window, slot_time, time_slot, window_indices, TrainWindow};

use crate::nn::{AdamConfig, Checkpoint, Linear, NnError, ParamId, ParamStore, Tape, Tensor2D, Var};
use crate::sim::{Action, EpisodeRecord, Latent, TaskId, ACTION_DIM, GRIPPER_DIM, LATENT_DIM};
use crate::verifier::KvCache;

/// Per-dimension scale between env actions and the model's output space.
/// A power of two so that normalizing and decoding round-trip exactly.
const MOTION_SCALE: f64 = 0.015625;

#[derive(Debug, thiserror::Error)]
pub enum WamError {
    #[error("horizon {h} is not a positive multiple of ratio {r}")]
    Horizon { h: usize, r: usize },
    #[error("bad training window: {0}")]
    Window(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite loss on window {episode}:{s} (loss_act={loss_act}, loss_vid={loss_vid})")]
    NonFiniteLoss { episode: usize, s: usize, loss_act: f64, loss_vid: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("bad checkpoint metadata: {0}")]
    Meta(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WamConfig {
    pub horizon: usize,
    pub ratio: usize,
    pub latent_dim: usize,
    pub action_dim: usize,
    pub n_semantic: usize,
    pub width: usize,
    pub hidden_layers: usize,
    /// Weight on the latent-prediction term; 0 trains actions only.
    pub latent_weight: f64,
}

impl Default for WamConfig {
    fn default() -> Self {
        Self {
            horizon: 32,
            ratio: 4,
            latent_dim: LATENT_DIM,
            action_dim: ACTION_DIM,
            n_semantic: 2,
            width: 64,
            hidden_layers: 3,
            latent_weight: 1.0,
        }
    }
}

impl WamConfig {
    pub fn validate(&self) -> Result<(), WamError> {
        check_horizon(self.horizon, self.ratio)?;
        if self.hidden_layers == 0 || self.width == 0 {
            return Err(WamError::Dimension("trunk needs at least one hidden layer".into()));
        }
        if self.latent_dim != LATENT_DIM || self.action_dim != ACTION_DIM {
            return Err(WamError::Dimension(format!(
                "model dims ({}, {}) do not match environment ({LATENT_DIM}, {ACTION_DIM})",
                self.latent_dim, self.action_dim
            )));
        }
        Ok(())
    }

    pub fn n_latents(&self) -> usize {
        self.horizon / self.ratio
    }
}

/// One model inference: actions for chunk steps `1..=H`, latents for chunk
/// steps `r, 2r, .., H`, semantic tokens, and the conditioning frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictedRollout {
    pub task: TaskId,
    /// Absolute episode step at which the chunk was predicted.
    pub origin_step: usize,
    pub ratio: usize,
    pub conditioning: Latent,
    pub actions: Vec<Action>,
    pub latents: Vec<Latent>,
    pub semantic_tokens: Vec<Latent>,
    #[serde(skip)]
    pub kv_cache: Option<KvCache>,
}

impl PredictedRollout {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Predicted frame at chunk-relative time `dt`; `dt = 0` is the
    /// conditioning observation.
    pub fn latent_at(&self, dt: usize) -> Option<&Latent> {
        if dt == 0 {
            return Some(&self.conditioning);
        }
        time_slot(dt, self.ratio).and_then(|j| self.latents.get(j))
    }

    pub fn validate(&self) -> Result<(), WamError> {
        check_horizon(self.horizon(), self.ratio)?;
        if self.latents.len() != self.horizon() / self.ratio {
            return Err(WamError::Dimension(format!(
                "{} latents for horizon {} and ratio {}",
                self.latents.len(),
                self.horizon(),
                self.ratio
            )));
        }
        if self.actions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(WamError::Dimension("non-finite predicted action".into()));
        }
        Ok(())
    }
}

/// Anything that maps an observation to a predicted chunk.
pub trait WorldActionModel: Sync {
    fn horizon(&self) -> usize;
    fn ratio(&self) -> usize;
    fn predict(&self, obs: &Latent, task: TaskId, origin_step: usize) -> Result<PredictedRollout, WamError>;
    /// Task-conditioning tokens attached to every rollout.
    fn semantic_tokens(&self, task: TaskId) -> Vec<Latent>;
    /// Multiply-accumulate count of one forward pass.
    fn forward_flops(&self) -> u64 {
        0
    }
}

#[derive(Clone, Debug)]
pub struct ToyWam {
    cfg: WamConfig,
    store: ParamStore,
    task_table: ParamId,
    trunk: Vec<Linear>,
    action_head: Linear,
    latent_head: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WamLoss {
    pub loss_act: f64,
    pub loss_vid: f64,
}

impl ToyWam {
    pub fn new(cfg: WamConfig, seed: u64) -> Result<Self, WamError> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let sem = cfg.n_semantic * cfg.latent_dim;
        let task_table = store.uniform("wam.task_table", TaskId::ALL.len(), sem.max(1), 4);
        let mut trunk = Vec::new();
        let mut fan_in = cfg.latent_dim + sem;
        for l in 0..cfg.hidden_layers {
            trunk.push(Linear::new(&mut store, &format!("wam.trunk{l}"), fan_in, cfg.width));
            fan_in = cfg.width;
        }
        let action_head = Linear::new(&mut store, "wam.action_head", fan_in, cfg.horizon * cfg.action_dim);
        let latent_head = Linear::new(&mut store, "wam.latent_head", fan_in, cfg.n_latents() * cfg.latent_dim);
        Ok(Self { cfg, store, task_table, trunk, action_head, latent_head })
    }

    pub fn config(&self) -> &WamConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn decode_actions(&self, row: &[f64]) -> Vec<Action> {
        row.chunks(self.cfg.action_dim)
            .map(|c| {
                let mut a = [0.0; ACTION_DIM];
                for (d, v) in a.iter_mut().enumerate() {
                    *v = c[d] * action_scale(d);
                }
                a
            })
            .collect()
    }

    /// Forward pass for a batch. The first trunk layer's weight is split
    /// between the observation rows and the task-table rows so that the task
    /// table receives gradients; prediction uses the same path.
    fn forward(&self, tape: &mut Tape, obs: Tensor2D, tasks: &[usize]) -> (Var, Var) {
        let first = &self.trunk[0];
        let obs_dim = self.cfg.latent_dim;
        let in_rows = self.store.value(first.w).rows();
        let wv = tape.param(&self.store, first.w);
        let obs = tape.input(obs);
        let w_obs = tape.gather_rows(wv, &(0..obs_dim).collect::<Vec<_>>());
        let mut h = tape.matmul(obs, w_obs);
        if self.cfg.n_semantic > 0 {
            let table = tape.param(&self.store, self.task_table);
            let sem = tape.gather_rows(table, tasks);
            let w_sem = tape.gather_rows(wv, &(obs_dim..in_rows).collect::<Vec<_>>());
            let hs = tape.matmul(sem, w_sem);
            h = tape.add(h, hs);
        }
        let b = tape.param(&self.store, first.b);
        h = tape.add_bias(h, b);
        h = tape.gelu(h);
        for layer in &self.trunk[1..] {
            let z = layer.forward(tape, &self.store, h);
            h = tape.gelu(z);
        }
        let a = self.action_head.forward(tape, &self.store, h);
        let o = self.latent_head.forward(tape, &self.store, h);
        (a, o)
    }

    fn check_batch(&self, batch: &[TrainWindow]) -> Result<(), WamError> {
        if batch.is_empty() {
            return Err(WamError::EmptyBatch);
        }
        for w in batch {
            if w.actions.len() != self.cfg.horizon || w.latents.len() != self.cfg.n_latents() || w.conditioning.dim() != self.cfg.latent_dim
            {
                return Err(WamError::Window(format!(
                    "window {}:{} has {} actions / {} latents",
                    w.episode,
                    w.s,
                    w.actions.len(),
                    w.latents.len()
                )));
            }
        }
        Ok(())
    }

    /// Inputs and normalized targets for a batch.
    fn batch_tensors(&self, batch: &[TrainWindow]) -> (Tensor2D, Vec<usize>, Tensor2D, Tensor2D) {
        let (ad, ld) = (self.cfg.action_dim, self.cfg.latent_dim);
        let mut x = Tensor2D::zeros(batch.len(), ld);
        let mut ta = Tensor2D::zeros(batch.len(), self.cfg.horizon * ad);
        let mut to = Tensor2D::zeros(batch.len(), self.cfg.n_latents() * ld);
        for (b, w) in batch.iter().enumerate() {
            x.row_mut(b).copy_from_slice(&w.conditioning.0);
            let arow = ta.row_mut(b);
            for (i, a) in w.actions.iter().enumerate() {
                arow[i * ad..(i + 1) * ad].copy_from_slice(&normalize_action(a));
            }
            let orow = to.row_mut(b);
            for (j, l) in w.latents.iter().enumerate() {
                orow[j * ld..(j + 1) * ld].copy_from_slice(&l.0);
            }
        }
        let tasks = batch.iter().map(|w| w.task.index()).collect();
        (x, tasks, ta, to)
    }

    fn losses(&self, batch: &[TrainWindow]) -> (Tape, Var, WamLoss) {
        let (x, tasks, ta, to) = self.batch_tensors(batch);
        let mut tape = Tape::new();
        let (a, o) = self.forward(&mut tape, x, &tasks);
        let la = tape.mse(a, &ta, 1.0);
        let lo = tape.mse(o, &to, 1.0);
        let loss = WamLoss { loss_act: tape.value(la).get(0, 0), loss_vid: tape.value(lo).get(0, 0) };
        let lo_w = tape.scale(lo, self.cfg.latent_weight);
        let total = tape.add(la, lo_w);
        (tape, total, loss)
    }

    /// Losses for a batch without updating parameters.
    pub fn evaluate(&self, batch: &[TrainWindow]) -> Result<WamLoss, WamError> {
        self.check_batch(batch)?;
        Ok(self.losses(batch).2)
    }

    /// Composite loss `L_act + w·L_vid` (mean squared errors, actions in the
    /// model's normalized space), then one Adam step.
    pub fn train_step(&mut self, batch: &[TrainWindow], adam: &AdamConfig) -> Result<WamLoss, WamError> {
        self.check_batch(batch)?;
        let (tape, total, loss) = self.losses(batch);
        if !loss.loss_act.is_finite() || !loss.loss_vid.is_finite() {
            let culprit = batch
                .iter()
                .find(|w| {
                    let l = self.losses(std::slice::from_ref(*w)).2;
                    !l.loss_act.is_finite() || !l.loss_vid.is_finite()
                })
                .unwrap_or(&batch[0]);
            return Err(WamError::NonFiniteLoss {
                episode: culprit.episode,
                s: culprit.s,
                loss_act: loss.loss_act,
                loss_vid: loss.loss_vid,
            });
        }
        let grads = tape.backward(total);
        tape.accumulate(&grads, &mut self.store);
        self.store.adam_step(adam)?;
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "wam".into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg).expect("config serializes"));
        meta.insert("seed".into(), self.store.seed().to_string());
        Checkpoint::from_store(&self.store, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, WamError> {
        if ck.meta.get("kind").map(String::as_str) != Some("wam") {
            return Err(WamError::Meta("checkpoint is not a world-action model".into()));
        }
        let cfg: WamConfig = serde_json::from_str(ck.meta.get("config").ok_or_else(|| WamError::Meta("missing config".into()))?)
            .map_err(|e| WamError::Meta(e.to_string()))?;
        let seed = ck.meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
        let mut wam = Self::new(cfg, seed)?;
        ck.apply_to(&mut wam.store)?;
        Ok(wam)
    }
}

/// Env-space action to the model's normalized action space.
pub fn normalize_action(a: &Action) -> [f64; ACTION_DIM] {
    let mut out = [0.0; ACTION_DIM];
    for (d, v) in out.iter_mut().enumerate() {
        *v = a[d] / action_scale(d);
    }
    out
}

fn action_scale(d: usize) -> f64 {
    if d == GRIPPER_DIM {
        1.0
    } else {
        MOTION_SCALE
    }
}

impl WorldActionModel for ToyWam {
    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn ratio(&self) -> usize {
        self.cfg.ratio
    }

    fn predict(&self, obs: &Latent, task: TaskId, origin_step: usize) -> Result<PredictedRollout, WamError> {
        if obs.dim() != self.cfg.latent_dim {
            return Err(WamError::Dimension(format!("observation has {} dims, model expects {}", obs.dim(), self.cfg.latent_dim)));
        }
        let mut tape = Tape::new();
        let (a, o) = self.forward(&mut tape, Tensor2D::row_vector(&obs.0), &[task.index()]);
        let (a, o) = (tape.value(a), tape.value(o));
        let rollout = PredictedRollout {
            task,
            origin_step,
            ratio: self.cfg.ratio,
            conditioning: obs.clone(),
            actions: self.decode_actions(a.row(0)),
            latents: o.row(0).chunks(self.cfg.latent_dim).map(|c| Latent(c.to_vec())).collect(),
            semantic_tokens: self.semantic_tokens(task),
            kv_cache: None,
        };
        rollout.validate()?;
        Ok(rollout)
    }

    /// Rows of the learned task table.
    fn semantic_tokens(&self, task: TaskId) -> Vec<Latent> {
        let row = self.store.value(self.task_table).row(task.index());
        row.chunks(self.cfg.latent_dim).take(self.cfg.n_semantic).map(|c| Latent(c.to_vec())).collect()
    }

    fn forward_flops(&self) -> u64 {
        let mut n = 0u64;
        for l in self.trunk.iter().chain([&self.action_head, &self.latent_head]) {
            let (r, c) = self.store.value(l.w).shape();
            n += (r * c) as u64;
        }
        n
    }
}

/// Progress report of [`train_wam`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WamTrainLog {
    pub step: usize,
    pub loss_act: f64,
    pub loss_vid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WamTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub log_every: usize,
}

impl Default for WamTrainConfig {
    fn default() -> Self {
        Self { steps: 40_000, batch: 64, adam: AdamConfig { lr: 1e-3, ..Default::default() }, log_every: 500 }
    }
}

/// Mixture-of-horizon training over a demonstration set.
pub fn train_wam(
    wam: &mut ToyWam,
    demos: &[EpisodeRecord],
    cfg: &WamTrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<WamTrainLog>, WamError> {
    let usable: Vec<usize> = (0..demos.len()).filter(|&i| !demos[i].is_empty()).collect();
    if usable.is_empty() || cfg.batch == 0 {
        return Err(WamError::EmptyBatch);
    }
    let (h, r) = (wam.cfg.horizon, wam.cfg.ratio);
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let e = usable[rng.random_range(0..usable.len())];
            batch.push(sample_training_window(e, &demos[e], h, r, rng)?);
        }
        // Linear decay to a tenth of the base rate.
        let frac = step as f64 / cfg.steps.max(1) as f64;
        let adam = AdamConfig { lr: cfg.adam.lr * (1.0 - 0.9 * frac), ..cfg.adam };
        let l = wam.train_step(&batch, &adam)?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log::debug!("wam step {step}: act {:.5} vid {:.5}", l.loss_act, l.loss_vid);
            log.push(WamTrainLog { step, loss_act: l.loss_act, loss_vid: l.loss_vid });
        }
    }
    Ok(log)
}
