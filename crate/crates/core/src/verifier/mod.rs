//! Masked-attention verifier over `[L, Ô_tp, O_t, Ô_tf, Â_t, CLS]`: scores
//! whether the remaining predicted action segment is still safe to execute.

mod cache;
mod layout;
mod train;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cache::KvCache;
pub use layout::{build_mask, parse_mask_dump, Ablation, Block, FfdcMask, MaskMode, VerifierLayout};
pub use train::{train_verifier, VerifierTrainConfig, VerifierTrainLog};

use crate::nn::kernels::sigmoid;
use crate::nn::{AdamConfig, BoolMask, Checkpoint, LayerNorm, Linear, NnError, ParamId, ParamStore, Tape, Tensor2D, Var};
use crate::sim::{Action, Latent, ACTION_DIM, LATENT_DIM};
use crate::wam::{normalize_action, PredictedRollout};

#[derive(Debug, thiserror::Error)]
pub enum VerifierError {
    #[error("verifier configuration: {0}")]
    Config(String),
    #[error("verifier input: {0}")]
    Input(String),
    #[error("stale KV cache: built for chunk at step {cached}, scoring chunk at step {requested}")]
    StaleCache { cached: usize, requested: usize },
    #[error("KV cache has no entry for offset {0}")]
    MissingOffset(usize),
    #[error("KV caching requires the cache_compatible mask mode")]
    IncompatibleMode,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite activation: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("bad checkpoint metadata: {0}")]
    Meta(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierConfig {
    /// Transformer depth `N`.
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    /// Hidden width of the two-layer CLS head.
    pub head_hidden: usize,
    /// Check horizon: number of future actions scored per check.
    pub k: usize,
    /// Local window in timesteps over the future tokens.
    pub window: usize,
    /// Actions per predicted latent.
    pub ratio: usize,
    pub n_semantic: usize,
    pub mode: MaskMode,
    pub ablation: Ablation,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 64,
            head_hidden: 64,
            k: 8,
            window: 8,
            ratio: 4,
            n_semantic: 2,
            mode: MaskMode::CacheCompatible,
            ablation: Ablation::Full,
        }
    }
}

impl VerifierConfig {
    pub fn layout(&self) -> Result<VerifierLayout, VerifierError> {
        VerifierLayout::new(self.n_semantic, self.k, self.ratio, self.ablation)
    }

    pub fn validate(&self) -> Result<(), VerifierError> {
        if self.layers == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) || self.head_hidden == 0 {
            return Err(VerifierError::Config(format!("need layers >= 1 and width {} divisible by heads {}", self.width, self.heads)));
        }
        build_mask(&self.layout()?, self.window, self.mode)?;
        Ok(())
    }
}

/// Raw (unembedded) token content for one check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierInput {
    pub semantic: Vec<Latent>,
    pub past: Vec<Latent>,
    /// Past slots with no predicted frame, filled with the conditioning frame.
    pub past_pad: Vec<bool>,
    pub real: Latent,
    pub future: Vec<Latent>,
    /// Normalized actions.
    pub actions: Vec<[f64; ACTION_DIM]>,
}

/// Slice a rollout around chunk offset `t_off` for a `k`-step check.
pub fn assemble_input(rollout: &PredictedRollout, o_real: &Latent, t_off: usize, k: usize) -> Result<VerifierInput, VerifierError> {
    let (h, r) = (rollout.horizon(), rollout.ratio);
    if r == 0 || k == 0 || !k.is_multiple_of(r) {
        return Err(VerifierError::Input(format!("k={k} is not a positive multiple of r={r}")));
    }
    if !t_off.is_multiple_of(r) {
        return Err(VerifierError::Input(format!("offset {t_off} is not aligned to r={r}")));
    }
    if t_off + k > h {
        return Err(VerifierError::Input(format!("offset {t_off} + k={k} runs past the chunk of {h} actions")));
    }
    if o_real.dim() != LATENT_DIM {
        return Err(VerifierError::Input(format!("real observation has {} dims", o_real.dim())));
    }
    let n = k / r;
    let mut past = Vec::with_capacity(n);
    let mut past_pad = Vec::with_capacity(n);
    for p in 0..n {
        let back = (n - 1 - p) * r;
        if t_off > back {
            past.push(rollout.latent_at(t_off - back).expect("aligned offset").clone());
            past_pad.push(false);
        } else {
            past.push(rollout.conditioning.clone());
            past_pad.push(true);
        }
    }
    let future = (1..=n).map(|j| rollout.latent_at(t_off + j * r).expect("aligned offset").clone()).collect();
    let actions = rollout.actions[t_off..t_off + k].iter().map(normalize_action).collect();
    Ok(VerifierInput { semantic: rollout.semantic_tokens.clone(), past, past_pad, real: o_real.clone(), future, actions })
}

/// Replace the actions of an input with raw env-space actions.
pub fn with_actions(input: &VerifierInput, actions: &[Action]) -> VerifierInput {
    VerifierInput { actions: actions.iter().map(normalize_action).collect(), ..input.clone() }
}

// Rows of the type-embedding table.
const TYPE_SEM: usize = 0;
const TYPE_PAST: usize = 1;
const TYPE_PAD: usize = 2;
const TYPE_REAL: usize = 3;
const TYPE_FUTURE: usize = 4;
const TYPE_ACTION: usize = 5;
const TYPE_CLS: usize = 6;
const N_TYPES: usize = 7;

#[derive(Clone, Debug)]
struct Layer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Verifier {
    cfg: VerifierConfig,
    layout: VerifierLayout,
    mask: Arc<BoolMask>,
    store: ParamStore,
    emb_sem: Linear,
    emb_vis: Linear,
    emb_act: Linear,
    type_table: ParamId,
    pos_table: ParamId,
    cls: ParamId,
    blocks: Vec<Layer>,
    ln_f: LayerNorm,
    head1: Linear,
    head2: Linear,
}

/// Per-token bookkeeping for embedding one sequence.
struct TokenPlan {
    /// Which row of the concatenated modality outputs each token takes.
    source: Vec<usize>,
    types: Vec<usize>,
    positions: Vec<usize>,
}

/// Classification metrics on a labeled set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierEval {
    pub accuracy: f64,
    pub mean_pos: f64,
    pub mean_neg: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl VerifierEval {
    pub fn separation(&self) -> f64 {
        self.mean_pos - self.mean_neg
    }
}

impl Verifier {
    pub fn new(cfg: VerifierConfig, seed: u64) -> Result<Self, VerifierError> {
        cfg.validate()?;
        let layout = cfg.layout()?;
        let mask = Arc::new(build_mask(&layout, cfg.window, cfg.mode)?.bits);
        let d = cfg.width;
        let mut store = ParamStore::new(seed);
        let emb_sem = Linear::new(&mut store, "ver.emb_sem", LATENT_DIM, d);
        let emb_vis = Linear::new(&mut store, "ver.emb_vis", LATENT_DIM, d);
        let emb_act = Linear::new(&mut store, "ver.emb_act", ACTION_DIM, d);
        let type_table = store.uniform("ver.type", N_TYPES, d, 4);
        let pos_rows = cfg.n_semantic + 2 * cfg.k + 2;
        let pos_table = store.uniform("ver.pos", pos_rows, d, 4);
        let cls = store.uniform("ver.cls", 1, d, 4);
        let mut blocks = Vec::new();
        for l in 0..cfg.layers {
            let p = format!("ver.block{l}");
            blocks.push(Layer {
                ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), d),
                q: Linear::new(&mut store, &format!("{p}.q"), d, d),
                k: Linear::new(&mut store, &format!("{p}.k"), d, d),
                v: Linear::new(&mut store, &format!("{p}.v"), d, d),
                o: Linear::new(&mut store, &format!("{p}.o"), d, d),
                ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), d),
                fc1: Linear::new(&mut store, &format!("{p}.fc1"), d, 2 * d),
                fc2: Linear::new(&mut store, &format!("{p}.fc2"), 2 * d, d),
            });
        }
        let ln_f = LayerNorm::new(&mut store, "ver.ln_f", d);
        let head1 = Linear::new(&mut store, "ver.head1", d, cfg.head_hidden);
        let head2 = Linear::new(&mut store, "ver.head2", cfg.head_hidden, 1);
        Ok(Self { cfg, layout, mask, store, emb_sem, emb_vis, emb_act, type_table, pos_table, cls, blocks, ln_f, head1, head2 })
    }

    /// Fresh model whose final head layer is zero, so every score is 0.5.
    pub fn with_zero_head(cfg: VerifierConfig, seed: u64) -> Result<Self, VerifierError> {
        let mut v = Self::new(cfg, seed)?;
        v.store.value_mut(v.head2.w).fill(0.0);
        v.store.value_mut(v.head2.b).fill(0.0);
        Ok(v)
    }

    pub fn config(&self) -> &VerifierConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &VerifierLayout {
        &self.layout
    }

    pub fn mask(&self) -> &BoolMask {
        &self.mask
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_input(&self, x: &VerifierInput) -> Result<(), VerifierError> {
        let n = self.cfg.k / self.cfg.ratio;
        let ok = x.semantic.len() >= self.layout.n_l
            && x.past.len() == n
            && x.past_pad.len() == n
            && x.future.len() == n
            && x.actions.len() == self.cfg.k
            && x.real.dim() == LATENT_DIM
            && x.semantic.iter().chain(&x.past).chain(&x.future).all(|l| l.dim() == LATENT_DIM);
        if !ok {
            return Err(VerifierError::Input(format!(
                "input shape does not match k={} r={} n_L={}",
                self.cfg.k, self.cfg.ratio, self.layout.n_l
            )));
        }
        Ok(())
    }

    fn pos_index(&self, i: usize) -> usize {
        let l = &self.layout;
        match l.block_of(i) {
            Block::Semantic => i,
            Block::Cls => self.cfg.n_semantic + 2 * self.cfg.k + 1,
            _ => {
                let t = l.time(i).expect("timed token");
                self.cfg.n_semantic + (t + self.cfg.k as i64) as usize
            }
        }
    }

    /// Raw modality inputs for a batch plus the row plan that interleaves
    /// them into token order.
    fn plan(&self, batch: &[&VerifierInput]) -> (Tensor2D, Tensor2D, Tensor2D, TokenPlan) {
        let l = &self.layout;
        let n_vis = l.n_p + l.n_real + l.n_f;
        let b = batch.len();
        let mut sem = Tensor2D::zeros(b * l.n_l, LATENT_DIM);
        let mut vis = Tensor2D::zeros(b * n_vis, LATENT_DIM);
        let mut act = Tensor2D::zeros(b * l.n_a, ACTION_DIM);
        let (sem_base, vis_base, act_base) = (0, b * l.n_l, b * l.n_l + b * n_vis);
        let cls_row = act_base + b * l.n_a;
        let n = l.len();
        let mut plan =
            TokenPlan { source: Vec::with_capacity(b * n), types: Vec::with_capacity(b * n), positions: Vec::with_capacity(b * n) };
        for (s, x) in batch.iter().enumerate() {
            let (mut si, mut vi, mut ai) = (s * l.n_l, s * n_vis, s * l.n_a);
            for i in 0..n {
                let (src, ty) = match l.block_of(i) {
                    Block::Semantic => {
                        sem.row_mut(si).copy_from_slice(&x.semantic[i].0);
                        si += 1;
                        (sem_base + si - 1, TYPE_SEM)
                    }
                    Block::PastLatent => {
                        let p = i - l.start(Block::PastLatent);
                        vis.row_mut(vi).copy_from_slice(&x.past[p].0);
                        vi += 1;
                        (vis_base + vi - 1, if x.past_pad[p] { TYPE_PAD } else { TYPE_PAST })
                    }
                    Block::Real => {
                        vis.row_mut(vi).copy_from_slice(&x.real.0);
                        vi += 1;
                        (vis_base + vi - 1, TYPE_REAL)
                    }
                    Block::FutureLatent => {
                        vis.row_mut(vi).copy_from_slice(&x.future[i - l.start(Block::FutureLatent)].0);
                        vi += 1;
                        (vis_base + vi - 1, TYPE_FUTURE)
                    }
                    Block::Action => {
                        act.row_mut(ai).copy_from_slice(&x.actions[i - l.start(Block::Action)]);
                        ai += 1;
                        (act_base + ai - 1, TYPE_ACTION)
                    }
                    Block::Cls => (cls_row, TYPE_CLS),
                };
                plan.source.push(src);
                plan.types.push(ty);
                plan.positions.push(self.pos_index(i));
            }
        }
        (sem, vis, act, plan)
    }

    /// Token embeddings for a batch, stacked `batch.len() * n` rows.
    fn embed(&self, tape: &mut Tape, batch: &[&VerifierInput]) -> Var {
        let (sem, vis, act, plan) = self.plan(batch);
        let mut parts = Vec::new();
        for (raw, lin) in [(sem, &self.emb_sem), (vis, &self.emb_vis), (act, &self.emb_act)] {
            if raw.rows() > 0 {
                let x = tape.input(raw);
                parts.push(lin.forward(tape, &self.store, x));
            }
        }
        parts.push(tape.param(&self.store, self.cls));
        let z = tape.concat_rows(&parts);
        let x = tape.gather_rows(z, &plan.source);
        let types = tape.param(&self.store, self.type_table);
        let t = tape.gather_rows(types, &plan.types);
        let pos = tape.param(&self.store, self.pos_table);
        let p = tape.gather_rows(pos, &plan.positions);
        let x = tape.add(x, t);
        tape.add(x, p)
    }

    /// One pre-norm block; also returns the attention keys and values.
    fn block_forward(&self, tape: &mut Tape, blk: &Layer, x: Var, mask: &Arc<BoolMask>) -> Result<(Var, Var, Var), NnError> {
        let a = blk.ln1.forward(tape, &self.store, x);
        let q = blk.q.forward(tape, &self.store, a);
        let k = blk.k.forward(tape, &self.store, a);
        let v = blk.v.forward(tape, &self.store, a);
        let att = tape.attention(q, k, v, Arc::clone(mask), self.cfg.heads)?;
        let o = blk.o.forward(tape, &self.store, att);
        let x = tape.add(x, o);
        let b = blk.ln2.forward(tape, &self.store, x);
        let h = blk.fc1.forward(tape, &self.store, b);
        let h = tape.gelu(h);
        let m = blk.fc2.forward(tape, &self.store, h);
        Ok((tape.add(x, m), k, v))
    }

    fn head_forward(&self, tape: &mut Tape, cls: Var) -> Var {
        let c = self.ln_f.forward(tape, &self.store, cls);
        let h = self.head1.forward(tape, &self.store, c);
        let h = tape.gelu(h);
        self.head2.forward(tape, &self.store, h)
    }

    /// Logits (`batch.len()` x 1) on a tape under an arbitrary mask over this
    /// model's layout. Also returns the hidden states after the embedding and
    /// after every block.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        batch: &[&VerifierInput],
        mask: &Arc<BoolMask>,
    ) -> Result<(Var, Vec<Var>), VerifierError> {
        if batch.is_empty() {
            return Err(VerifierError::EmptyBatch);
        }
        if mask.len() != self.layout.len() {
            return Err(VerifierError::Config(format!("mask has {} tokens, layout has {}", mask.len(), self.layout.len())));
        }
        for x in batch {
            self.check_input(x)?;
        }
        let mut x = self.embed(tape, batch);
        let mut hidden = vec![x];
        for blk in &self.blocks {
            x = self.block_forward(tape, blk, x, mask)?.0;
            hidden.push(x);
        }
        let n = self.layout.len();
        let cls_rows: Vec<usize> = (0..batch.len()).map(|s| s * n + self.layout.cls()).collect();
        let c = tape.gather_rows(x, &cls_rows);
        let z = self.head_forward(tape, c);
        if !tape.value(z).is_finite() {
            return Err(VerifierError::NonFinite("verifier logit".into()));
        }
        Ok((z, hidden))
    }

    /// Logit for one input under an explicit mask.
    pub fn logit_with_mask(&self, input: &VerifierInput, mask: &BoolMask) -> Result<f64, VerifierError> {
        let mut tape = Tape::new();
        let (z, _) = self.logits_on_tape(&mut tape, &[input], &Arc::new(mask.clone()))?;
        Ok(tape.value(z).get(0, 0))
    }

    /// Hidden states (n x width) after the embedding and after each block.
    pub fn hidden_states(&self, input: &VerifierInput, mask: &BoolMask) -> Result<Vec<Tensor2D>, VerifierError> {
        let mut tape = Tape::new();
        let (_, hidden) = self.logits_on_tape(&mut tape, &[input], &Arc::new(mask.clone()))?;
        Ok(hidden.into_iter().map(|h| tape.value(h).clone()).collect())
    }

    /// Full (uncached) score under the model's own mask.
    pub fn score_full(&self, input: &VerifierInput) -> Result<f64, VerifierError> {
        Ok(sigmoid(self.logit_with_mask(input, &self.mask)?))
    }

    /// Scores for many inputs, evaluated in batches.
    pub fn score_batch(&self, inputs: &[&VerifierInput]) -> Result<Vec<f64>, VerifierError> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(128) {
            let mut tape = Tape::new();
            let (z, _) = self.logits_on_tape(&mut tape, chunk, &self.mask)?;
            out.extend(tape.value(z).data().iter().map(|&z| sigmoid(z)));
        }
        Ok(out)
    }

    /// Mean binary cross-entropy on the logits, then one Adam step.
    pub fn train_step(&mut self, batch: &[(&VerifierInput, f64)], adam: &AdamConfig) -> Result<f64, VerifierError> {
        if batch.is_empty() {
            return Err(VerifierError::EmptyBatch);
        }
        let inputs: Vec<&VerifierInput> = batch.iter().map(|(x, _)| *x).collect();
        let labels: Vec<f64> = batch.iter().map(|(_, y)| *y).collect();
        let mut tape = Tape::new();
        let mask = Arc::clone(&self.mask);
        let (z, _) = self.logits_on_tape(&mut tape, &inputs, &mask)?;
        let loss = tape.bce_with_logits(z, &labels);
        let value = tape.value(loss).get(0, 0);
        let grads = tape.backward(loss);
        tape.accumulate(&grads, &mut self.store);
        self.store.adam_step(adam)?;
        Ok(value)
    }

    /// Accuracy at threshold 0.5 and mean scores per class.
    pub fn evaluate(&self, samples: &[(&VerifierInput, f64)]) -> Result<VerifierEval, VerifierError> {
        let inputs: Vec<&VerifierInput> = samples.iter().map(|(x, _)| *x).collect();
        let scores = self.score_batch(&inputs)?;
        let (mut correct, mut sp, mut sn, mut np, mut nn) = (0usize, 0.0, 0.0, 0usize, 0usize);
        for (e, (_, y)) in scores.iter().zip(samples) {
            let positive = *y > 0.5;
            if (*e >= 0.5) == positive {
                correct += 1;
            }
            if positive {
                sp += e;
                np += 1;
            } else {
                sn += e;
                nn += 1;
            }
        }
        Ok(VerifierEval {
            accuracy: correct as f64 / samples.len().max(1) as f64,
            mean_pos: sp / np.max(1) as f64,
            mean_neg: sn / nn.max(1) as f64,
            n_pos: np,
            n_neg: nn,
        })
    }

    /// Multiply-accumulates of the transformer blocks for one token row.
    fn row_macs(&self) -> u64 {
        let size = |l: &Linear| {
            let (r, c) = self.store.value(l.w).shape();
            (r * c) as u64
        };
        self.blocks.iter().map(|b| [&b.q, &b.k, &b.v, &b.o, &b.fc1, &b.fc2].into_iter().map(size).sum::<u64>()).sum()
    }

    /// Multiply-accumulate proxy for one cached check: the query rows, their
    /// attention over the whole sequence, and the head.
    pub fn check_flops(&self) -> u64 {
        let q = (self.layout.len() - self.layout.cached_rows().len()) as u64;
        let attn = q * self.layout.len() as u64 * self.cfg.width as u64 * 2 * self.blocks.len() as u64;
        let head = (self.cfg.width * self.cfg.head_hidden + self.cfg.head_hidden) as u64;
        q * self.row_macs() + attn + head
    }

    /// Multiply-accumulate proxy for building the cache of a `horizon`-step chunk.
    pub fn cache_flops(&self, horizon: usize) -> u64 {
        if horizon < self.cfg.k {
            return 0;
        }
        let offsets = ((horizon - self.cfg.k) / self.cfg.ratio + 1) as u64;
        let rows = self.layout.cached_rows().len() as u64;
        let attn = rows * rows * self.cfg.width as u64 * 2 * self.blocks.len() as u64;
        offsets * (rows * self.row_macs() + attn)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "verifier".into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg).expect("config serializes"));
        meta.insert("seed".into(), self.store.seed().to_string());
        Checkpoint::from_store(&self.store, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, VerifierError> {
        if ck.meta.get("kind").map(String::as_str) != Some("verifier") {
            return Err(VerifierError::Meta("checkpoint is not a verifier".into()));
        }
        let cfg: VerifierConfig = serde_json::from_str(ck.meta.get("config").ok_or_else(|| VerifierError::Meta("missing config".into()))?)
            .map_err(|e| VerifierError::Meta(e.to_string()))?;
        let seed = ck.meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
        let mut v = Self::new(cfg, seed)?;
        ck.apply_to(&mut v.store)?;
        Ok(v)
    }
}
