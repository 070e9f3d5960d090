//! Per-chunk key/value cache and incremental scoring.
//!
//! Under the cache-compatible mask no prediction-side token attends to `O_t`
//! or CLS, so their keys and values depend only on the rollout. They are
//! computed once per chunk for every check offset; a check then only runs
//! the `O_t` and CLS query rows.

use std::sync::Arc;

use super::{assemble_input, MaskMode, Verifier, VerifierError, VerifierLayout, TYPE_CLS, TYPE_REAL};
use crate::nn::kernels::{self, attend_row, sigmoid};
use crate::nn::{Tape, Tensor2D};
use crate::sim::Latent;
use crate::wam::PredictedRollout;

#[derive(Clone, Debug, PartialEq)]
struct CacheEntry {
    t_off: usize,
    /// Per layer, one row per cached token.
    keys: Vec<Tensor2D>,
    values: Vec<Tensor2D>,
}

/// Keys and values of the prediction-side tokens for every check offset of
/// one chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    origin_step: usize,
    layout: VerifierLayout,
    rows: Vec<usize>,
    entries: Vec<CacheEntry>,
}

impl KvCache {
    pub fn origin_step(&self) -> usize {
        self.origin_step
    }

    pub fn layout(&self) -> &VerifierLayout {
        &self.layout
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.t_off).collect()
    }

    /// Cached key rows per layer.
    pub fn rows_per_layer(&self) -> usize {
        self.rows.len()
    }

    /// Canonical little-endian serialization of the cached arrays.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.origin_step as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.t_off as u64).to_le_bytes());
            for t in e.keys.iter().chain(&e.values) {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn digest(&self) -> String {
        crate::sha256_hex(&self.to_bytes())
    }
}

impl Verifier {
    /// Build the cache for all offsets `t_off` (multiples of `r`) with
    /// `t_off + k <= H`.
    pub fn cache_build(&self, rollout: &PredictedRollout) -> Result<KvCache, VerifierError> {
        if self.cfg.mode != MaskMode::CacheCompatible {
            return Err(VerifierError::IncompatibleMode);
        }
        if rollout.ratio != self.cfg.ratio {
            return Err(VerifierError::Input(format!("rollout ratio {} differs from verifier ratio {}", rollout.ratio, self.cfg.ratio)));
        }
        let rows = self.layout.cached_rows();
        let sub_mask = Arc::new(self.mask.restrict(&rows));
        let mut entries = Vec::new();
        let (h, k, r) = (rollout.horizon(), self.cfg.k, self.cfg.ratio);
        let mut t_off = 0;
        while t_off + k <= h {
            // The real slot is embedded but dropped before any attention.
            let input = assemble_input(rollout, &rollout.conditioning, t_off, k)?;
            self.check_input(&input)?;
            let mut tape = Tape::new();
            let full = self.embed(&mut tape, &[&input]);
            let mut x = tape.gather_rows(full, &rows);
            let mut keys = Vec::with_capacity(self.blocks.len());
            let mut values = Vec::with_capacity(self.blocks.len());
            for blk in &self.blocks {
                let (next, kv, vv) = self.block_forward(&mut tape, blk, x, &sub_mask)?;
                keys.push(tape.value(kv).clone());
                values.push(tape.value(vv).clone());
                x = next;
            }
            entries.push(CacheEntry { t_off, keys, values });
            t_off += r;
        }
        Ok(KvCache { origin_step: rollout.origin_step, layout: self.layout, rows, entries })
    }

    /// Score a check at chunk offset `t_off` from the cache, computing only
    /// the `O_t` and CLS rows.
    pub fn score_cached(&self, cache: &KvCache, origin_step: usize, o_real: &Latent, t_off: usize) -> Result<f64, VerifierError> {
        if self.cfg.mode != MaskMode::CacheCompatible {
            return Err(VerifierError::IncompatibleMode);
        }
        if cache.origin_step != origin_step {
            return Err(VerifierError::StaleCache { cached: cache.origin_step, requested: origin_step });
        }
        if cache.layout != self.layout {
            return Err(VerifierError::Config("cache was built for a different layout".into()));
        }
        let entry = cache.entries.iter().find(|e| e.t_off == t_off).ok_or(VerifierError::MissingOffset(t_off))?;
        if o_real.dim() != crate::sim::LATENT_DIM {
            return Err(VerifierError::Input(format!("real observation has {} dims", o_real.dim())));
        }
        let l = &self.layout;
        let n = l.len();
        let d = self.cfg.width;
        let types = self.store.value(self.type_table);
        let pos = self.store.value(self.pos_table);

        // Query tokens in layout order: O_t (if present) then CLS.
        let mut query_pos = Vec::new();
        let mut x = Vec::new();
        if let Some(o) = l.real() {
            let mut e = self.emb_vis.eval(&self.store, &Tensor2D::row_vector(&o_real.0)).row(0).to_vec();
            add_row(&mut e, types.row(TYPE_REAL));
            add_row(&mut e, pos.row(self.pos_index(o)));
            query_pos.push(o);
            x.push(e);
        }
        let mut e = self.store.value(self.cls).row(0).to_vec();
        add_row(&mut e, types.row(TYPE_CLS));
        add_row(&mut e, pos.row(self.pos_index(l.cls())));
        query_pos.push(l.cls());
        x.push(e);
        let mut x = Tensor2D::from_rows(&x);

        for (li, blk) in self.blocks.iter().enumerate() {
            let a = blk.ln1.eval(&self.store, &x);
            let q = blk.q.eval(&self.store, &a);
            let kq = blk.k.eval(&self.store, &a);
            let vq = blk.v.eval(&self.store, &a);
            let mut keys = Tensor2D::zeros(n, d);
            let mut values = Tensor2D::zeros(n, d);
            for (c, &row) in cache.rows.iter().enumerate() {
                keys.row_mut(row).copy_from_slice(entry.keys[li].row(c));
                values.row_mut(row).copy_from_slice(entry.values[li].row(c));
            }
            for (qi, &row) in query_pos.iter().enumerate() {
                keys.row_mut(row).copy_from_slice(kq.row(qi));
                values.row_mut(row).copy_from_slice(vq.row(qi));
            }
            let mut att = Tensor2D::zeros(query_pos.len(), d);
            for (qi, &row) in query_pos.iter().enumerate() {
                attend_row(q.row(qi), &keys, &values, 0, self.mask.row(row), self.cfg.heads, att.row_mut(qi), None);
            }
            let o = blk.o.eval(&self.store, &att);
            x.add_assign(&o);
            let b = blk.ln2.eval(&self.store, &x);
            let h = kernels::gelu_tensor(&blk.fc1.eval(&self.store, &b));
            let m = blk.fc2.eval(&self.store, &h);
            x.add_assign(&m);
        }
        let cls = Tensor2D::row_vector(x.row(query_pos.len() - 1));
        let c = self.ln_f.eval(&self.store, &cls);
        let h = kernels::gelu_tensor(&self.head1.eval(&self.store, &c));
        let z = self.head2.eval(&self.store, &h).get(0, 0);
        if !z.is_finite() {
            return Err(VerifierError::NonFinite("cached verifier logit".into()));
        }
        Ok(sigmoid(z))
    }
}

fn add_row(acc: &mut [f64], row: &[f64]) {
    for (a, b) in acc.iter_mut().zip(row) {
        *a += b;
    }
}
