//! Numeric kernels shared by the differentiable tape and the tape-free
//! inference paths. Both routes call the same functions so their results
//! agree bit-for-bit.

use std::cell::Cell;

use super::mask::BoolMask;
use super::tensor::Tensor2D;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Score substituted for masked positions before the softmax.
pub const MASKED_SCORE: f64 = -1e30;

thread_local! {
    static ATTENTION_DOTS: Cell<u64> = const { Cell::new(0) };
}

/// Number of query-key dot products evaluated on this thread since the last
/// [`reset_attention_dots`].
pub fn attention_dots() -> u64 {
    ATTENTION_DOTS.with(Cell::get)
}

pub fn reset_attention_dots() {
    ATTENTION_DOTS.with(|c| c.set(0));
}

fn count_dots(n: u64) {
    ATTENTION_DOTS.with(|c| c.set(c.get() + n));
}

/// `a · b`
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    assert_eq!(a.cols(), b.rows(), "matmul shape mismatch: {:?} x {:?}", a.shape(), b.shape());
    let (n, m, p) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor2D::zeros(n, p);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..n {
        let orow = &mut od[i * p..(i + 1) * p];
        for k in 0..m {
            let aik = ad[i * m + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[k * p..(k + 1) * p];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    assert_eq!(a.rows(), b.rows(), "matmul_tn shape mismatch");
    let (n, m, p) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor2D::zeros(m, p);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for r in 0..n {
        let brow = &bd[r * p..(r + 1) * p];
        for k in 0..m {
            let ark = ad[r * m + k];
            if ark == 0.0 {
                continue;
            }
            let orow = &mut od[k * p..(k + 1) * p];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += ark * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    assert_eq!(a.cols(), b.cols(), "matmul_nt shape mismatch");
    let (n, m, p) = (a.rows(), a.cols(), b.rows());
    let mut out = Tensor2D::zeros(n, p);
    for i in 0..n {
        let arow = &a.data()[i * m..(i + 1) * m];
        for j in 0..p {
            let brow = &b.data()[j * m..(j + 1) * m];
            out.data_mut()[i * p + j] = dot(arow, brow);
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x · w + b` with `b` broadcast over rows.
pub fn linear(x: &Tensor2D, w: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    let mut y = matmul(x, w);
    add_row_broadcast(&mut y, b);
    y
}

pub fn add_row_broadcast(y: &mut Tensor2D, b: &Tensor2D) {
    assert_eq!(b.rows(), 1, "bias must be a row vector");
    assert_eq!(b.cols(), y.cols(), "bias width mismatch");
    let cols = y.cols();
    for r in 0..y.rows() {
        for (v, bv) in y.row_mut(r).iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    debug_assert_eq!(cols, b.cols());
}

/// Normalizes one row in place of `out`, returning `(mean, 1/std)`.
pub fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
    }
    (mean, rstd)
}

pub fn layer_norm(x: &Tensor2D, gamma: &Tensor2D, beta: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        layer_norm_row(x.row(r), gamma.data(), beta.data(), out.row_mut(r));
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_tensor(x: &Tensor2D) -> Tensor2D {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    y
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Masked scaled dot-product attention for one query row of one sequence.
///
/// `keys` and `values` hold the sequence starting at `base`; the visible
/// columns of `mask_row` select which keys participate. Masked columns
/// contribute exactly zero weight. When `probs` is provided it receives the
/// attention weights laid out `[head][key]`.
#[allow(clippy::too_many_arguments)]
pub fn attend_row(
    query: &[f64],
    keys: &Tensor2D,
    values: &Tensor2D,
    base: usize,
    mask_row: &[bool],
    heads: usize,
    out: &mut [f64],
    mut probs: Option<&mut [f64]>,
) {
    let width = query.len();
    let hd = width / heads;
    let n = mask_row.len();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut scores = vec![MASKED_SCORE; n];
    out.iter_mut().for_each(|v| *v = 0.0);
    let visible = mask_row.iter().filter(|&&b| b).count() as u64;
    count_dots(visible * heads as u64);
    for h in 0..heads {
        let qh = &query[h * hd..(h + 1) * hd];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            if mask_row[j] {
                let kh = &keys.row(base + j)[h * hd..(h + 1) * hd];
                *s = dot(qh, kh) * scale;
                max = max.max(*s);
            } else {
                *s = MASKED_SCORE;
            }
        }
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let oh = &mut out[h * hd..(h + 1) * hd];
        for (j, s) in scores.iter_mut().enumerate() {
            *s /= sum;
            if mask_row[j] {
                let vh = &values.row(base + j)[h * hd..(h + 1) * hd];
                for (o, v) in oh.iter_mut().zip(vh) {
                    *o += *s * v;
                }
            }
        }
        if let Some(p) = probs.as_deref_mut() {
            p[h * n..(h + 1) * n].copy_from_slice(&scores);
        }
    }
}

/// Full masked attention over `rows / mask.len()` stacked sequences.
pub fn masked_attention(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D, mask: &BoolMask, heads: usize) -> Tensor2D {
    let n = mask.len();
    let mut out = Tensor2D::zeros(q.rows(), q.cols());
    for s in 0..q.rows() / n {
        for i in 0..n {
            let base = s * n;
            let mut row = vec![0.0; q.cols()];
            attend_row(q.row(base + i), k, v, base, mask.row(i), heads, &mut row, None);
            out.row_mut(base + i).copy_from_slice(&row);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor2D::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Tensor2D::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.0, 1.0]]);
        let ab = matmul(&a, &b);
        assert_eq!(ab.data(), &[-1.0, 7.5, -1.0, 18.0]);
        assert_eq!(matmul_tn(&a.transpose(), &b), ab);
        assert_eq!(matmul_nt(&a, &b.transpose()), ab);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
