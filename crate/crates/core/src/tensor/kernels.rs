//! Raw numeric kernels over row-major slices.
//!
//! Every reduction runs left to right in a fixed order, and parallel variants
//! only split work along independent output rows (or batch items). Results are
//! therefore bitwise identical between [`Exec::Sequential`] and
//! [`Exec::Parallel`] and across thread counts.

use super::Float;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for the data-parallel kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

/// Runs `f(block_index, block)` over consecutive `block_len` chunks of `out`.
fn for_each_block<T, F>(exec: Exec, out: &mut [T], block_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    match exec {
        Exec::Sequential => out
            .chunks_mut(block_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => out
            .par_chunks_mut(block_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}

const MR: usize = 4;
const NR: usize = 32;
const ROW_BLOCK: usize = 16;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    matmul_with(Exec::default(), a, b, m, k, n)
}

pub fn matmul_with<T: Float>(exec: Exec, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    if m == 0 || n == 0 {
        return c;
    }
    for_each_block(exec, &mut c, ROW_BLOCK * n, |blk, out| {
        let row0 = blk * ROW_BLOCK;
        let rows = out.len() / n;
        matmul_rows(&a[row0 * k..(row0 + rows) * k], b, rows, k, n, out);
    });
    c
}

/// Register-tiled block product. Each output element is accumulated from zero
/// over `p = 0..k` in order, so tiling never changes the bits.
fn matmul_rows<T: Float>(a: &[T], b: &[T], rows: usize, k: usize, n: usize, out: &mut [T]) {
    let full_rows = rows - rows % MR;
    let full_cols = n - n % NR;
    for i0 in (0..full_rows).step_by(MR) {
        for j0 in (0..full_cols).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let brow = &b[p * n + j0..p * n + j0 + NR];
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + p];
                    for (c, &bv) in acc_r.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(acc_r);
            }
        }
        if full_cols < n {
            for r in 0..MR {
                simple_row(&a[(i0 + r) * k..(i0 + r + 1) * k], b, n, full_cols, &mut out[(i0 + r) * n..(i0 + r + 1) * n]);
            }
        }
    }
    for i in full_rows..rows {
        simple_row(&a[i * k..(i + 1) * k], b, n, 0, &mut out[i * n..(i + 1) * n]);
    }
}

fn simple_row<T: Float>(arow: &[T], b: &[T], n: usize, col0: usize, out: &mut [T]) {
    for v in &mut out[col0..] {
        *v = T::zero();
    }
    for (p, &av) in arow.iter().enumerate() {
        let brow = &b[p * n + col0..(p + 1) * n];
        for (c, &bv) in out[col0..].iter_mut().zip(brow) {
            *c += av * bv;
        }
    }
}

pub fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `tanh` through a single `exp`; saturates cleanly at ±1.
#[inline]
fn fast_tanh<T: Float>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Float>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4);
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    half * x * (T::one() + fast_tanh(c * (x + k * x * x * x)))
}

#[inline]
pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4);
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    let t = fast_tanh(c * (x + k * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Row-wise layer norm. Returns `(y, mean, rstd)`.
pub fn layer_norm<T: Float>(x: &[T], gain: &[T], bias: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut mean = vec![T::zero(); rows];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut s = T::zero();
        for &v in row {
            s += v;
        }
        let mu = s * inv_d;
        let mut var = T::zero();
        for &v in row {
            var += (v - mu) * (v - mu);
        }
        let rs = T::one() / (var * inv_d + eps).sqrt();
        mean[r] = mu;
        rstd[r] = rs;
        let yrow = &mut y[r * d..(r + 1) * d];
        for j in 0..d {
            yrow[j] = (row[j] - mu) * rs * gain[j] + bias[j];
        }
    }
    (y, mean, rstd)
}

/// Gradients of layer norm w.r.t. input, gain and bias.
pub fn layer_norm_backward<T: Float>(
    x: &[T],
    gain: &[T],
    mean: &[T],
    rstd: &[T],
    dy: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];
    let inv_d = T::one() / T::of(d as f64);
    let mut xhat = vec![T::zero(); d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            xhat[j] = (xr[j] - mean[r]) * rstd[r];
            let g = dyr[j] * gain[j];
            sum_dxhat += g;
            sum_dxhat_xhat += g * xhat[j];
            dgain[j] += dyr[j] * xhat[j];
            dbias[j] += dyr[j];
        }
        let m1 = sum_dxhat * inv_d;
        let m2 = sum_dxhat_xhat * inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] = rstd[r] * (dyr[j] * gain[j] - m1 - xhat[j] * m2);
        }
    }
    (dx, dgain, dbias)
}

/// Shape parameters of a causal multi-head attention call. `q`, `k`, `v`
/// are `[batch·seq × d]` with head `h` occupying columns `h·dh..(h+1)·dh`.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub d: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Causal softmax attention. Returns `(out, probs)` with probabilities stored
/// as `[batch × heads × seq × seq]`, zero above the diagonal.
pub fn attention<T: Float>(exec: Exec, q: &[T], k: &[T], v: &[T], dims: AttnDims) -> (Vec<T>, Vec<T>) {
    let AttnDims { batch, seq, heads, d } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); batch * seq * d];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    // One block = one batch item; (out rows, prob slab) are disjoint per item.
    let work = |b: usize, out_b: &mut [T], probs_b: &mut [T]| {
        let base = b * seq * d;
        for h in 0..heads {
            let col = h * dh;
            let ph = &mut probs_b[h * seq * seq..(h + 1) * seq * seq];
            for i in 0..seq {
                let qi = &q[base + i * d + col..base + i * d + col + dh];
                let prow = &mut ph[i * seq..(i + 1) * seq];
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    let kj = &k[base + j * d + col..base + j * d + col + dh];
                    let mut s = T::zero();
                    for c in 0..dh {
                        s += qi[c] * kj[c];
                    }
                    let s = s * scale;
                    prow[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut total = T::zero();
                for p in prow[..=i].iter_mut() {
                    *p = (*p - max).exp();
                    total += *p;
                }
                let inv = T::one() / total;
                for p in prow[..=i].iter_mut() {
                    *p *= inv;
                }
                let orow = &mut out_b[i * d + col..i * d + col + dh];
                for j in 0..=i {
                    let pj = prow[j];
                    let vj = &v[base + j * d + col..base + j * d + col + dh];
                    for c in 0..dh {
                        orow[c] += pj * vj[c];
                    }
                }
            }
        }
    };
    match exec {
        Exec::Sequential => out
            .chunks_mut(seq * d)
            .zip(probs.chunks_mut(heads * seq * seq))
            .enumerate()
            .for_each(|(b, (o, p))| work(b, o, p)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => out
            .par_chunks_mut(seq * d)
            .zip(probs.par_chunks_mut(heads * seq * seq))
            .enumerate()
            .for_each(|(b, (o, p))| work(b, o, p)),
    }
    (out, probs)
}

/// Backward of [`attention`]. Returns `(dq, dk, dv)`.
pub fn attention_backward<T: Float>(
    exec: Exec,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dims: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims { batch, seq, heads, d } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let n = batch * seq * d;
    let mut dq = vec![T::zero(); n];
    let mut dk = vec![T::zero(); n];
    let mut dv = vec![T::zero(); n];
    let work = |b: usize, dq_b: &mut [T], dk_b: &mut [T], dv_b: &mut [T]| {
        let base = b * seq * d;
        let mut dp = vec![T::zero(); seq];
        for h in 0..heads {
            let col = h * dh;
            let ph = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            for i in 0..seq {
                let prow = &ph[i * seq..(i + 1) * seq];
                let doi = &dout[base + i * d + col..base + i * d + col + dh];
                let mut rowdot = T::zero();
                for j in 0..=i {
                    let vj = &v[base + j * d + col..base + j * d + col + dh];
                    let mut s = T::zero();
                    for c in 0..dh {
                        s += doi[c] * vj[c];
                    }
                    dp[j] = s;
                    rowdot += prow[j] * s;
                    let dvj = &mut dv_b[j * d + col..j * d + col + dh];
                    for c in 0..dh {
                        dvj[c] += prow[j] * doi[c];
                    }
                }
                let qi = &q[base + i * d + col..base + i * d + col + dh];
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - rowdot) * scale;
                    let kj = &k[base + j * d + col..base + j * d + col + dh];
                    let dqi = &mut dq_b[i * d + col..i * d + col + dh];
                    for c in 0..dh {
                        dqi[c] += ds * kj[c];
                    }
                    let dkj = &mut dk_b[j * d + col..j * d + col + dh];
                    for c in 0..dh {
                        dkj[c] += ds * qi[c];
                    }
                }
            }
        }
    };
    match exec {
        Exec::Sequential => dq
            .chunks_mut(seq * d)
            .zip(dk.chunks_mut(seq * d))
            .zip(dv.chunks_mut(seq * d))
            .enumerate()
            .for_each(|(b, ((a, bb), c))| work(b, a, bb, c)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => dq
            .par_chunks_mut(seq * d)
            .zip(dk.par_chunks_mut(seq * d))
            .zip(dv.par_chunks_mut(seq * d))
            .enumerate()
            .for_each(|(b, ((a, bb), c))| work(b, a, bb, c)),
    }
    (dq, dk, dv)
}

/// Per-row softmax cross entropy. Returns per-row negative log-likelihoods
/// (accumulated in `f64`) and the row softmax probabilities.
pub fn softmax_xent<T: Float>(logits: &[T], targets: &[u32], vocab: usize) -> (Vec<f64>, Vec<T>) {
    let rows = targets.len();
    let mut nll = vec![0.0; rows];
    let mut probs = vec![T::zero(); logits.len()];
    for r in 0..rows {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let mut max = T::neg_infinity();
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let prow = &mut probs[r * vocab..(r + 1) * vocab];
        let mut total = 0.0f64;
        for (p, &v) in prow.iter_mut().zip(row) {
            let e = (v - max).f64().exp();
            *p = T::of(e);
            total += e;
        }
        for p in prow.iter_mut() {
            *p = T::of(p.f64() / total);
        }
        let t = targets[r] as usize;
        nll[r] = total.ln() - (row[t] - max).f64();
    }
    (nll, probs)
}
