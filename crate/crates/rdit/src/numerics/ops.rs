//! Numeric primitives: RMS normalization, SiLU, softmax, scaled dot-product
//! attention, and low-rank adapters. Each primitive has a forward kernel and
//! an analytic backward kernel; the tape in [`super::tape`] composes them.
//!
//! The public wrappers validate shapes and return [`Result`]; the `*_fwd` /
//! `*_bwd` kernels assert and are meant for internal composition.

use rayon::prelude::*;

use crate::error::{RditError, Result};
use super::tensor::{cast, matmul, matmul_nt, matmul_tn, Element, Tensor};

/// y = x / sqrt(mean(x^2) + eps) * w over the last dimension.
/// Also returns the cached per-row `1/sqrt(mean(x^2)+eps)` for backward.
pub fn rmsnorm_fwd<E: Element>(x: &Tensor<E>, w: &[E], eps: E) -> (Tensor<E>, Vec<E>) {
    let d = x.last_dim();
    assert_eq!(w.len(), d, "rmsnorm weight length");
    let rows = x.rows();
    let mut out = vec![E::zero(); rows * d];
    let mut inv_rms = vec![E::zero(); rows];
    let dd = cast::<E>(d as f64);
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mut ss = E::zero();
        for &v in xr {
            ss = ss + v * v;
        }
        let inv = (ss / dd + eps).sqrt().recip();
        inv_rms[r] = inv;
        for (o, (&v, &wv)) in out[r * d..(r + 1) * d].iter_mut().zip(xr.iter().zip(w)) {
            *o = v * inv * wv;
        }
    }
    (Tensor::new(x.shape().to_vec(), out), inv_rms)
}

/// Backward of [`rmsnorm_fwd`]; returns (grad_x, grad_w).
pub fn rmsnorm_bwd<E: Element>(
    x: &Tensor<E>,
    w: &[E],
    inv_rms: &[E],
    gy: &Tensor<E>,
) -> (Tensor<E>, Vec<E>) {
    let d = x.last_dim();
    let rows = x.rows();
    let mut gx = vec![E::zero(); rows * d];
    let mut gw = vec![E::zero(); d];
    let dd = cast::<E>(d as f64);
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let gr = &gy.data()[r * d..(r + 1) * d];
        let inv = inv_rms[r];
        // dot = sum_j gy_j * w_j * x_j
        let mut dot = E::zero();
        for j in 0..d {
            dot = dot + gr[j] * w[j] * xr[j];
        }
        let k = inv * inv * inv / dd;
        for j in 0..d {
            gx[r * d + j] = inv * gr[j] * w[j] - k * xr[j] * dot;
            gw[j] = gw[j] + gr[j] * xr[j] * inv;
        }
    }
    (Tensor::new(x.shape().to_vec(), gx), gw)
}

#[inline]
pub fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

/// y = x * sigmoid(x).
pub fn silu_fwd<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_bwd<E: Element>(x: &Tensor<E>, gy: &Tensor<E>) -> Tensor<E> {
    x.zip_map(gy, |v, g| {
        let s = sigmoid(v);
        g * s * (E::one() + v * (E::one() - s))
    })
}

/// Row-wise softmax over the last dimension, stabilized by max subtraction.
pub fn softmax_fwd<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let d = x.last_dim();
    let rows = x.rows();
    let mut out = vec![E::zero(); rows * d];
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mut mx = xr[0];
        for &v in xr {
            if v > mx {
                mx = v;
            }
        }
        let orow = &mut out[r * d..(r + 1) * d];
        let mut denom = E::zero();
        for (o, &v) in orow.iter_mut().zip(xr) {
            let e = (v - mx).exp();
            *o = e;
            denom = denom + e;
        }
        for o in orow.iter_mut() {
            *o = *o / denom;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Backward of softmax given its output `y`: gx = y * (gy - sum(gy * y)).
pub fn softmax_bwd<E: Element>(y: &Tensor<E>, gy: &Tensor<E>) -> Tensor<E> {
    let d = y.last_dim();
    let rows = y.rows();
    let mut gx = vec![E::zero(); rows * d];
    for r in 0..rows {
        let yr = &y.data()[r * d..(r + 1) * d];
        let gr = &gy.data()[r * d..(r + 1) * d];
        let mut dot = E::zero();
        for j in 0..d {
            dot = dot + yr[j] * gr[j];
        }
        for j in 0..d {
            gx[r * d + j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), gx)
}

/// Scaled dot-product attention over `[batch, heads, n, head_dim]` inputs.
/// Returns the output and the post-softmax weights `[batch, heads, n, n]`.
pub fn attention_fwd<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let (b, h, n, d) = dims4(q);
    assert_eq!(k.shape(), q.shape(), "attention k shape");
    assert_eq!(v.shape(), q.shape(), "attention v shape");
    let scale = cast::<E>(1.0 / (d as f64).sqrt());
    let mut out = vec![E::zero(); b * h * n * d];
    let mut probs = vec![E::zero(); b * h * n * n];
    let head = |(bh, (orow, prow)): (usize, (&mut [E], &mut [E]))| {
        let qs = &q.data()[bh * n * d..(bh + 1) * n * d];
        let ks = &k.data()[bh * n * d..(bh + 1) * n * d];
        let vs = &v.data()[bh * n * d..(bh + 1) * n * d];
        let mut scores = matmul_nt(qs, ks, n, d, n);
        for s in scores.iter_mut() {
            *s = *s * scale;
        }
        let p = softmax_fwd(&Tensor::new(vec![n, n], scores));
        let o = matmul(p.data(), vs, n, n, d);
        orow.copy_from_slice(&o);
        prow.copy_from_slice(p.data());
    };
    let pairs: Vec<_> = out
        .chunks_mut(n * d)
        .zip(probs.chunks_mut(n * n))
        .enumerate()
        .collect();
    if b * h > 1 && n * n * d >= 1 << 14 {
        pairs.into_par_iter().for_each(head);
    } else {
        pairs.into_iter().for_each(head);
    }
    (
        Tensor::new(vec![b, h, n, d], out),
        Tensor::new(vec![b, h, n, n], probs),
    )
}

/// Backward of attention given cached post-softmax weights.
pub fn attention_bwd<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    probs: &Tensor<E>,
    gout: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (b, h, n, d) = dims4(q);
    let scale = cast::<E>(1.0 / (d as f64).sqrt());
    let mut gq = vec![E::zero(); b * h * n * d];
    let mut gk = vec![E::zero(); b * h * n * d];
    let mut gv = vec![E::zero(); b * h * n * d];
    for bh in 0..b * h {
        let qs = &q.data()[bh * n * d..(bh + 1) * n * d];
        let ks = &k.data()[bh * n * d..(bh + 1) * n * d];
        let vs = &v.data()[bh * n * d..(bh + 1) * n * d];
        let ps = &probs.data()[bh * n * n..(bh + 1) * n * n];
        let gs = &gout.data()[bh * n * d..(bh + 1) * n * d];
        // dV = P^T * dO
        let dv = matmul_tn(ps, gs, n, n, d);
        gv[bh * n * d..(bh + 1) * n * d].copy_from_slice(&dv);
        // dP = dO * V^T, then softmax backward -> dS, then undo the scale
        let dp = matmul_nt(gs, vs, n, d, n);
        let ds = softmax_bwd(
            &Tensor::new(vec![n, n], ps.to_vec()),
            &Tensor::new(vec![n, n], dp),
        );
        let ds = ds.scale(scale);
        // dQ = dS * K ; dK = dS^T * Q
        let dq = matmul(ds.data(), ks, n, n, d);
        gq[bh * n * d..(bh + 1) * n * d].copy_from_slice(&dq);
        let dk = matmul_tn(ds.data(), qs, n, n, d);
        gk[bh * n * d..(bh + 1) * n * d].copy_from_slice(&dk);
    }
    (
        Tensor::new(q.shape().to_vec(), gq),
        Tensor::new(q.shape().to_vec(), gk),
        Tensor::new(q.shape().to_vec(), gv),
    )
}

fn dims4<E: Element>(t: &Tensor<E>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected [batch, heads, n, head_dim]");
    (s[0], s[1], s[2], s[3])
}

/// Low-rank adapter parameters: delta(x) = alpha * (x @ A) @ B.
///
/// `B` starts at zero so a freshly injected branch is an exact no-op.
#[derive(Clone, Debug)]
pub struct LoraParams<E: Element> {
    pub a: Tensor<E>, // [in, rank]
    pub b: Tensor<E>, // [rank, out]
    pub alpha: E,
}

impl<E: Element> LoraParams<E> {
    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }
}

// ---------------------------------------------------------------------------
// Validated public wrappers.
// ---------------------------------------------------------------------------

/// RMS normalization over the last dimension.
pub fn rmsnorm<E: Element>(x: &Tensor<E>, w: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
    if w.shape() != [x.last_dim()] {
        return Err(RditError::shape(
            "rmsnorm",
            format!("weight [{}]", x.last_dim()),
            format!("{:?}", w.shape()),
        ));
    }
    if eps <= 0.0 {
        return Err(RditError::ConfigInvalid {
            field: "eps".into(),
            message: "must be > 0".into(),
        });
    }
    Ok(rmsnorm_fwd(x, w.data(), cast(eps)).0)
}

pub fn silu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    silu_fwd(x)
}

pub fn softmax<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    softmax_fwd(x)
}

/// Scaled dot-product attention; `capture` additionally returns the
/// post-softmax weights.
pub fn attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    capture: bool,
) -> Result<(Tensor<E>, Option<Tensor<E>>)> {
    if q.shape().len() != 4 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(RditError::shape(
            "attention",
            format!("q=k=v of rank 4, q={:?}", q.shape()),
            format!("k={:?} v={:?}", k.shape(), v.shape()),
        ));
    }
    let (out, probs) = attention_fwd(q, k, v);
    Ok((out, capture.then_some(probs)))
}

/// delta = alpha * (x @ A) @ B over the last dimension of `x`.
pub fn lora_apply<E: Element>(x: &Tensor<E>, p: &LoraParams<E>) -> Result<Tensor<E>> {
    let d_in = p.a.shape()[0];
    let rank = p.a.shape()[1];
    if x.last_dim() != d_in || p.b.shape()[0] != rank {
        return Err(RditError::shape(
            "lora_apply",
            format!("x [.., {d_in}], B [{rank}, out]"),
            format!("x {:?}, B {:?}", x.shape(), p.b.shape()),
        ));
    }
    let rows = x.rows();
    let xr = matmul(x.data(), p.a.data(), rows, d_in, rank);
    let d_out = p.b.shape()[1];
    let mut out = matmul(&xr, p.b.data(), rows, rank, d_out);
    for o in out.iter_mut() {
        *o = *o * p.alpha;
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Ok(Tensor::new(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn rmsnorm_unit_rms_input() {
        let x = Tensor::new(vec![1, 4], vec![1.0f64, 1.0, 1.0, 1.0]);
        let w = Tensor::new(vec![4], vec![1.0f64; 4]);
        let y = rmsnorm(&x, &w, 1e-300).unwrap();
        for &v in y.data() {
            assert_close(v, 1.0, 1e-12);
        }
    }

    #[test]
    fn rmsnorm_zero_input() {
        let x = Tensor::<f64>::zeros(vec![2, 3]);
        let w = Tensor::new(vec![3], vec![1.0f64; 3]);
        let y = rmsnorm(&x, &w, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rmsnorm_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(vec![5, 7], 1.3, &mut rng);
        let w = Tensor::<f64>::randn(vec![7], 0.7, &mut rng);
        let eps = 1e-6;
        let y = rmsnorm(&x, &w, eps).unwrap();
        for r in 0..5 {
            let row = &x.data()[r * 7..(r + 1) * 7];
            let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / 7.0;
            for j in 0..7 {
                let want = row[j] / (ms + eps).sqrt() * w.data()[j];
                assert_close(y.data()[r * 7 + j], want, 1e-6);
            }
        }
    }

    #[test]
    fn rmsnorm_rejects_bad_weight_len() {
        let x = Tensor::<f64>::zeros(vec![2, 3]);
        let w = Tensor::<f64>::zeros(vec![4]);
        assert!(rmsnorm(&x, &w, 1e-6).is_err());
    }

    #[test]
    fn silu_zero_is_zero() {
        let x = Tensor::new(vec![1], vec![0.0f64]);
        assert_eq!(silu(&x).data()[0], 0.0);
    }

    #[test]
    fn silu_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::randn(vec![64], 2.0, &mut rng);
        let y = silu(&x);
        for (&xi, &yi) in x.data().iter().zip(y.data()) {
            let want = xi / (1.0 + (-xi).exp());
            assert_close(yi, want, 1e-6);
        }
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let x = Tensor::new(vec![1, 5], vec![3.25f64; 5]);
        let y = softmax(&x);
        for &v in y.data() {
            assert_close(v, 0.2, 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::<f64>::randn(vec![8, 9], 4.0, &mut rng);
        let y = softmax(&x);
        for r in 0..8 {
            let s: f64 = y.data()[r * 9..(r + 1) * 9].iter().sum();
            assert_close(s, 1.0, 1e-9);
        }
    }

    #[test]
    fn softmax_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::<f64>::randn(vec![3, 6], 2.0, &mut rng);
        let y = softmax(&x);
        for r in 0..3 {
            let row = &x.data()[r * 6..(r + 1) * 6];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..6 {
                assert_close(y.data()[r * 6 + j], row[j].exp() / denom, 1e-6);
            }
        }
    }

    #[test]
    fn attention_identical_keys_averages_values() {
        // All keys equal -> uniform weights -> output = mean of v rows.
        let b = 1;
        let h = 1;
        let n = 4;
        let d = 2;
        let q = Tensor::new(vec![b, h, n, d], vec![0.5; 8]);
        let k = Tensor::new(vec![b, h, n, d], vec![1.0; 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let v = Tensor::<f64>::randn(vec![b, h, n, d], 1.0, &mut rng);
        let (out, w) = attention(&q, &k, &v, true).unwrap();
        let mean = |j: usize| (0..n).map(|i| v.data()[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            for j in 0..d {
                assert_close(out.data()[i * d + j], mean(j), 1e-9);
            }
        }
        for &p in w.unwrap().data() {
            assert_close(p, 0.25, 1e-12);
        }
    }

    #[test]
    fn attention_single_token_is_identity_on_v() {
        let q = Tensor::new(vec![1, 2, 1, 3], vec![0.1, 0.2, 0.3, -0.1, -0.2, -0.3]);
        let k = q.clone();
        let v = Tensor::new(vec![1, 2, 1, 3], vec![9.0, 8.0, 7.0, 6.0, 5.0, 4.0]);
        let (out, _) = attention(&q, &k, &v, false).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_matches_brute_force() {
        let (b, h, n, d) = (2usize, 3usize, 5usize, 4usize);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let q = Tensor::<f64>::randn(vec![b, h, n, d], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(vec![b, h, n, d], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(vec![b, h, n, d], 1.0, &mut rng);
        let (out, _) = attention(&q, &k, &v, false).unwrap();
        let scale = 1.0 / (d as f64).sqrt();
        for bh in 0..b * h {
            let at = |t: &Tensor<f64>, i: usize, j: usize| t.data()[bh * n * d + i * d + j];
            for i in 0..n {
                // Brute-force softmax over all scores for query i.
                let scores: Vec<f64> = (0..n)
                    .map(|m| (0..d).map(|j| at(&q, i, j) * at(&k, m, j)).sum::<f64>() * scale)
                    .collect();
                let denom: f64 = scores.iter().map(|s| s.exp()).sum();
                for j in 0..d {
                    let want: f64 = (0..n)
                        .map(|m| scores[m].exp() / denom * at(&v, m, j))
                        .sum();
                    assert_close(out.data()[bh * n * d + i * d + j], want, 1e-6);
                }
            }
        }
    }

    #[test]
    fn attention_output_in_convex_hull_of_values() {
        let (b, h, n, d) = (1usize, 2usize, 6usize, 3usize);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = Tensor::<f64>::randn(vec![b, h, n, d], 1.5, &mut rng);
        let k = Tensor::<f64>::randn(vec![b, h, n, d], 1.5, &mut rng);
        let v = Tensor::<f64>::randn(vec![b, h, n, d], 1.5, &mut rng);
        let (out, _) = attention(&q, &k, &v, false).unwrap();
        for bh in 0..h {
            for j in 0..d {
                let col: Vec<f64> = (0..n).map(|m| v.data()[bh * n * d + m * d + j]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-9;
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-9;
                for i in 0..n {
                    let o = out.data()[bh * n * d + i * d + j];
                    assert!(o >= lo && o <= hi, "outside hull: {o} not in [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn lora_zero_b_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = Tensor::<f64>::randn(vec![3, 6], 1.0, &mut rng);
        let p = LoraParams {
            a: Tensor::<f64>::randn(vec![6, 2], 0.02, &mut rng),
            b: Tensor::<f64>::zeros(vec![2, 6]),
            alpha: 1.0,
        };
        let d = lora_apply(&x, &p).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lora_identity_recovers_input() {
        let n = 4;
        let eye = |s: usize| {
            let mut t = Tensor::<f64>::zeros(vec![s, s]);
            for i in 0..s {
                t.data_mut()[i * s + i] = 1.0;
            }
            t
        };
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = Tensor::<f64>::randn(vec![2, n], 1.0, &mut rng);
        let p = LoraParams { a: eye(n), b: eye(n), alpha: 1.0 };
        let d = lora_apply(&x, &p).unwrap();
        assert!(x.max_abs_diff(&d) < 1e-12);
    }

    #[test]
    fn lora_matches_dense_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = Tensor::<f64>::randn(vec![5, 6], 1.0, &mut rng);
        let p = LoraParams {
            a: Tensor::<f64>::randn(vec![6, 2], 0.5, &mut rng),
            b: Tensor::<f64>::randn(vec![2, 3], 0.5, &mut rng),
            alpha: 0.7,
        };
        let got = lora_apply(&x, &p).unwrap();
        // Dense oracle: W = alpha * A @ B, delta = x @ W.
        let w = matmul(p.a.data(), p.b.data(), 6, 2, 3);
        let dense = matmul(x.data(), &w, 5, 6, 3);
        for (g, dval) in got.data().iter().zip(&dense) {
            assert_close(*g, dval * 0.7, 1e-6);
        }
    }
}
