//! Plain (non-recording) vector math shared by the streaming inference
//! path and the synthesis module's forward evaluation.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `w · x` with `w: [out×in]` stored row-major.
pub fn matvec<F: Scalar>(w: &Tensor<F>, x: &[F]) -> Vec<F> {
    let (rows, cols) = (w.rows(), w.cols());
    debug_assert_eq!(cols, x.len());
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        // eight independent accumulator lanes so the reduction
        // vectorizes; the fixed lane split keeps results deterministic
        let row = w.row(r);
        let mut lanes = [F::zero(); 8];
        let mut cr = row.chunks_exact(8);
        let mut cx = x.chunks_exact(8);
        for (xr, xx) in (&mut cr).zip(&mut cx) {
            for l in 0..8 {
                lanes[l] += xr[l] * xx[l];
            }
        }
        let mut acc = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
            + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
        for (&xr, &xx) in cr.remainder().iter().zip(cx.remainder()) {
            acc += xr * xx;
        }
        out.push(acc);
    }
    out
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// mu⊙a + (1−mu)⊙b, elementwise.
pub fn lerp<F: Scalar>(mu: &[F], a: &[F], b: &[F]) -> Vec<F> {
    let one = F::one();
    (0..a.len()).map(|i| mu[i] * a[i] + (one - mu[i]) * b[i]).collect()
}

pub fn add<F: Scalar>(a: &[F], b: &[F]) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn add_assign<F: Scalar>(a: &mut [F], b: &[F]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

pub fn layernorm<F: Scalar>(x: &[F], gain: &[F], bias: &[F], eps: F) -> Vec<F> {
    let nf = F::from_f64(x.len() as f64);
    let mean = x.iter().copied().sum::<F>() / nf;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
    let inv = (var + eps).sqrt().recip();
    (0..x.len())
        .map(|i| (x[i] - mean) * inv * gain[i] + bias[i])
        .collect()
}

/// Singular values of a small dense matrix, descending, via one-sided
/// Jacobi rotations on the columns. Independent of any factored-form
/// bookkeeping, so it can serve as a rank oracle.
pub fn singular_values(mat: &Tensor<f64>) -> Vec<f64> {
    let (m, n) = (mat.rows(), mat.cols());
    // column-major working copy
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| mat.data()[i * n + j]).collect())
        .collect();
    let tol = 1e-14;
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    app += a[p][i] * a[p][i];
                    aqq += a[q][i] * a[q][i];
                    apq += a[p][i] * a[q][i];
                }
                off = off.max(apq.abs() / (app * aqq).sqrt().max(1e-300));
                if apq.abs() <= tol * (app * aqq).sqrt() {
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (vp, vq) = (a[p][i], a[q][i]);
                    a[p][i] = c * vp - s * vq;
                    a[q][i] = s * vp + c * vq;
                }
            }
        }
        if off < tol {
            break;
        }
    }
    let mut sv: Vec<f64> = a
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// log-softmax of a row, max-shifted.
pub fn log_softmax<F: Scalar>(row: &[F]) -> Vec<F> {
    let lse = crate::graph::log_sum_exp(row);
    row.iter().map(|&v| v - lse).collect()
}
