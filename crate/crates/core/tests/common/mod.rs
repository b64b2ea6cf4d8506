//! Shared oracles and generators for the integration suites. Everything in
//! here is independent of the kernel code paths it checks: the reference
//! recurrences are coded directly from their update rules, and the helpers
//! re-derive quantities with plain f64 arithmetic.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mdn_core::gating::{compute_gates, GateConfig, GateSeq};
use mdn_core::recurrent::AttnInputs;
use mdn_core::tensor::{Scalar, Tensor};

/// Random instance shape.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub b: usize,
    pub t: usize,
    pub h: usize,
    pub dk: usize,
    pub dv: usize,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi))
}

/// Normalize the last axis of a [B, T, H, d] tensor to unit L2 norm.
pub fn l2_normalize_rows(t: &mut Tensor<f64>) {
    let d = *t.dims().last().unwrap();
    let rows = t.len() / d;
    let data = t.data_mut();
    for r in 0..rows {
        let row = &mut data[r * d..(r + 1) * d];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in row.iter_mut() {
                *x /= norm;
            }
        }
    }
}

/// Quadrant-constrained gates: random pre-activations through the gate map.
pub fn random_gates(rng: &mut ChaCha8Rng, dims: &[usize; 3]) -> GateSeq<f64> {
    let pre_a = random_tensor(rng, dims, -2.0, 2.0);
    let pre_b = random_tensor(rng, dims, -2.0, 2.0);
    let pre_m = random_tensor(rng, dims, -2.0, 2.0);
    let pre_e = random_tensor(rng, dims, -2.0, 2.0);
    compute_gates(&pre_a, &pre_b, &pre_m, &pre_e, &GateConfig::default()).unwrap()
}

/// Full random instance with quadrant-constrained gates and unit keys.
pub fn random_instance(seed: u64, shape: Shape) -> AttnInputs<f64> {
    let mut r = rng(seed);
    let Shape { b, t, h, dk, dv } = shape;
    let q = random_tensor(&mut r, &[b, t, h, dk], -1.0, 1.0);
    let mut k = random_tensor(&mut r, &[b, t, h, dk], -1.0, 1.0);
    l2_normalize_rows(&mut k);
    let v = random_tensor(&mut r, &[b, t, h, dv], -1.0, 1.0);
    let gates = random_gates(&mut r, &[b, t, h]);
    AttnInputs::new(q, k, v, gates, None).unwrap()
}

// ---------------------------------------------------------------------------
// Reference recurrences, one per update-rule row.
// ---------------------------------------------------------------------------

/// Gated DeltaNet: S_t = alpha_t (I - beta_t k k^T) S_{t-1} + beta_t k v^T,
/// o_t = S_t^T (scale q_t).
pub fn gdn_reference(inputs: &AttnInputs<f64>) -> Tensor<f64> {
    single_state_reference(inputs, |alpha, beta, k, v, s, dk, dv| {
        // kts = k^T S
        let mut kts = vec![0.0; dv];
        for i in 0..dk {
            for j in 0..dv {
                kts[j] += k[i] * s[i * dv + j];
            }
        }
        let mut next = vec![0.0; dk * dv];
        for i in 0..dk {
            for j in 0..dv {
                next[i * dv + j] =
                    alpha * (s[i * dv + j] - beta * k[i] * kts[j]) + beta * k[i] * v[j];
            }
        }
        next
    })
}

/// DeltaNet: S_t = (I - beta_t k k^T) S_{t-1} + beta_t k v^T.
pub fn deltanet_reference(inputs: &AttnInputs<f64>) -> Tensor<f64> {
    single_state_reference(inputs, |_alpha, beta, k, v, s, dk, dv| {
        let mut kts = vec![0.0; dv];
        for i in 0..dk {
            for j in 0..dv {
                kts[j] += k[i] * s[i * dv + j];
            }
        }
        let mut next = vec![0.0; dk * dv];
        for i in 0..dk {
            for j in 0..dv {
                next[i * dv + j] = s[i * dv + j] - beta * k[i] * kts[j] + beta * k[i] * v[j];
            }
        }
        next
    })
}

/// Decay rule: S_t = alpha_t S_{t-1} + beta_t k v^T.
pub fn decay_reference(inputs: &AttnInputs<f64>) -> Tensor<f64> {
    single_state_reference(inputs, |alpha, beta, k, v, s, dk, dv| {
        let mut next = vec![0.0; dk * dv];
        for i in 0..dk {
            for j in 0..dv {
                next[i * dv + j] = alpha * s[i * dv + j] + beta * k[i] * v[j];
            }
        }
        next
    })
}

fn single_state_reference(
    inputs: &AttnInputs<f64>,
    step: impl Fn(f64, f64, &[f64], &[f64], &[f64], usize, usize) -> Vec<f64>,
) -> Tensor<f64> {
    let (b, t_len, h, dk, dv) = inputs.shape();
    let mut out = Tensor::zeros(&[b, t_len, h, dv]);
    for bi in 0..b {
        for hi in 0..h {
            let mut s = vec![0.0; dk * dv];
            for t in 0..t_len {
                let tok = (bi * t_len + t) * h + hi;
                let k = &inputs.k.data()[tok * dk..(tok + 1) * dk];
                let v = &inputs.v.data()[tok * dv..(tok + 1) * dv];
                let q = &inputs.q.data()[tok * dk..(tok + 1) * dk];
                let alpha = inputs.gates.log_alpha.data()[tok].exp();
                let beta = inputs.gates.beta.data()[tok];
                s = step(alpha, beta, k, v, &s, dk, dv);
                let orow = &mut out.data_mut()[tok * dv..(tok + 1) * dv];
                for i in 0..dk {
                    let qi = inputs.scale * q[i];
                    for j in 0..dv {
                        orow[j] += qi * s[i * dv + j];
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Spectral helpers.
// ---------------------------------------------------------------------------

/// |det(A - lambda I)| via complex LU with partial pivoting.
pub fn char_poly_residual(a: &Tensor<f64>, lambda: num_complex::Complex64) -> f64 {
    use num_complex::Complex64;
    let n = a.dims()[0];
    let mut m: Vec<Complex64> = a.data().iter().map(|&x| Complex64::new(x, 0.0)).collect();
    for i in 0..n {
        m[i * n + i] -= lambda;
    }
    let mut det = Complex64::new(1.0, 0.0);
    for col in 0..n {
        // Pivot on the largest magnitude in this column.
        let mut pivot = col;
        let mut best = m[col * n + col].norm();
        for row in (col + 1)..n {
            let mag = m[row * n + col].norm();
            if mag > best {
                best = mag;
                pivot = row;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
            }
            det = -det;
        }
        let d = m[col * n + col];
        det *= d;
        for row in (col + 1)..n {
            let factor = m[row * n + col] / d;
            for j in col..n {
                let sub = factor * m[col * n + j];
                m[row * n + j] -= sub;
            }
        }
    }
    det.norm()
}

/// Frobenius norm of a matrix tensor.
pub fn frob(a: &Tensor<f64>) -> f64 {
    a.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Alternate computation routes for tensor-core primitives.
// ---------------------------------------------------------------------------

/// Row-iterative in-place inversion of I + A for strictly lower triangular
/// A, the accumulate-by-rows scheme: start from -A, then for each row i add
/// the products of its entries with the already-finalized rows above.
pub fn iterative_tril_inverse(a_strict: &[f64], c: usize) -> Vec<f64> {
    let mut inv: Vec<f64> = a_strict.iter().map(|x| -x).collect();
    for i in 1..c {
        let row_snapshot: Vec<f64> = inv[i * c..(i + 1) * c].to_vec();
        for j in 0..i {
            let mut acc = 0.0;
            for k in 0..c {
                acc += row_snapshot[k] * inv[k * c + j];
            }
            inv[i * c + j] += acc;
        }
    }
    for i in 0..c {
        inv[i * c + i] += 1.0;
    }
    inv
}

/// log(cumsum(exp(x))) computed directly; valid for moderate |x|.
pub fn naive_log_cumsum_exp(x: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    x.iter()
        .map(|&v| {
            acc += v.exp();
            acc.ln()
        })
        .collect()
}

/// Largest |a - b| over max(scale) for two tensors.
pub fn tensor_norm_rel_err<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    mdn_core::tensor::norm_rel_err(a.data(), b.data())
}
