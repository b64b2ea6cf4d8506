//! Per-chunk decoupled update coefficients.
//!
//! For gates (alpha_i, mu_i, beta_i), i = 1..C inside one chunk:
//!
//!   mubar_t  = prod mu_i        abar_t = prod alpha_i
//!   c_t      = sum_{i<=t} beta_i mubar_i / abar_i
//!   b_t      = abar_t c_t
//!   gamma_ti = (abar_t / mubar_i) (c_t - c_{i-1})     for i <= t
//!
//! The production path works in the log domain with the chunkwise
//! log-sum-exp prefix; `naive_coefficients` evaluates the products and sums
//! directly in f64 and serves as the oracle on moderate inputs.

use crate::error::{Error, Result};
use crate::tensor::{cumsum_slice, log_cumsum_exp_tril, Scalar};

/// Default additive guard applied to beta before taking logs. Zero: a beta
/// of exactly zero becomes a -inf log entry, which the sentinel handling
/// below absorbs exactly, so the guard is only needed when mirroring
/// implementations that cannot special-case -inf.
pub const DEFAULT_BETA_LOG_GUARD: f64 = 0.0;

/// Log-cumulative products, the c/b vectors, and both Gamma masks for one
/// chunk of size C.
#[derive(Debug, Clone)]
pub struct ChunkCoeffs<T: Scalar> {
    pub chunk_size: usize,
    /// cumsum of log alpha.
    pub log_abar: Vec<T>,
    /// cumsum of log mu.
    pub log_mbar: Vec<T>,
    /// log c_t (non-decreasing; -inf while the prefix is empty of weight).
    pub log_c: Vec<T>,
    /// b_t = abar_t c_t.
    pub b: Vec<T>,
    /// Lower-triangular Gamma including the diagonal, row-major C x C.
    pub gamma: Vec<T>,
    /// Row-shifted Gamma: row 0 zero, row t holds Gamma row t-1. Strictly
    /// lower triangular.
    pub gamma_strict: Vec<T>,
    /// b shifted one step: [0, b_1, .., b_{C-1}].
    pub b_prev: Vec<T>,
    /// log abar shifted one step: [0, log abar_1, .., log abar_{C-1}]
    /// (abar_0 = 1).
    pub log_abar_prev: Vec<T>,
}

impl<T: Scalar> ChunkCoeffs<T> {
    /// gamma entry (row t, col i), diagonal-inclusive mask.
    pub fn gamma_at(&self, t: usize, i: usize) -> T {
        self.gamma[t * self.chunk_size + i]
    }

    /// Last row of the diagonal-inclusive Gamma, used by the state update.
    pub fn gamma_last_row(&self) -> &[T] {
        let c = self.chunk_size;
        &self.gamma[(c - 1) * c..]
    }
}

/// Log-domain coefficient computation for one chunk.
///
/// `beta_log_guard` is added to beta before the log (the classic log(beta +
/// eps) guard); the default of zero relies on exact -inf sentinel handling
/// instead and keeps the chunkwise kernel bit-consistent with the recurrent
/// reference.
pub fn chunk_coefficients<T: Scalar>(
    log_alpha: &[T],
    log_mu: &[T],
    beta: &[T],
    chunk_index: usize,
    beta_log_guard: T,
) -> Result<ChunkCoeffs<T>> {
    let c = log_alpha.len();
    if log_mu.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "gate slices of lengths {}, {}, {} in one chunk",
            c,
            log_mu.len(),
            beta.len()
        )));
    }
    for (&la, &lm) in log_alpha.iter().zip(log_mu.iter()) {
        if la > T::ZERO || lm > T::ZERO || la.is_nan() || lm.is_nan() {
            return Err(Error::Precondition(
                "log alpha and log mu must be <= 0".into(),
            ));
        }
    }
    for &b in beta {
        if !(b >= T::ZERO) || !(b < T::ONE) {
            return Err(Error::Precondition(format!(
                "beta must lie in [0, 1), got {b}"
            )));
        }
    }

    let mut log_abar = log_alpha.to_vec();
    cumsum_slice(&mut log_abar);
    let mut log_mbar = log_mu.to_vec();
    cumsum_slice(&mut log_mbar);

    // log(beta + guard) + log mubar - log abar, then the prefix log-sum-exp.
    let mut log_c_in = vec![T::ZERO; c];
    for i in 0..c {
        log_c_in[i] = (beta[i] + beta_log_guard).ln() + log_mbar[i] - log_abar[i];
    }
    let log_c = log_cumsum_exp_tril(&log_c_in, chunk_index);

    let mut b = vec![T::ZERO; c];
    for i in 0..c {
        b[i] = (log_abar[i] + log_c[i]).exp();
    }

    // gamma_ti = (abar_t / mbar_i)(c_t - c_{i-1}). The difference is a
    // window of the positive c increments, so it is summed directly under a
    // running window max instead of via 1 - exp(log c_{i-1} - log c_t): the
    // latter turns into noise times a huge prefactor once the cumulative
    // decays drift apart. Sweeping i downward per row keeps this O(C^2).
    let mut gamma = vec![T::ZERO; c * c];
    for t in 0..c {
        let mut wmax = T::NEG_INFINITY;
        let mut wsum = T::ZERO;
        for i in (0..=t).rev() {
            let x = log_c_in[i];
            if x != T::NEG_INFINITY {
                if x > wmax {
                    wsum = if wmax == T::NEG_INFINITY {
                        T::ONE
                    } else {
                        wsum * (wmax - x).exp() + T::ONE
                    };
                    wmax = x;
                } else {
                    wsum += (x - wmax).exp();
                }
            }
            if wmax != T::NEG_INFINITY {
                // wsum >= 1, so the exponent is at most log gamma_ti.
                gamma[t * c + i] = (log_abar[t] - log_mbar[i] + wmax).exp() * wsum;
            }
        }
    }

    let mut gamma_strict = vec![T::ZERO; c * c];
    for t in 1..c {
        let (src, dst) = ((t - 1) * c, t * c);
        for i in 0..c {
            gamma_strict[dst + i] = gamma[src + i];
        }
    }

    let mut b_prev = vec![T::ZERO; c];
    let mut log_abar_prev = vec![T::ZERO; c];
    for i in 1..c {
        b_prev[i] = b[i - 1];
        log_abar_prev[i] = log_abar[i - 1];
    }

    Ok(ChunkCoeffs {
        chunk_size: c,
        log_abar,
        log_mbar,
        log_c,
        b,
        gamma,
        gamma_strict,
        b_prev,
        log_abar_prev,
    })
}

/// Direct f64 evaluation of the coefficient definitions with running
/// products and sums; no log domain. Oracle only: overflows on extreme
/// decay ratios are reported as errors rather than absorbed.
pub fn naive_coefficients(alpha: &[f64], mu: &[f64], beta: &[f64]) -> Result<ChunkCoeffs<f64>> {
    let c = alpha.len();
    if mu.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch("gate slices of unequal length".into()));
    }

    let mut abar = vec![0.0; c];
    let mut mbar = vec![0.0; c];
    let mut cvec = vec![0.0; c];
    let mut running_a = 1.0;
    let mut running_m = 1.0;
    let mut running_c = 0.0;
    for i in 0..c {
        running_a *= alpha[i];
        running_m *= mu[i];
        abar[i] = running_a;
        mbar[i] = running_m;
        running_c += beta[i] * running_m / running_a;
        cvec[i] = running_c;
        if !running_c.is_finite() || !running_a.is_finite() || !running_m.is_finite() {
            return Err(Error::NonFinite(format!(
                "naive coefficient overflow at position {i}"
            )));
        }
    }

    let mut b = vec![0.0; c];
    for i in 0..c {
        b[i] = abar[i] * cvec[i];
    }

    // gamma_ti = (abar_t / mbar_i)(c_t - c_{i-1}); the difference expands to
    // sum_{l=i..t} beta_l mbar_l / (abar_l mbar_i) scaled by abar_t, summed
    // brute-force per entry so the oracle keeps full relative precision even
    // where c_t and c_{i-1} agree to many digits.
    let mut gamma = vec![0.0; c * c];
    for t in 0..c {
        for i in 0..=t {
            let mut acc = 0.0;
            for l in i..=t {
                acc += beta[l] * (abar[t] / abar[l]) * (mbar[l] / mbar[i]);
            }
            gamma[t * c + i] = acc;
        }
    }
    if gamma.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("naive gamma overflow".into()));
    }

    let mut gamma_strict = vec![0.0; c * c];
    for t in 1..c {
        for i in 0..c {
            gamma_strict[t * c + i] = gamma[(t - 1) * c + i];
        }
    }

    let mut b_prev = vec![0.0; c];
    let mut log_abar_prev = vec![0.0; c];
    for i in 1..c {
        b_prev[i] = b[i - 1];
        log_abar_prev[i] = abar[i - 1].ln();
    }

    Ok(ChunkCoeffs {
        chunk_size: c,
        log_abar: abar.iter().map(|x| x.ln()).collect(),
        log_mbar: mbar.iter().map(|x| x.ln()).collect(),
        log_c: cvec.iter().map(|x| x.ln()).collect(),
        b,
        gamma,
        gamma_strict,
        b_prev,
        log_abar_prev,
    })
}
