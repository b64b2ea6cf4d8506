//! Stability-aware gate parameterization.
//!
//! Raw per-token, per-head pre-activations map to constrained gate values
//! (alpha, beta, mu, eta) such that beta_t <= 1 - alpha_t holds by
//! construction: eta sets an angle theta = atan(eta * s), and the budgets
//! alpha_max = cos^2(theta), beta_max = sin^2(theta) split exactly to 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Knobs of the gate map. `a`, `b` shape the decay function
/// f(x) = -a * softplus(x + b); `s` scales the angle; `tau` tempers eta;
/// `mu_min_log` clamps log mu from below.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GateConfig {
    pub a: f64,
    pub b: f64,
    pub s: f64,
    pub tau: f64,
    pub mu_min_log: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            a: 1.0,
            b: 0.0,
            s: 1.0,
            tau: 1.0,
            mu_min_log: -2.0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) {
            return Err(Error::Precondition(format!("gate config: a must be > 0, got {}", self.a)));
        }
        if !(self.s > 0.0) {
            return Err(Error::Precondition(format!("gate config: s must be > 0, got {}", self.s)));
        }
        if !(self.tau >= 1.0) {
            return Err(Error::Precondition(format!(
                "gate config: tau must be >= 1, got {}",
                self.tau
            )));
        }
        if !(self.mu_min_log <= 0.0) {
            return Err(Error::Precondition(format!(
                "gate config: mu_min_log must be <= 0, got {}",
                self.mu_min_log
            )));
        }
        Ok(())
    }
}

/// Per-token, per-head gate values over a [B, T, H] grid. alpha and mu are
/// carried in the log domain; beta and eta linearly.
#[derive(Debug, Clone)]
pub struct GateSeq<T: Scalar> {
    pub log_alpha: Tensor<T>,
    pub log_mu: Tensor<T>,
    pub beta: Tensor<T>,
    pub eta: Tensor<T>,
}

impl<T: Scalar> GateSeq<T> {
    pub fn new(
        log_alpha: Tensor<T>,
        log_mu: Tensor<T>,
        beta: Tensor<T>,
        eta: Tensor<T>,
    ) -> Result<Self> {
        let dims = log_alpha.dims().to_vec();
        if dims.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "gate tensors must be [B, T, H], got {:?}",
                dims
            )));
        }
        for (name, t) in [("log_mu", &log_mu), ("beta", &beta), ("eta", &eta)] {
            if t.dims() != dims {
                return Err(Error::ShapeMismatch(format!(
                    "{name} dims {:?} do not match log_alpha dims {:?}",
                    t.dims(),
                    dims
                )));
            }
        }
        Ok(GateSeq {
            log_alpha,
            log_mu,
            beta,
            eta,
        })
    }

    pub fn dims(&self) -> &[usize] {
        self.log_alpha.dims()
    }

    /// Uniform gates across the grid, handy for reductions and CLI overrides.
    pub fn constant(dims: &[usize; 3], log_alpha: T, log_mu: T, beta: T, eta: T) -> Self {
        GateSeq {
            log_alpha: Tensor::from_fn(dims, |_| log_alpha),
            log_mu: Tensor::from_fn(dims, |_| log_mu),
            beta: Tensor::from_fn(dims, |_| beta),
            eta: Tensor::from_fn(dims, |_| eta),
        }
    }
}

/// softplus with the standard large-input shortcut so f stays finite for any
/// finite pre-activation.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    let threshold = T::from_f64(30.0);
    if x > threshold {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Single-element gate map; the tensor version below is this applied
/// pointwise. Returns (log_alpha, log_mu, beta, eta).
#[inline]
pub fn gate_values<T: Scalar>(
    pre_alpha: T,
    pre_beta: T,
    pre_mu: T,
    pre_eta: T,
    cfg: &GateConfig,
) -> (T, T, T, T) {
    let a = T::from_f64(cfg.a);
    let b = T::from_f64(cfg.b);
    let s = T::from_f64(cfg.s);
    let tau = T::from_f64(cfg.tau);
    let mu_min_log = T::from_f64(cfg.mu_min_log);

    let eta = (pre_eta / tau).tanh() + T::ONE;
    let theta = (eta * s).atan();
    let cos_t = theta.cos();
    let sin_t = theta.sin();
    let log_alpha_max = T::from_f64(2.0) * cos_t.ln();
    let beta_max = sin_t * sin_t;

    let f_alpha = -a * softplus(pre_alpha + b);
    let log_alpha = f_alpha + log_alpha_max;
    let beta = sigmoid(pre_beta) * beta_max;
    let f_mu = -a * softplus(pre_mu + b);
    let log_mu = f_mu.max(mu_min_log);

    (log_alpha, log_mu, beta, eta)
}

/// Map pre-activation grids to a constrained GateSeq.
pub fn compute_gates<T: Scalar>(
    pre_alpha: &Tensor<T>,
    pre_beta: &Tensor<T>,
    pre_mu: &Tensor<T>,
    pre_eta: &Tensor<T>,
    cfg: &GateConfig,
) -> Result<GateSeq<T>> {
    cfg.validate()?;
    let dims = pre_alpha.dims().to_vec();
    for (name, t) in [("pre_beta", pre_beta), ("pre_mu", pre_mu), ("pre_eta", pre_eta)] {
        if t.dims() != dims {
            return Err(Error::ShapeMismatch(format!(
                "{name} dims {:?} do not match pre_alpha dims {:?}",
                t.dims(),
                dims
            )));
        }
    }
    let n = pre_alpha.len();
    let mut log_alpha = vec![T::ZERO; n];
    let mut log_mu = vec![T::ZERO; n];
    let mut beta = vec![T::ZERO; n];
    let mut eta = vec![T::ZERO; n];
    for i in 0..n {
        let (la, lm, be, et) = gate_values(
            pre_alpha.data()[i],
            pre_beta.data()[i],
            pre_mu.data()[i],
            pre_eta.data()[i],
            cfg,
        );
        log_alpha[i] = la;
        log_mu[i] = lm;
        beta[i] = be;
        eta[i] = et;
    }
    GateSeq::new(
        Tensor::from_vec(&dims, log_alpha)?,
        Tensor::from_vec(&dims, log_mu)?,
        Tensor::from_vec(&dims, beta)?,
        Tensor::from_vec(&dims, eta)?,
    )
}

/// Pointwise vector-Jacobian product of the gate map: pulls cotangents on
/// (log_alpha, log_mu, beta, eta) back to the four pre-activations.
///
/// eta feeds the alpha/beta budgets through theta, so d_pre_eta collects
/// terms from all three downstream gates. The mu clamp zeroes its branch
/// when active.
#[inline]
pub fn gate_values_vjp<T: Scalar>(
    pre_alpha: T,
    pre_beta: T,
    pre_mu: T,
    pre_eta: T,
    cfg: &GateConfig,
    d_log_alpha: T,
    d_log_mu: T,
    d_beta: T,
    d_eta_in: T,
) -> (T, T, T, T) {
    let a = T::from_f64(cfg.a);
    let b = T::from_f64(cfg.b);
    let s = T::from_f64(cfg.s);
    let tau = T::from_f64(cfg.tau);
    let mu_min_log = T::from_f64(cfg.mu_min_log);
    let two = T::from_f64(2.0);

    let th = (pre_eta / tau).tanh();
    let eta = th + T::ONE;
    let theta = (eta * s).atan();
    let sin_t = theta.sin();
    let cos_t = theta.cos();
    let beta_max = sin_t * sin_t;
    let sig_b = sigmoid(pre_beta);

    // f'(x) = -a * sigmoid(x + b)
    let df_alpha = -a * sigmoid(pre_alpha + b);
    let df_mu = -a * sigmoid(pre_mu + b);

    let d_pre_alpha = d_log_alpha * df_alpha;

    let f_mu = -a * softplus(pre_mu + b);
    let d_pre_mu = if f_mu > mu_min_log { d_log_mu * df_mu } else { T::ZERO };

    let d_pre_beta = d_beta * beta_max * sig_b * (T::ONE - sig_b);

    // eta chain: d theta / d eta = s / (1 + (eta s)^2); d eta / d pre = (1 - th^2) / tau.
    let d_theta_d_eta = s / (T::ONE + (eta * s) * (eta * s));
    let d_eta_d_pre = (T::ONE - th * th) / tau;
    // log alpha_max = 2 ln cos(theta)  =>  d / d theta = -2 tan(theta)
    let d_logamax_d_theta = -two * sin_t / cos_t;
    // beta_max = sin^2(theta)          =>  d / d theta = sin(2 theta)
    let d_betamax_d_theta = two * sin_t * cos_t;
    let d_theta_total = d_log_alpha * d_logamax_d_theta + d_beta * sig_b * d_betamax_d_theta;
    let d_pre_eta = (d_eta_in + d_theta_total * d_theta_d_eta) * d_eta_d_pre;

    (d_pre_alpha, d_pre_beta, d_pre_mu, d_pre_eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn neutral_cfg() -> GateConfig {
        GateConfig {
            a: 1.0,
            b: 0.0,
            s: 1.0,
            tau: 1.0,
            mu_min_log: -2.0,
        }
    }

    #[test]
    fn zero_preactivations_hit_the_worked_values() {
        let (la, lm, be, et) = gate_values(0.0f64, 0.0, 0.0, 0.0, &neutral_cfg());
        let ln2 = 2.0f64.ln();
        assert!((et - 1.0).abs() < 1e-15);
        assert!((la - (-2.0 * ln2)).abs() < 1e-15, "log alpha {la}");
        assert!((la.exp() - 0.25).abs() < 1e-15);
        assert!((be - 0.25).abs() < 1e-15);
        assert!((lm - (-ln2)).abs() < 1e-15);
        assert!((lm.exp() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mu_clamp_binds_for_very_negative_preactivation() {
        let (_, lm, _, _) = gate_values(0.0f64, 0.0, 40.0, 0.0, &neutral_cfg());
        assert_eq!(lm, -2.0);
        // pre_mu -> +inf drives f -> -inf; the reported clamp is -2.
        let (_, lm2, _, _) = gate_values(0.0f64, 0.0, 1e6, 0.0, &neutral_cfg());
        assert_eq!(lm2, -2.0);
    }

    #[test]
    fn budgets_split_exactly() {
        // cos^2 + sin^2 = 1 regardless of eta, so beta_t <= 1 - alpha_t.
        let cfg = neutral_cfg();
        for i in 0..1000 {
            let x = (i as f64) * 0.017 - 8.0;
            let (la, _, be, et) = gate_values(x, -x, x * 0.5, x * 0.3, &cfg);
            let theta = (et * cfg.s).atan();
            let amax = theta.cos().powi(2);
            let bmax = theta.sin().powi(2);
            assert!((amax + bmax - 1.0).abs() < 1e-15);
            let alpha = la.exp();
            assert!(alpha > 0.0 && alpha < amax);
            assert!(be > 0.0 && be < bmax);
            assert!(be < 1.0 - alpha, "quadrant constraint violated");
            assert!(et > 0.0 && et < 2.0);
        }
    }

    #[test]
    fn alpha_is_monotone_nonincreasing_in_its_preactivation() {
        let cfg = neutral_cfg();
        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let x = -10.0 + i as f64 * 0.1;
            let (la, _, _, _) = gate_values(x, 0.0, 0.0, 0.0, &cfg);
            assert!(la <= prev);
            prev = la;
        }
    }

    #[test]
    fn compute_gates_validates_shapes() {
        let a = Tensor::<f64>::zeros(&[1, 4, 1]);
        let b = Tensor::<f64>::zeros(&[1, 5, 1]);
        assert!(compute_gates(&a, &b, &a, &a, &GateConfig::default()).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = GateConfig {
            a: 0.5,
            b: 1.0,
            s: 2.0,
            tau: 8.0,
            mu_min_log: -1.0,
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"tau\""));
        assert!(s.contains("\"mu_min_log\""));
        let back: GateConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let cfg = GateConfig {
            a: 0.8,
            b: 0.2,
            s: 1.3,
            tau: 2.0,
            mu_min_log: -2.0,
        };
        let h = 1e-6;
        // Random-ish cotangents and inputs; avoid the clamp boundary.
        let cases = [
            (0.3f64, -0.4, 0.1, 0.7),
            (-1.2, 0.9, -0.8, -0.5),
            (2.0, 2.0, -3.0, 1.5),
        ];
        let cot = (0.7f64, -1.1, 0.4, 0.9);
        for &(pa, pb, pm, pe) in &cases {
            let (dpa, dpb, dpm, dpe) =
                gate_values_vjp(pa, pb, pm, pe, &cfg, cot.0, cot.1, cot.2, cot.3);
            let loss = |pa: f64, pb: f64, pm: f64, pe: f64| {
                let (la, lm, be, et) = gate_values(pa, pb, pm, pe, &cfg);
                cot.0 * la + cot.1 * lm + cot.2 * be + cot.3 * et
            };
            let num_pa = (loss(pa + h, pb, pm, pe) - loss(pa - h, pb, pm, pe)) / (2.0 * h);
            let num_pb = (loss(pa, pb + h, pm, pe) - loss(pa, pb - h, pm, pe)) / (2.0 * h);
            let num_pm = (loss(pa, pb, pm + h, pe) - loss(pa, pb, pm - h, pe)) / (2.0 * h);
            let num_pe = (loss(pa, pb, pm, pe + h) - loss(pa, pb, pm, pe - h)) / (2.0 * h);
            for (got, want) in [(dpa, num_pa), (dpb, num_pb), (dpm, num_pm), (dpe, num_pe)] {
                assert!(
                    (got - want).abs() <= 1e-6 * (1.0 + want.abs()),
                    "vjp {got} vs fd {want}"
                );
            }
        }
    }
}
