//! Reverse-mode gradients of the recurrent forward.
//!
//! The adjoint reverses each step of
//!
//!   vtilde = v - S^T (alpha k),  M' = mu M - eta k vtilde^T,
//!   S' = alpha S - beta M',      o = S'^T (scale q)
//!
//! for the scalar loss L = sum <grad_O, O>. States are not stored for the
//! whole sequence; a forward prepass checkpoints (S, M) every
//! `CHECKPOINT_STEPS` tokens and the backward recomputes inside each span.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::recurrent::{AttnInputs, DualState};
use crate::tensor::{Scalar, Tensor};

/// Span length between state checkpoints during backward recomputation.
pub const CHECKPOINT_STEPS: usize = 64;

/// Gradients with respect to every forward input, shapes mirroring them.
/// `d_init` carries the per-lane gradients for both initial matrices (S in
/// `.s`, M in `.m`).
#[derive(Debug, Clone)]
pub struct GradBundle<T: Scalar> {
    pub d_q: Tensor<T>,
    pub d_k: Tensor<T>,
    pub d_v: Tensor<T>,
    pub d_log_alpha: Tensor<T>,
    pub d_log_mu: Tensor<T>,
    pub d_beta: Tensor<T>,
    pub d_eta: Tensor<T>,
    pub d_init: Vec<DualState<T>>,
}

impl<T: Scalar> GradBundle<T> {
    pub fn all_finite(&self) -> bool {
        self.d_q.all_finite()
            && self.d_k.all_finite()
            && self.d_v.all_finite()
            && self.d_log_alpha.all_finite()
            && self.d_log_mu.all_finite()
            && self.d_beta.all_finite()
            && self.d_eta.all_finite()
            && self.d_init.iter().all(|s| s.all_finite())
    }
}

struct LaneGrads<T: Scalar> {
    d_q: Vec<T>,
    d_k: Vec<T>,
    d_v: Vec<T>,
    d_log_alpha: Vec<T>,
    d_log_mu: Vec<T>,
    d_beta: Vec<T>,
    d_eta: Vec<T>,
    d_init: DualState<T>,
}

/// Exact reverse-mode gradients of L = sum <grad_O, O> for the recurrent
/// forward with the derived correction stream p = alpha k. Lanes run in
/// parallel; within a lane the sweep is strictly reverse-time.
pub fn mdn_recurrent_backward<T: Scalar>(
    inputs: &AttnInputs<T>,
    grad_o: &Tensor<T>,
    init: Option<&[DualState<T>]>,
) -> Result<GradBundle<T>> {
    if inputs.p.is_some() {
        return Err(Error::Precondition(
            "backward is defined for the derived correction stream p = alpha k".into(),
        ));
    }
    let (b, t_len, h, dk, dv) = inputs.shape();
    if grad_o.dims() != [b, t_len, h, dv] {
        return Err(Error::ShapeMismatch(format!(
            "grad_O dims {:?} do not match output dims {:?}",
            grad_o.dims(),
            [b, t_len, h, dv]
        )));
    }
    let lanes = b * h;
    if let Some(init) = init {
        if init.len() != lanes {
            return Err(Error::ShapeMismatch(format!(
                "{} initial states for {} lanes",
                init.len(),
                lanes
            )));
        }
    }

    let per_lane: Vec<LaneGrads<T>> = (0..lanes)
        .into_par_iter()
        .map(|lane| backward_lane(inputs, grad_o, init, lane))
        .collect();

    let mut d_q = Tensor::zeros(&[b, t_len, h, dk]);
    let mut d_k = Tensor::zeros(&[b, t_len, h, dk]);
    let mut d_v = Tensor::zeros(&[b, t_len, h, dv]);
    let mut d_log_alpha = Tensor::zeros(&[b, t_len, h]);
    let mut d_log_mu = Tensor::zeros(&[b, t_len, h]);
    let mut d_beta = Tensor::zeros(&[b, t_len, h]);
    let mut d_eta = Tensor::zeros(&[b, t_len, h]);
    let mut d_init = Vec::with_capacity(lanes);

    for (lane, lg) in per_lane.into_iter().enumerate() {
        let (bi, hi) = (lane / h, lane % h);
        for t in 0..t_len {
            let tok = (bi * t_len + t) * h + hi;
            d_q.data_mut()[tok * dk..(tok + 1) * dk]
                .copy_from_slice(&lg.d_q[t * dk..(t + 1) * dk]);
            d_k.data_mut()[tok * dk..(tok + 1) * dk]
                .copy_from_slice(&lg.d_k[t * dk..(t + 1) * dk]);
            d_v.data_mut()[tok * dv..(tok + 1) * dv]
                .copy_from_slice(&lg.d_v[t * dv..(t + 1) * dv]);
            d_log_alpha.data_mut()[tok] = lg.d_log_alpha[t];
            d_log_mu.data_mut()[tok] = lg.d_log_mu[t];
            d_beta.data_mut()[tok] = lg.d_beta[t];
            d_eta.data_mut()[tok] = lg.d_eta[t];
        }
        d_init.push(lg.d_init);
    }

    Ok(GradBundle {
        d_q,
        d_k,
        d_v,
        d_log_alpha,
        d_log_mu,
        d_beta,
        d_eta,
        d_init,

    })
}

fn backward_lane<T: Scalar>(
    inputs: &AttnInputs<T>,
    grad_o: &Tensor<T>,
    init: Option<&[DualState<T>]>,
    lane: usize,
) -> LaneGrads<T> {
    let (_, t_len, h, dk, dv) = inputs.shape();
    let (bi, hi) = (lane / h, lane % h);
    let block = dk * dv;
    let scale = inputs.scale;

    let tok_of = |t: usize| (bi * t_len + t) * h + hi;
    let gate = |t: usize| {
        let tok = tok_of(t);
        (
            inputs.gates.log_alpha.data()[tok].exp(),
            inputs.gates.beta.data()[tok],
            inputs.gates.log_mu.data()[tok].exp(),
            inputs.gates.eta.data()[tok],
        )
    };

    let init_state = init
        .map(|s| s[lane].clone())
        .unwrap_or_else(|| DualState::zeros(dk, dv));

    // Forward prepass: checkpoint (S, M) every CHECKPOINT_STEPS.
    let span = CHECKPOINT_STEPS;
    let n_ckpt = t_len / span + 1;
    let mut ckpts: Vec<DualState<T>> = Vec::with_capacity(n_ckpt);
    ckpts.push(init_state.clone());
    {
        let mut state = init_state.clone();
        let mut vtilde = vec![T::ZERO; dv];
        for t in 0..t_len {
            forward_step_inline(inputs, &mut state, &mut vtilde, tok_of(t), gate(t));
            if (t + 1) % span == 0 && t + 1 < t_len {
                ckpts.push(state.clone());
            }
        }
    }

    let mut lg = LaneGrads {
        d_q: vec![T::ZERO; t_len * dk],
        d_k: vec![T::ZERO; t_len * dk],
        d_v: vec![T::ZERO; t_len * dv],
        d_log_alpha: vec![T::ZERO; t_len],
        d_log_mu: vec![T::ZERO; t_len],
        d_beta: vec![T::ZERO; t_len],
        d_eta: vec![T::ZERO; t_len],
        d_init: DualState::zeros(dk, dv),
    };

    let mut lam_s = vec![T::ZERO; block];
    let mut lam_m = vec![T::ZERO; block];
    let mut d_vtilde = vec![T::ZERO; dv];
    let mut d_p = vec![T::ZERO; dk];

    // Recomputation buffers for one span: states s_0..s_span and the
    // per-step correction values.
    let mut s_states = vec![T::ZERO; (span + 1) * block];
    let mut m_states = vec![T::ZERO; (span + 1) * block];
    let mut vtildes = vec![T::ZERO; span * dv];

    let n_spans = t_len.div_ceil(span);
    for sp in (0..n_spans).rev() {
        let start = sp * span;
        let len = (t_len - start).min(span);

        // Recompute the span from its checkpoint.
        let mut state = ckpts[sp].clone();
        s_states[..block].copy_from_slice(&state.s);
        m_states[..block].copy_from_slice(&state.m);
        let mut vt = vec![T::ZERO; dv];
        for r in 0..len {
            forward_step_inline(inputs, &mut state, &mut vt, tok_of(start + r), gate(start + r));
            s_states[(r + 1) * block..(r + 2) * block].copy_from_slice(&state.s);
            m_states[(r + 1) * block..(r + 2) * block].copy_from_slice(&state.m);
            vtildes[r * dv..(r + 1) * dv].copy_from_slice(&vt);
        }

        for r in (0..len).rev() {
            let t = start + r;
            let tok = tok_of(t);
            let (alpha, beta, mu, eta) = gate(t);
            let q = &inputs.q.data()[tok * dk..(tok + 1) * dk];
            let k = &inputs.k.data()[tok * dk..(tok + 1) * dk];
            let g = &grad_o.data()[tok * dv..(tok + 1) * dv];
            let s_prev = &s_states[r * block..(r + 1) * block];
            let m_prev = &m_states[r * block..(r + 1) * block];
            let s_cur = &s_states[(r + 1) * block..(r + 2) * block];
            let m_cur = &m_states[(r + 1) * block..(r + 2) * block];
            let vtl = &vtildes[r * dv..(r + 1) * dv];

            // o_t = S_t^T (scale q): lambda_S += scale q g^T, d_q = scale S_t g.
            for i in 0..dk {
                let qi = scale * q[i];
                let mut dq = T::ZERO;
                let srow = &s_cur[i * dv..(i + 1) * dv];
                let lrow = &mut lam_s[i * dv..(i + 1) * dv];
                for j in 0..dv {
                    lrow[j] += qi * g[j];
                    dq += srow[j] * g[j];
                }
                lg.d_q[t * dk + i] = scale * dq;
            }

            // S_t = alpha S_{t-1} - beta M_t.
            let mut d_alpha = T::ZERO;
            let mut d_beta_acc = T::ZERO;
            for i in 0..block {
                d_alpha += lam_s[i] * s_prev[i];
                d_beta_acc -= lam_s[i] * m_cur[i];
                lam_m[i] -= beta * lam_s[i];
                // lambda w.r.t. S_{t-1} through the decay; the correction
                // channel adds to it below.
                lam_s[i] *= alpha;
            }
            lg.d_beta[t] = d_beta_acc;

            // M_t = mu M_{t-1} - eta k vtilde^T.
            let mut d_mu = T::ZERO;
            let mut d_eta_acc = T::ZERO;
            d_vtilde.fill(T::ZERO);
            for i in 0..dk {
                let lrow = &lam_m[i * dv..(i + 1) * dv];
                let mrow = &m_prev[i * dv..(i + 1) * dv];
                let ki = k[i];
                let mut lam_vt = T::ZERO;
                for j in 0..dv {
                    d_mu += lrow[j] * mrow[j];
                    lam_vt += lrow[j] * vtl[j];
                    d_vtilde[j] -= eta * ki * lrow[j];
                }
                d_eta_acc -= ki * lam_vt;
                lg.d_k[t * dk + i] -= eta * lam_vt;
            }
            lg.d_eta[t] = d_eta_acc;
            for x in lam_m.iter_mut() {
                *x *= mu;
            }

            // vtilde = v - S_{t-1}^T p with p = alpha k.
            for j in 0..dv {
                lg.d_v[t * dv + j] = d_vtilde[j];
            }
            for i in 0..dk {
                let srow = &s_prev[i * dv..(i + 1) * dv];
                let mut dpi = T::ZERO;
                for j in 0..dv {
                    dpi -= srow[j] * d_vtilde[j];
                }
                d_p[i] = dpi;
                let pi = alpha * k[i];
                let lrow = &mut lam_s[i * dv..(i + 1) * dv];
                for j in 0..dv {
                    lrow[j] -= pi * d_vtilde[j];
                }
            }
            for i in 0..dk {
                d_alpha += k[i] * d_p[i];
                lg.d_k[t * dk + i] += alpha * d_p[i];
            }

            // Chain to the log-domain gate coordinates.
            lg.d_log_alpha[t] = alpha * d_alpha;
            lg.d_log_mu[t] = mu * d_mu;
        }
    }

    lg.d_init.s.copy_from_slice(&lam_s);
    lg.d_init.m.copy_from_slice(&lam_m);
    lg
}

#[inline]
fn forward_step_inline<T: Scalar>(
    inputs: &AttnInputs<T>,
    state: &mut DualState<T>,
    vtilde: &mut [T],
    tok: usize,
    gates: (T, T, T, T),
) {
    let (alpha, beta, mu, eta) = gates;
    let (dk, dv) = (state.dk, state.dv);
    let k = &inputs.k.data()[tok * dk..(tok + 1) * dk];
    let v = &inputs.v.data()[tok * dv..(tok + 1) * dv];
    vtilde.copy_from_slice(v);
    for i in 0..dk {
        let pi = alpha * k[i];
        if pi == T::ZERO {
            continue;
        }
        let srow = &state.s[i * dv..(i + 1) * dv];
        for j in 0..dv {
            vtilde[j] -= pi * srow[j];
        }
    }
    for i in 0..dk {
        let ke = eta * k[i];
        let mrow = &mut state.m[i * dv..(i + 1) * dv];
        let srow = &mut state.s[i * dv..(i + 1) * dv];
        for j in 0..dv {
            let m_new = mu * mrow[j] - ke * vtilde[j];
            mrow[j] = m_new;
            srow[j] = alpha * srow[j] - beta * m_new;
        }
    }
}

/// Central finite differences of a scalar function: (f(x + h e_i) -
/// f(x - h e_i)) / 2h per coordinate. The oracle for the adjoint.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference probe at coordinate {i}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}
