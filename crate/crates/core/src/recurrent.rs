//! Stepwise momentum delta recurrence. This is the ground-truth kernel: one
//! token at a time, per (batch, head) lane,
//!
//!   vtilde_t = v_t - S_{t-1}^T p_t              (p_t = alpha_t k_t)
//!   M_t      = mu_t M_{t-1} - eta_t k_t vtilde_t^T
//!   S_t      = alpha_t S_{t-1} - beta_t M_t
//!   o_t      = S_t^T (scale * q_t)
//!
//! The chunkwise kernel must reproduce it exactly; the decoding path and the
//! state-change statistic use it directly.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gating::GateSeq;
use crate::tensor::{frobenius_norm_slice, Scalar, Tensor};

/// Fast weight S and momentum M for one (batch, head) lane, both dk x dv
/// row-major.
#[derive(Debug, Clone)]
pub struct DualState<T: Scalar> {
    pub s: Vec<T>,
    pub m: Vec<T>,
    pub dk: usize,
    pub dv: usize,
}

impl<T: Scalar> DualState<T> {
    pub fn zeros(dk: usize, dv: usize) -> Self {
        DualState {
            s: vec![T::ZERO; dk * dv],
            m: vec![T::ZERO; dk * dv],
            dk,
            dv,
        }
    }

    /// Frobenius norm of the stacked (S, M) pair.
    pub fn joint_norm(&self) -> T {
        let s2 = self.s.iter().fold(T::ZERO, |acc, &x| acc + x * x);
        let m2 = self.m.iter().fold(T::ZERO, |acc, &x| acc + x * x);
        (s2 + m2).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.s.iter().chain(self.m.iter()).all(|x| x.is_finite())
    }
}

/// Scalar gate values for a single step.
#[derive(Debug, Clone, Copy)]
pub struct GateValues<T: Scalar> {
    pub alpha: T,
    pub beta: T,
    pub mu: T,
    pub eta: T,
}

/// Query/key/value streams plus gates for a [B, T, H] grid.
///
/// `p` is the correction stream; `None` derives the delta form p_t =
/// alpha_t k_t, an explicit stream overrides it (zeros give the plain decay
/// rule).
#[derive(Debug, Clone)]
pub struct AttnInputs<T: Scalar> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub p: Option<Tensor<T>>,
    pub gates: GateSeq<T>,
    pub scale: T,
}

impl<T: Scalar> AttnInputs<T> {
    /// Validates shapes and finiteness. `scale` defaults to 1/sqrt(dk).
    pub fn new(
        q: Tensor<T>,
        k: Tensor<T>,
        v: Tensor<T>,
        gates: GateSeq<T>,
        scale: Option<T>,
    ) -> Result<Self> {
        Self::with_correction(q, k, v, None, gates, scale)
    }

    pub fn with_correction(
        q: Tensor<T>,
        k: Tensor<T>,
        v: Tensor<T>,
        p: Option<Tensor<T>>,
        gates: GateSeq<T>,
        scale: Option<T>,
    ) -> Result<Self> {
        let qd = q.dims();
        if qd.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "q must be [B, T, H, dk], got {:?}",
                qd
            )));
        }
        if k.dims() != qd {
            return Err(Error::ShapeMismatch(format!(
                "k dims {:?} do not match q dims {:?}",
                k.dims(),
                qd
            )));
        }
        let vd = v.dims();
        if vd.len() != 4 || vd[..3] != qd[..3] {
            return Err(Error::ShapeMismatch(format!(
                "v must be [B, T, H, dv] matching q on [B, T, H], got {:?} vs {:?}",
                vd, qd
            )));
        }
        if let Some(p) = &p {
            if p.dims() != qd {
                return Err(Error::ShapeMismatch(format!(
                    "p dims {:?} do not match k dims {:?}",
                    p.dims(),
                    qd
                )));
            }
        }
        if gates.dims() != &qd[..3] {
            return Err(Error::ShapeMismatch(format!(
                "gate dims {:?} do not match [B, T, H] = {:?}",
                gates.dims(),
                &qd[..3]
            )));
        }
        for (name, t) in [("q", &q), ("k", &k), ("v", &v)] {
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("{name} stream")));
            }
        }
        if !gates.beta.all_finite() || !gates.eta.all_finite() {
            return Err(Error::NonFinite("beta/eta gates".into()));
        }
        // log alpha / log mu may carry -inf (alpha or mu exactly zero in the
        // reduction cases) but never NaN or +inf.
        for (name, t) in [("log_alpha", &gates.log_alpha), ("log_mu", &gates.log_mu)] {
            if t.data().iter().any(|x| x.is_nan() || (*x > T::ZERO && !x.is_finite())) {
                return Err(Error::NonFinite(format!("{name} gate")));
            }
        }
        let dk = qd[3];
        let scale = scale.unwrap_or_else(|| T::ONE / T::from_f64(dk as f64).sqrt());
        Ok(AttnInputs {
            q,
            k,
            v,
            p,
            gates,
            scale,
        })
    }

    /// (B, T, H, dk, dv)
    pub fn shape(&self) -> (usize, usize, usize, usize, usize) {
        let qd = self.q.dims();
        (qd[0], qd[1], qd[2], qd[3], self.v.dims()[3])
    }

    pub fn lanes(&self) -> usize {
        let (b, _, h, _, _) = self.shape();
        b * h
    }
}

/// One recurrence step with the delta correction p = alpha k.
pub fn mdn_step<T: Scalar>(
    state: &mut DualState<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    g: GateValues<T>,
    scale: T,
    out: &mut [T],
) {
    let dk = state.dk;
    let mut p = vec![T::ZERO; dk];
    for i in 0..dk {
        p[i] = g.alpha * k[i];
    }
    mdn_step_with_p(state, q, k, v, &p, g, scale, out);
}

/// One recurrence step with an explicit correction stream.
#[allow(clippy::too_many_arguments)]
pub fn mdn_step_with_p<T: Scalar>(
    state: &mut DualState<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    p: &[T],
    g: GateValues<T>,
    scale: T,
    out: &mut [T],
) {
    let (dk, dv) = (state.dk, state.dv);
    debug_assert_eq!(q.len(), dk);
    debug_assert_eq!(k.len(), dk);
    debug_assert_eq!(v.len(), dv);
    debug_assert_eq!(p.len(), dk);
    debug_assert_eq!(out.len(), dv);

    // vtilde = v - S^T p
    let mut vtilde = v.to_vec();
    for i in 0..dk {
        let pi = p[i];
        if pi == T::ZERO {
            continue;
        }
        let srow = &state.s[i * dv..(i + 1) * dv];
        for j in 0..dv {
            vtilde[j] -= pi * srow[j];
        }
    }

    // M <- mu M - eta k vtilde^T ; S <- alpha S - beta M
    for i in 0..dk {
        let ki_eta = g.eta * k[i];
        let mrow = &mut state.m[i * dv..(i + 1) * dv];
        let srow = &mut state.s[i * dv..(i + 1) * dv];
        for j in 0..dv {
            let m_new = g.mu * mrow[j] - ki_eta * vtilde[j];
            mrow[j] = m_new;
            srow[j] = g.alpha * srow[j] - g.beta * m_new;
        }
    }

    // o = S^T (scale q)
    out.fill(T::ZERO);
    for i in 0..dk {
        let qi = scale * q[i];
        if qi == T::ZERO {
            continue;
        }
        let srow = &state.s[i * dv..(i + 1) * dv];
        for j in 0..dv {
            out[j] += qi * srow[j];
        }
    }
}

/// All S_t snapshots of a run, per lane, including S_0. Only populated when
/// the caller asks for state recording.
#[derive(Debug, Clone)]
pub struct StateTrace<T: Scalar> {
    pub lanes: usize,
    pub steps: usize,
    pub dk: usize,
    pub dv: usize,
    /// states[lane] has (steps + 1) * dk * dv entries.
    pub states: Vec<Vec<T>>,
}

/// Forward pass result: outputs, final per-lane states, optional trace.
#[derive(Debug, Clone)]
pub struct RecurrentRun<T: Scalar> {
    pub output: Tensor<T>,
    pub finals: Vec<DualState<T>>,
    pub trace: Option<StateTrace<T>>,
}

/// Sequential recurrence over t per (batch, head) lane; lanes run in
/// parallel. `init` supplies per-lane starting states (zeros otherwise).
pub fn mdn_recurrent_forward<T: Scalar>(
    inputs: &AttnInputs<T>,
    init: Option<&[DualState<T>]>,
) -> Result<RecurrentRun<T>> {
    mdn_recurrent_forward_traced(inputs, init, false)
}

pub fn mdn_recurrent_forward_traced<T: Scalar>(
    inputs: &AttnInputs<T>,
    init: Option<&[DualState<T>]>,
    record_states: bool,
) -> Result<RecurrentRun<T>> {
    let (b, t_len, h, dk, dv) = inputs.shape();
    let lanes = b * h;
    if let Some(init) = init {
        if init.len() != lanes {
            return Err(Error::ShapeMismatch(format!(
                "{} initial states for {} lanes",
                init.len(),
                lanes
            )));
        }
        for st in init {
            if st.dk != dk || st.dv != dv {
                return Err(Error::ShapeMismatch(format!(
                    "initial state is {}x{}, inputs need {}x{}",
                    st.dk, st.dv, dk, dv
                )));
            }
        }
    }

    let per_lane: Vec<(Vec<T>, DualState<T>, Option<Vec<T>>)> = (0..lanes)
        .into_par_iter()
        .map(|lane| {
            let (bi, hi) = (lane / h, lane % h);
            let mut state = init
                .map(|s| s[lane].clone())
                .unwrap_or_else(|| DualState::zeros(dk, dv));
            let mut lane_out = vec![T::ZERO; t_len * dv];
            let mut trace = if record_states {
                let mut v = Vec::with_capacity((t_len + 1) * dk * dv);
                v.extend_from_slice(&state.s);
                Some(v)
            } else {
                None
            };
            let mut p_buf = vec![T::ZERO; dk];
            for t in 0..t_len {
                let tok = (bi * t_len + t) * h + hi;
                let q = &inputs.q.data()[tok * dk..(tok + 1) * dk];
                let k = &inputs.k.data()[tok * dk..(tok + 1) * dk];
                let v = &inputs.v.data()[tok * dv..(tok + 1) * dv];
                let g = GateValues {
                    alpha: inputs.gates.log_alpha.data()[tok].exp(),
                    beta: inputs.gates.beta.data()[tok],
                    mu: inputs.gates.log_mu.data()[tok].exp(),
                    eta: inputs.gates.eta.data()[tok],
                };
                match &inputs.p {
                    Some(p) => {
                        p_buf.copy_from_slice(&p.data()[tok * dk..(tok + 1) * dk]);
                    }
                    None => {
                        for i in 0..dk {
                            p_buf[i] = g.alpha * k[i];
                        }
                    }
                }
                mdn_step_with_p(
                    &mut state,
                    q,
                    k,
                    v,
                    &p_buf,
                    g,
                    inputs.scale,
                    &mut lane_out[t * dv..(t + 1) * dv],
                );
                if let Some(trace) = &mut trace {
                    trace.extend_from_slice(&state.s);
                }
            }
            (lane_out, state, trace)
        })
        .collect();

    let mut output = Tensor::zeros(&[b, t_len, h, dv]);
    let out_data = output.data_mut();
    let mut finals = Vec::with_capacity(lanes);
    let mut states = Vec::with_capacity(lanes);
    for (lane, (lane_out, state, trace)) in per_lane.into_iter().enumerate() {
        let (bi, hi) = (lane / h, lane % h);
        for t in 0..t_len {
            let tok = (bi * t_len + t) * h + hi;
            out_data[tok * dv..(tok + 1) * dv].copy_from_slice(&lane_out[t * dv..(t + 1) * dv]);
        }
        finals.push(state);
        if let Some(tr) = trace {
            states.push(tr);
        }
    }

    let trace = if record_states {
        Some(StateTrace {
            lanes,
            steps: t_len,
            dk,
            dv,
            states,
        })
    } else {
        None
    };

    Ok(RecurrentRun {
        output,
        finals,
        trace,
    })
}

/// Mean Frobenius norm of per-step fast-weight changes across lanes:
/// delta[t] = (1/lanes) * sum_lane ||S_t - S_{t-1}||_F, t = 1..steps.
pub fn state_change_norm<T: Scalar>(trace: &StateTrace<T>) -> Vec<T> {
    let block = trace.dk * trace.dv;
    let mut deltas = vec![T::ZERO; trace.steps];
    let inv_lanes = T::ONE / T::from_f64(trace.lanes as f64);
    let mut diff = vec![T::ZERO; block];
    for lane_states in &trace.states {
        for t in 1..=trace.steps {
            let prev = &lane_states[(t - 1) * block..t * block];
            let cur = &lane_states[t * block..(t + 1) * block];
            for i in 0..block {
                diff[i] = cur[i] - prev[i];
            }
            deltas[t - 1] += frobenius_norm_slice(&diff) * inv_lanes;
        }
    }
    deltas
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::GateSeq;
    use crate::tensor::Tensor;

    fn step_gates(alpha: f64, beta: f64, mu: f64, eta: f64) -> GateValues<f64> {
        GateValues {
            alpha,
            beta,
            mu,
            eta,
        }
    }

    #[test]
    fn one_dimensional_step_by_hand() {
        let mut st = DualState::<f64>::zeros(1, 1);
        let mut out = [0.0];
        mdn_step(
            &mut st,
            &[3.0],
            &[1.0],
            &[2.0],
            step_gates(0.9, 0.5, 0.8, 1.0),
            1.0,
            &mut out,
        );
        assert_eq!(st.m[0], -2.0);
        assert_eq!(st.s[0], 1.0);
        assert_eq!(out[0], 3.0);

        // Second step on the carried state.
        mdn_step(
            &mut st,
            &[1.0],
            &[1.0],
            &[0.0],
            step_gates(0.9, 0.5, 0.8, 1.0),
            1.0,
            &mut out,
        );
        assert!((st.m[0] - (-0.7)).abs() < 1e-15);
        assert!((st.s[0] - 1.25).abs() < 1e-15);
        assert!((out[0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn beta_zero_leaves_fast_weight_on_pure_decay() {
        // S' = alpha S regardless of k, v; momentum still accumulates.
        let mut st = DualState::<f64>::zeros(2, 2);
        st.s.copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let mut out = [0.0; 2];
        mdn_step(
            &mut st,
            &[0.3, -0.2],
            &[0.5, 0.1],
            &[1.0, -1.0],
            step_gates(0.7, 0.0, 0.9, 1.3),
            1.0,
            &mut out,
        );
        let expect = [0.7, 1.4, 2.1, 2.8];
        for (got, want) in st.s.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(st.m.iter().any(|&x| x != 0.0));
    }

    fn tiny_inputs(beta: f64) -> AttnInputs<f64> {
        let (b, t, h, d) = (1, 4, 1, 2);
        let q = Tensor::from_fn(&[b, t, h, d], |i| (i as f64 * 0.37).sin());
        let k = Tensor::from_fn(&[b, t, h, d], |i| (i as f64 * 0.51).cos());
        let v = Tensor::from_fn(&[b, t, h, d], |i| (i as f64 * 0.73).sin() * 2.0);
        let gates = GateSeq::constant(&[b, t, h], -0.2, -0.5, beta, 1.1);
        AttnInputs::new(q, k, v, gates, None).unwrap()
    }

    #[test]
    fn all_beta_zero_with_zero_init_gives_zero_output() {
        let inputs = tiny_inputs(0.0);
        let run = mdn_recurrent_forward(&inputs, None).unwrap();
        assert!(run.output.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let inputs = tiny_inputs(0.4);
        let a = mdn_recurrent_forward(&inputs, None).unwrap();
        let b = mdn_recurrent_forward(&inputs, None).unwrap();
        assert_eq!(a.output.data(), b.output.data());
        assert_eq!(a.finals[0].s, b.finals[0].s);
        assert_eq!(a.finals[0].m, b.finals[0].m);
    }

    #[test]
    fn doubling_values_doubles_outputs_exactly() {
        let inputs = tiny_inputs(0.4);
        let mut doubled = inputs.clone();
        for x in doubled.v.data_mut() {
            *x *= 2.0;
        }
        let a = mdn_recurrent_forward(&inputs, None).unwrap();
        let b = mdn_recurrent_forward(&doubled, None).unwrap();
        for (x, y) in a.output.data().iter().zip(b.output.data()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn state_change_norm_zero_when_beta_zero() {
        let inputs = tiny_inputs(0.0);
        let run = mdn_recurrent_forward_traced(&inputs, None, true).unwrap();
        let deltas = state_change_norm(run.trace.as_ref().unwrap());
        assert!(deltas.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn state_change_norm_single_step_example() {
        // d = 1 worked step above: S goes 0 -> 1.0, so delta = 1.0.
        let q = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let v = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let gates = GateSeq::constant(&[1, 1, 1], 0.9f64.ln(), 0.8f64.ln(), 0.5, 1.0);
        let inputs = AttnInputs::new(q, k, v, gates, Some(1.0)).unwrap();
        let run = mdn_recurrent_forward_traced(&inputs, None, true).unwrap();
        let deltas = state_change_norm(run.trace.as_ref().unwrap());
        assert_eq!(deltas, vec![1.0]);
    }

    #[test]
    fn rejects_nan_inputs() {
        let mut inputs = tiny_inputs(0.3);
        inputs.q.data_mut()[0] = f64::NAN;
        let r = AttnInputs::new(
            inputs.q.clone(),
            inputs.k.clone(),
            inputs.v.clone(),
            inputs.gates.clone(),
            None,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let q = Tensor::<f64>::zeros(&[1, 4, 1, 2]);
        let k = Tensor::<f64>::zeros(&[1, 4, 1, 3]);
        let v = Tensor::<f64>::zeros(&[1, 4, 1, 2]);
        let gates = GateSeq::constant(&[1, 4, 1], -0.1, -0.1, 0.5, 1.0);
        assert!(AttnInputs::new(q, k, v, gates, None).is_err());
    }
}
