//! Exact chunkwise-parallel forward kernel.
//!
//! Within a chunk the implicit correction system is made explicit by a
//! unit-lower-triangular inverse (the UT transform), after which outputs
//! split into an inter-chunk readout against the carried (S, M) and an
//! intra-chunk masked attention against the corrected values. Chunks chain
//! through a short state recurrence. The result matches the stepwise
//! recurrence exactly; no approximation is involved.

use rayon::prelude::*;

use crate::coeffs::{chunk_coefficients, ChunkCoeffs};
use crate::error::{Error, Result};
use crate::recurrent::{AttnInputs, DualState};
use crate::tensor::{matmul_into, matmul_tn_accum, unit_lower_tri_inverse, Scalar, Tensor};

pub const SUPPORTED_CHUNK_SIZES: [usize; 4] = [1, 16, 32, 64];

#[derive(Debug, Clone, Copy)]
pub struct ChunkwiseConfig<T: Scalar> {
    pub chunk_size: usize,
    /// Additive guard inside log(beta + guard); see `coeffs`.
    pub beta_log_guard: T,
}

impl<T: Scalar> Default for ChunkwiseConfig<T> {
    fn default() -> Self {
        ChunkwiseConfig {
            chunk_size: 64,
            beta_log_guard: T::from_f64(crate::coeffs::DEFAULT_BETA_LOG_GUARD),
        }
    }
}

impl<T: Scalar> ChunkwiseConfig<T> {
    pub fn with_chunk_size(chunk_size: usize) -> Self {
        ChunkwiseConfig {
            chunk_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_CHUNK_SIZES.contains(&self.chunk_size) {
            return Err(Error::InvalidChunkSize(self.chunk_size));
        }
        Ok(())
    }
}

/// One lane-chunk of scaled streams: Q' = scale * Q, K_eta = eta ⊙ K,
/// P = alpha ⊙ K (raw K), all C x dk rows; V is C x dv.
#[derive(Debug, Clone)]
pub struct ChunkBatch<T: Scalar> {
    pub c: usize,
    pub dk: usize,
    pub dv: usize,
    pub q_scaled: Vec<T>,
    pub k_eta: Vec<T>,
    pub p: Vec<T>,
    pub v: Vec<T>,
    pub coeffs: ChunkCoeffs<T>,
}

impl<T: Scalar> ChunkBatch<T> {
    /// Builds the scaled streams and coefficients for one chunk. `p_rows`
    /// overrides the default correction stream alpha * k when present.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        q_rows: &[T],
        k_rows: &[T],
        v_rows: &[T],
        p_rows: Option<&[T]>,
        log_alpha: &[T],
        log_mu: &[T],
        beta: &[T],
        eta: &[T],
        scale: T,
        chunk_index: usize,
        beta_log_guard: T,
    ) -> Result<Self> {
        let c = log_alpha.len();
        if c == 0 {
            return Err(Error::Precondition("empty chunk".into()));
        }
        if q_rows.len() % c != 0 || v_rows.len() % c != 0 {
            return Err(Error::ShapeMismatch("chunk rows do not divide evenly".into()));
        }
        let dk = q_rows.len() / c;
        let dv = v_rows.len() / c;
        if k_rows.len() != c * dk || eta.len() != c || beta.len() != c || log_mu.len() != c {
            return Err(Error::ShapeMismatch("chunk slice lengths disagree".into()));
        }
        if let Some(p) = p_rows {
            if p.len() != c * dk {
                return Err(Error::ShapeMismatch("p rows length".into()));
            }
        }

        let coeffs = chunk_coefficients(log_alpha, log_mu, beta, chunk_index, beta_log_guard)?;

        let mut q_scaled = vec![T::ZERO; c * dk];
        let mut k_eta = vec![T::ZERO; c * dk];
        let mut p = vec![T::ZERO; c * dk];
        for t in 0..c {
            let alpha_t = log_alpha[t].exp();
            for d in 0..dk {
                let idx = t * dk + d;
                q_scaled[idx] = scale * q_rows[idx];
                k_eta[idx] = eta[t] * k_rows[idx];
                p[idx] = match p_rows {
                    Some(pr) => pr[idx],
                    None => alpha_t * k_rows[idx],
                };
            }
        }

        Ok(ChunkBatch {
            c,
            dk,
            dv,
            q_scaled,
            k_eta,
            p,
            v: v_rows.to_vec(),
            coeffs,
        })
    }
}

/// Explicit factors of the within-chunk correction solve.
#[derive(Debug, Clone)]
pub struct UTFactors<T: Scalar> {
    /// (I + (P K_eta^T) ⊙ Gamma_strict)^{-1}, unit lower triangular, C x C.
    pub t_inv: Vec<T>,
    /// T V, C x dv.
    pub u: Vec<T>,
    /// T Diag(abar_prev) P, C x dk.
    pub y: Vec<T>,
    /// T Diag(b_prev) P, C x dk.
    pub z: Vec<T>,
}

/// UT transform: invert the implicit intra-chunk system.
pub fn ut_transform<T: Scalar>(batch: &ChunkBatch<T>) -> Result<UTFactors<T>> {
    let (c, dk, dv) = (batch.c, batch.dk, batch.dv);
    let coeffs = &batch.coeffs;

    // I + (P K_eta^T) ⊙ Gamma_strict; only the strictly lower entries of the
    // mask are ever nonzero.
    let mut i_plus_a = vec![T::ZERO; c * c];
    for t in 0..c {
        i_plus_a[t * c + t] = T::ONE;
        for i in 0..t {
            let g = coeffs.gamma_strict[t * c + i];
            if g == T::ZERO {
                continue;
            }
            let mut dot = T::ZERO;
            let prow = &batch.p[t * dk..(t + 1) * dk];
            let krow = &batch.k_eta[i * dk..(i + 1) * dk];
            for d in 0..dk {
                dot += prow[d] * krow[d];
            }
            i_plus_a[t * c + i] = dot * g;
        }
    }
    let t_inv = unit_lower_tri_inverse(&Tensor::from_vec(&[c, c], i_plus_a)?)?.into_data();

    let mut u = vec![T::ZERO; c * dv];
    matmul_into(&t_inv, &batch.v, c, c, dv, &mut u);

    let mut scaled_p = vec![T::ZERO; c * dk];
    for t in 0..c {
        let abar_prev = coeffs.log_abar_prev[t].exp();
        for d in 0..dk {
            scaled_p[t * dk + d] = abar_prev * batch.p[t * dk + d];
        }
    }
    let mut y = vec![T::ZERO; c * dk];
    matmul_into(&t_inv, &scaled_p, c, c, dk, &mut y);

    for t in 0..c {
        let bp = coeffs.b_prev[t];
        for d in 0..dk {
            scaled_p[t * dk + d] = bp * batch.p[t * dk + d];
        }
    }
    let mut z = vec![T::ZERO; c * dk];
    matmul_into(&t_inv, &scaled_p, c, c, dk, &mut z);

    Ok(UTFactors { t_inv, u, y, z })
}

/// Correction values for a chunk entered with state (S, M):
/// Vtilde = U - Y S + Z M, C x dv.
pub fn correction_values<T: Scalar>(
    factors: &UTFactors<T>,
    state: &DualState<T>,
    c: usize,
) -> Result<Vec<T>> {
    let (dk, dv) = (state.dk, state.dv);
    if factors.u.len() != c * dv || factors.y.len() != c * dk {
        return Err(Error::ShapeMismatch("UT factors do not match state dims".into()));
    }
    let mut vtilde = factors.u.clone();
    let mut tmp = vec![T::ZERO; c * dv];
    matmul_into(&factors.y, &state.s, c, dk, dv, &mut tmp);
    for (o, t) in vtilde.iter_mut().zip(tmp.iter()) {
        *o -= *t;
    }
    matmul_into(&factors.z, &state.m, c, dk, dv, &mut tmp);
    for (o, t) in vtilde.iter_mut().zip(tmp.iter()) {
        *o += *t;
    }
    Ok(vtilde)
}

/// Result of advancing one chunk.
#[derive(Debug, Clone)]
pub struct ChunkStep<T: Scalar> {
    /// C x dv output rows.
    pub output: Vec<T>,
    pub state: DualState<T>,
    /// The materialized correction values, kept as the recomputation anchor.
    pub vtilde: Vec<T>,
}

/// Advance one chunk: outputs plus the carried-state update.
pub fn chunk_forward<T: Scalar>(batch: &ChunkBatch<T>, state: &DualState<T>) -> Result<ChunkStep<T>> {
    let (c, dk, dv) = (batch.c, batch.dk, batch.dv);
    if state.dk != dk || state.dv != dv {
        return Err(Error::ShapeMismatch(format!(
            "state {}x{} vs chunk {}x{}",
            state.dk, state.dv, dk, dv
        )));
    }
    let coeffs = &batch.coeffs;
    let factors = ut_transform(batch)?;
    let vtilde = correction_values(&factors, state, c)?;

    // Inter-chunk: Diag(abar) Q' S - Diag(b) Q' M.
    let mut qs = vec![T::ZERO; c * dv];
    let mut qm = vec![T::ZERO; c * dv];
    matmul_into(&batch.q_scaled, &state.s, c, dk, dv, &mut qs);
    matmul_into(&batch.q_scaled, &state.m, c, dk, dv, &mut qm);
    let mut output = vec![T::ZERO; c * dv];
    for t in 0..c {
        let abar = coeffs.log_abar[t].exp();
        let bt = coeffs.b[t];
        for j in 0..dv {
            output[t * dv + j] = abar * qs[t * dv + j] - bt * qm[t * dv + j];
        }
    }

    // Intra-chunk: ((Q' K_eta^T) ⊙ Gamma) Vtilde, diagonal-inclusive mask.
    let mut attn = vec![T::ZERO; c * c];
    for t in 0..c {
        for i in 0..=t {
            let g = coeffs.gamma[t * c + i];
            if g == T::ZERO {
                continue;
            }
            let qrow = &batch.q_scaled[t * dk..(t + 1) * dk];
            let krow = &batch.k_eta[i * dk..(i + 1) * dk];
            let mut dot = T::ZERO;
            for d in 0..dk {
                dot += qrow[d] * krow[d];
            }
            attn[t * c + i] = dot * g;
        }
    }
    let mut intra = vec![T::ZERO; c * dv];
    matmul_into(&attn, &vtilde, c, c, dv, &mut intra);
    for (o, x) in output.iter_mut().zip(intra.iter()) {
        *o += *x;
    }

    // State updates. Gamma^C is the last (diagonal-inclusive) row.
    let abar_end = coeffs.log_abar[c - 1].exp();
    let b_end = coeffs.b[c - 1];
    let log_mbar_end = coeffs.log_mbar[c - 1];
    let mubar_end = log_mbar_end.exp();

    let mut next = DualState::zeros(dk, dv);
    for i in 0..dk * dv {
        next.s[i] = abar_end * state.s[i] - b_end * state.m[i];
        next.m[i] = mubar_end * state.m[i];
    }

    let gamma_last = coeffs.gamma_last_row();
    let mut scaled_k = vec![T::ZERO; c * dk];
    for t in 0..c {
        let g = gamma_last[t];
        for d in 0..dk {
            scaled_k[t * dk + d] = g * batch.k_eta[t * dk + d];
        }
    }
    matmul_tn_accum(&scaled_k, &vtilde, c, dk, dv, &mut next.s);

    for t in 0..c {
        // mubar_C / mubar_t, kept in the log domain until the last moment.
        let decay = (log_mbar_end - coeffs.log_mbar[t]).exp();
        for d in 0..dk {
            scaled_k[t * dk + d] = -decay * batch.k_eta[t * dk + d];
        }
    }
    matmul_tn_accum(&scaled_k, &vtilde, c, dk, dv, &mut next.m);

    Ok(ChunkStep {
        output,
        state: next,
        vtilde,
    })
}

/// Chunkwise forward over a [B, T, H] grid: sequential scan over chunks per
/// lane, lanes in parallel. T is padded up to a multiple of the chunk size
/// with inert positions (alpha = mu = 1, beta = 0, eta = 1, zero streams),
/// which leave the carried states untouched; padded outputs are dropped.
pub fn mdn_chunkwise_forward<T: Scalar>(
    inputs: &AttnInputs<T>,
    cfg: &ChunkwiseConfig<T>,
    init: Option<&[DualState<T>]>,
) -> Result<(Tensor<T>, Vec<DualState<T>>)> {
    cfg.validate()?;
    let (b, t_len, h, dk, dv) = inputs.shape();
    let lanes = b * h;
    let c = cfg.chunk_size;

    if inputs.gates.log_mu.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::MomentumVanished);
    }
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

    let num_chunks = t_len.div_ceil(c);
    let padded = num_chunks * c;

    let per_lane: Vec<(Vec<T>, DualState<T>)> = (0..lanes)
        .into_par_iter()
        .map(|lane| -> Result<(Vec<T>, DualState<T>)> {
            let (bi, hi) = (lane / h, lane % h);
            let mut state = init
                .map(|s| s[lane].clone())
                .unwrap_or_else(|| DualState::zeros(dk, dv));
            let mut lane_out = vec![T::ZERO; t_len * dv];

            let mut q_rows = vec![T::ZERO; c * dk];
            let mut k_rows = vec![T::ZERO; c * dk];
            let mut v_rows = vec![T::ZERO; c * dv];
            let mut p_rows = vec![T::ZERO; c * dk];
            let mut log_alpha = vec![T::ZERO; c];
            let mut log_mu = vec![T::ZERO; c];
            let mut beta = vec![T::ZERO; c];
            let mut eta = vec![T::ONE; c];

            for n in 0..num_chunks {
                let start = n * c;
                let real = (t_len - start).min(c);
                // Inert padding: decay products continue unchanged, zero
                // keys/values write nothing.
                q_rows.fill(T::ZERO);
                k_rows.fill(T::ZERO);
                v_rows.fill(T::ZERO);
                p_rows.fill(T::ZERO);
                log_alpha.fill(T::ZERO);
                log_mu.fill(T::ZERO);
                beta.fill(T::ZERO);
                eta.fill(T::ONE);
                for r in 0..real {
                    let t = start + r;
                    let tok = (bi * t_len + t) * h + hi;
                    q_rows[r * dk..(r + 1) * dk]
                        .copy_from_slice(&inputs.q.data()[tok * dk..(tok + 1) * dk]);
                    k_rows[r * dk..(r + 1) * dk]
                        .copy_from_slice(&inputs.k.data()[tok * dk..(tok + 1) * dk]);
                    v_rows[r * dv..(r + 1) * dv]
                        .copy_from_slice(&inputs.v.data()[tok * dv..(tok + 1) * dv]);
                    if let Some(p) = &inputs.p {
                        p_rows[r * dk..(r + 1) * dk]
                            .copy_from_slice(&p.data()[tok * dk..(tok + 1) * dk]);
                    }
                    log_alpha[r] = inputs.gates.log_alpha.data()[tok];
                    log_mu[r] = inputs.gates.log_mu.data()[tok];
                    beta[r] = inputs.gates.beta.data()[tok];
                    eta[r] = inputs.gates.eta.data()[tok];
                }
                let batch = ChunkBatch::new(
                    &q_rows,
                    &k_rows,
                    &v_rows,
                    inputs.p.as_ref().map(|_| p_rows.as_slice()),
                    &log_alpha,
                    &log_mu,
                    &beta,
                    &eta,
                    inputs.scale,
                    n,
                    cfg.beta_log_guard,
                )?;
                let step = chunk_forward(&batch, &state)?;
                state = step.state;
                lane_out[start * dv..(start + real) * dv]
                    .copy_from_slice(&step.output[..real * dv]);
            }
            Ok((lane_out, state))
        })
        .collect::<Result<Vec<_>>>()?;

    debug_assert!(padded >= t_len);

    let mut output = Tensor::zeros(&[b, t_len, h, dv]);
    let out_data = output.data_mut();
    let mut finals = Vec::with_capacity(lanes);
    for (lane, (lane_out, state)) in per_lane.into_iter().enumerate() {
        let (bi, hi) = (lane / h, lane % h);
        for t in 0..t_len {
            let tok = (bi * t_len + t) * h + hi;
            out_data[tok * dv..(tok + 1) * dv].copy_from_slice(&lane_out[t * dv..(t + 1) * dv]);
        }
        finals.push(state);
    }
    Ok((output, finals))
}
