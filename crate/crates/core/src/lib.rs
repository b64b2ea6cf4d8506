//! Momentum delta rule for linear attention.
//!
//! The fast weight S is trained online by a momentum step on the delta
//! objective; the momentum matrix M carries decayed gradients. This crate
//! provides the stepwise recurrence, the exact chunkwise-parallel kernel
//! built on log-domain coefficients and the UT transform, the closed-form
//! spectrum of the joint transition matrix with the gating constraints
//! that keep it in the right half-plane, a hand-derived adjoint, and a toy
//! associative-recall trainer that ties it all together at desk scale.

pub mod adjoint;
pub mod bench;
pub mod chunkwise;
pub mod coeffs;
pub mod error;
pub mod gating;
pub mod mqar;
pub mod recurrent;
pub mod spectral;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use gating::{compute_gates, GateConfig, GateSeq};
pub use recurrent::{
    mdn_recurrent_forward, mdn_step, state_change_norm, AttnInputs, DualState,
};
pub use chunkwise::{mdn_chunkwise_forward, ChunkwiseConfig};
pub use spectral::{closed_form_spectrum, stability_condition, transition_matrix};
pub use tensor::{DType, Scalar, Tensor};
