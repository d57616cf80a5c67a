//! Dense f32 tensors with reverse-mode differentiation.
//!
//! Everything the networks and the latent-space ascents need lives here:
//! convolution (zero or toroidal padding), low-band spectral convolution,
//! dense layers, pooling, activations, channel softmax and cross-entropy.

pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod params;
mod real;
pub mod suite;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, GradCheck, Objective};
pub use kernels::{dft2, retained_frequencies, Padding};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, Params};
pub use real::Real;
pub use tape::{spectral_mix_dims, Activation, Gradients, Tape, Var, LEAKY_SLOPE};
pub use tensor::Tensor;
