//! Numerical substrate: real-signal transforms, layers with hand-written
//! backward passes, the Adam optimizer and a finite-difference gradient check.

pub mod adam;
pub mod fft;
pub mod gradcheck;
pub mod layers;
pub mod params;

pub use adam::{adam_step, adam_step_set, AdamConfig, AdamState};
pub use fft::{dft_forward, dft_inverse, InverseOutput, RealDft, Spectrum};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{relu, relu_backward, Conv1d, ConvCache, Dense};
pub use params::ParamSet;
