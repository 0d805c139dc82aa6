//! Discrete Fourier transforms of real signals at arbitrary lengths.
//!
//! Lengths are never padded. Non-power-of-two sizes go through the mixed-radix
//! and Bluestein paths chosen by the planner.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, TfecError};

/// Spectrum of one channel: `bins[k] = sum_t x[t] * exp(-2 pi i k t / T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn zeros(len: usize) -> Self {
        Self {
            bins: vec![Complex64::new(0.0, 0.0); len],
        }
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Largest deviation from `bin[k] = conj(bin[(T - k) mod T])`.
    pub fn hermitian_defect(&self) -> f64 {
        let t = self.bins.len();
        (0..t)
            .map(|k| (self.bins[k] - self.bins[(t - k) % t].conj()).norm())
            .fold(0.0, f64::max)
    }

    pub fn energy(&self) -> f64 {
        self.bins.iter().map(|b| b.norm_sqr()).sum()
    }
}

/// Result of an inverse transform: the real part plus the discarded
/// imaginary residue, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct InverseOutput {
    pub signal: Vec<f64>,
    /// Sum of squared imaginary parts of the time-domain result.
    pub imag_energy: f64,
    /// Sum of squared real parts of the time-domain result.
    pub real_energy: f64,
}

impl InverseOutput {
    /// Imaginary residue as a fraction of the total time-domain energy.
    pub fn imag_fraction(&self) -> f64 {
        let total = self.imag_energy + self.real_energy;
        if total == 0.0 {
            0.0
        } else {
            self.imag_energy / total
        }
    }
}

/// Planned forward/inverse transform pair for one length. Cheap to share
/// across threads.
#[derive(Clone)]
pub struct RealDft {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for RealDft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RealDft").field("len", &self.len).finish()
    }
}

impl RealDft {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(TfecError::Shape("transform length must be at least 1".into()));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn forward(&self, signal: &[f64]) -> Result<Spectrum> {
        if signal.len() != self.len {
            return Err(TfecError::Shape(format!(
                "signal length {} for a length-{} transform",
                signal.len(),
                self.len
            )));
        }
        if signal.iter().any(|v| !v.is_finite()) {
            return Err(TfecError::Numeric("non-finite value in transform input".into()));
        }
        let mut buf: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        Ok(Spectrum { bins: buf })
    }

    pub fn inverse(&self, spectrum: &Spectrum) -> Result<InverseOutput> {
        if spectrum.len() != self.len {
            return Err(TfecError::Shape(format!(
                "spectrum length {} for a length-{} transform",
                spectrum.len(),
                self.len
            )));
        }
        if spectrum.bins.iter().any(|b| !b.re.is_finite() || !b.im.is_finite()) {
            return Err(TfecError::Numeric("non-finite bin in inverse transform".into()));
        }
        let mut buf = spectrum.bins.clone();
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.len as f64;
        let mut imag_energy = 0.0;
        let mut real_energy = 0.0;
        let signal = buf
            .iter()
            .map(|c| {
                let re = c.re * scale;
                let im = c.im * scale;
                imag_energy += im * im;
                real_energy += re * re;
                re
            })
            .collect();
        Ok(InverseOutput {
            signal,
            imag_energy,
            real_energy,
        })
    }
}

pub fn dft_forward(signal: &[f64]) -> Result<Spectrum> {
    RealDft::new(signal.len())?.forward(signal)
}

pub fn dft_inverse(spectrum: &Spectrum) -> Result<InverseOutput> {
    RealDft::new(spectrum.len())?.inverse(spectrum)
}
