use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Result, TfecError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new<P: ParamSet + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }

    pub fn for_lengths(config: AdamConfig, lengths: &[usize]) -> Self {
        let zeros: Vec<Vec<f64>> = lengths.iter().map(|&n| vec![0.0; n]).collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update, applied in place.
///
/// Nothing is modified when shapes disagree or a gradient is non-finite.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(TfecError::Shape(format!(
            "{} parameter tensors, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[i].len() {
            return Err(TfecError::Shape(format!(
                "tensor {i}: {} params, {} grads, {} moments",
                p.len(),
                g.len(),
                state.first_moment[i].len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TfecError::Numeric(format!("non-finite gradient in tensor {i}")));
        }
    }

    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step_count += 1;
    let step = state.step_count as i32;
    let bias1 = 1.0 - beta1.powi(step);
    let bias2 = 1.0 - beta2.powi(step);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// [`adam_step`] over two [`ParamSet`]s of the same type.
pub fn adam_step_set<P: ParamSet>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    adam_step(&mut params, &grads, state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(w: &mut [f64], g: f64, state: &mut AdamState) {
        let mut p = [&mut w[..]];
        adam_step(&mut p, &[&[g]], state).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut state = AdamState::for_lengths(AdamConfig::default(), &[2]);
        state.first_moment[0] = vec![0.5, -0.5];
        state.second_moment[0] = vec![0.25, 0.25];
        let mut w = vec![1.0, 2.0];
        let before_m = state.first_moment[0].clone();
        {
            let mut p = [&mut w[..]];
            adam_step(&mut p, &[&[0.0, 0.0]], &mut state).unwrap();
        }
        assert_eq!(state.step_count, 1);
        for j in 0..2 {
            assert!(state.first_moment[0][j].abs() < before_m[j].abs());
            assert!(state.second_moment[0][j] < 0.25);
        }
        // moments are non-zero, so params move; from a zeroed state they do not
        let mut fresh = AdamState::for_lengths(AdamConfig::default(), &[2]);
        let mut w2 = vec![1.0, 2.0];
        {
            let mut p = [&mut w2[..]];
            adam_step(&mut p, &[&[0.0, 0.0]], &mut fresh).unwrap();
        }
        assert_eq!(w2, vec![1.0, 2.0]);
    }

    #[test]
    fn single_step_matches_closed_form() {
        let cfg = AdamConfig::default();
        for g in [0.3, -2.0, 1e-6] {
            let mut state = AdamState::for_lengths(cfg, &[1]);
            let mut w = [0.7];
            scalar_step(&mut w, g, &mut state);
            // m_hat = g and v_hat = g^2 after one step
            let expected = 0.7 - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((w[0] - expected).abs() < 1e-15, "g={g}");
        }
    }

    #[test]
    fn quadratic_descent_matches_scalar_simulation() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut state = AdamState::for_lengths(cfg, &[1]);
        let mut w = [1.0];
        let (mut m, mut v, mut sim) = (0.0f64, 0.0f64, 1.0f64);
        let mut trajectory = vec![1.0];
        for t in 1..=1000 {
            let g = w[0];
            scalar_step(&mut w, g, &mut state);
            let gs = sim;
            m = 0.9 * m + 0.1 * gs;
            v = 0.999 * v + 0.001 * gs * gs;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            sim -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((w[0] - sim).abs() < 1e-12);
            trajectory.push(w[0]);
        }
        let first_small = trajectory.iter().position(|w| w.abs() < 0.1).unwrap();
        for pair in trajectory[..=first_small].windows(2) {
            assert!(pair[1].abs() < pair[0].abs());
        }
        assert!(w[0].abs() < 0.1);
    }

    #[test]
    fn rejects_shape_mismatch_and_non_finite() {
        let mut state = AdamState::for_lengths(AdamConfig::default(), &[2]);
        let mut w = vec![1.0, 2.0];
        let mut p = [&mut w[..]];
        assert!(matches!(
            adam_step(&mut p, &[&[1.0]], &mut state),
            Err(TfecError::Shape(_))
        ));
        assert!(matches!(
            adam_step(&mut p, &[&[1.0, f64::NAN]], &mut state),
            Err(TfecError::Numeric(_))
        ));
        assert_eq!(state.step_count, 0);
    }
}
