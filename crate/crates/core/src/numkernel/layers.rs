//! Layers with explicit forward and backward passes.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::ParamSet;
use crate::error::{Result, TfecError};

/// 1-D convolution over time with "same" zero padding and odd kernel width.
///
/// Weights are stored im2col-style as `(kernel * in_ch, out_ch)`, where row
/// `k * in_ch + c` holds tap `k` of input channel `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub kernel: usize,
}

/// Intermediate values a [`Conv1d`] needs for its backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub columns: Array2<f64>,
}

impl Conv1d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel width must be odd");
        Self {
            weight: Array2::zeros((kernel * in_ch, out_ch)),
            bias: Array1::zeros(out_ch),
            kernel,
        }
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_ch, out_ch, kernel);
        let std = (2.0 / (kernel * in_ch) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        layer.weight.mapv_inplace(|_| normal.sample(rng));
        layer
    }

    pub fn in_channels(&self) -> usize {
        self.weight.nrows() / self.kernel
    }

    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    fn im2col(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let (len, in_ch) = x.dim();
        let pad = self.kernel / 2;
        let mut col = Array2::zeros((len, self.kernel * in_ch));
        for t in 0..len {
            for k in 0..self.kernel {
                let src = t + k;
                if src < pad || src - pad >= len {
                    continue;
                }
                col.slice_mut(s![t, k * in_ch..(k + 1) * in_ch])
                    .assign(&x.row(src - pad));
            }
        }
        col
    }

    /// `x` is `(len, in_ch)`; returns `(len, out_ch)` pre-activations.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ConvCache)> {
        if x.ncols() != self.in_channels() {
            return Err(TfecError::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                x.ncols()
            )));
        }
        let columns = self.im2col(x);
        let mut y = columns.dot(&self.weight);
        y += &self.bias;
        Ok((y, ConvCache { columns }))
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `want_input_grad` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: ArrayView2<'_, f64>,
        grad: &mut Conv1d,
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        grad.weight += &cache.columns.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        if !want_input_grad {
            return None;
        }
        let in_ch = self.in_channels();
        let len = dy.nrows();
        let pad = self.kernel / 2;
        let dcol = dy.dot(&self.weight.t());
        let mut dx = Array2::zeros((len, in_ch));
        for t in 0..len {
            for k in 0..self.kernel {
                let src = t + k;
                if src < pad || src - pad >= len {
                    continue;
                }
                let mut row = dx.row_mut(src - pad);
                row += &dcol.slice(s![t, k * in_ch..(k + 1) * in_ch]);
            }
        }
        Some(dx)
    }
}

impl ParamSet for Conv1d {
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        vec![
            (
                "weight".into(),
                self.weight.shape().to_vec(),
                self.weight.as_slice().expect("standard layout"),
            ),
            (
                "bias".into(),
                self.bias.shape().to_vec(),
                self.bias.as_slice().expect("standard layout"),
            ),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Fully connected layer, `y = x W + b` with `W` shaped `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Glorot-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(input, output);
        let std = (2.0 / (input + output) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        layer.weight.mapv_inplace(|_| normal.sample(rng));
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(TfecError::Shape(format!(
                "dense expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }

    pub fn backward(
        &self,
        x: ArrayView1<'_, f64>,
        dy: ArrayView1<'_, f64>,
        grad: &mut Dense,
    ) -> Array1<f64> {
        let outer = x
            .view()
            .insert_axis(Axis(1))
            .dot(&dy.view().insert_axis(Axis(0)));
        grad.weight += &outer;
        grad.bias += &dy;
        self.weight.dot(&dy)
    }
}

impl ParamSet for Dense {
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        vec![
            (
                "weight".into(),
                self.weight.shape().to_vec(),
                self.weight.as_slice().expect("standard layout"),
            ),
            (
                "bias".into(),
                self.bias.shape().to_vec(),
                self.bias.as_slice().expect("standard layout"),
            ),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

pub fn relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Zeroes upstream gradient where the pre-activation was not positive.
pub fn relu_backward<D: ndarray::Dimension>(
    pre: &ndarray::Array<f64, D>,
    upstream: &mut ndarray::Array<f64, D>,
) {
    ndarray::Zip::from(upstream)
        .and(pre)
        .for_each(|g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution oracle: y[t][o] = b[o] + sum_k sum_c w[k,c,o] x[t+k-pad][c].
    fn direct_conv(layer: &Conv1d, x: &Array2<f64>) -> Array2<f64> {
        let (len, in_ch) = x.dim();
        let pad = layer.kernel as isize / 2;
        let mut y = Array2::zeros((len, layer.out_channels()));
        for t in 0..len {
            for o in 0..layer.out_channels() {
                let mut acc = layer.bias[o];
                for k in 0..layer.kernel {
                    let src = t as isize + k as isize - pad;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    for c in 0..in_ch {
                        acc += layer.weight[[k * in_ch + c, o]] * x[[src as usize, c]];
                    }
                }
                y[[t, o]] = acc;
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = Conv1d::init(3, 4, 5, &mut rng);
        layer.bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((9, 3), |_| rng.random_range(-1.0..1.0));
        let (y, _) = layer.forward(x.view()).unwrap();
        let oracle = direct_conv(&layer, &x);
        for (a, b) in y.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let layer = Conv1d::zeros(2, 3, 3);
        assert!(layer.forward(Array2::zeros((4, 3)).view()).is_err());
    }

    #[test]
    fn conv_relu_stack_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = Conv1d::init(2, 3, 3, &mut rng);
        let x = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let weights = target.clone();
        let loss_and_grad = |flat: &[f64]| {
            let mut l = layer.clone();
            l.load_flat(flat);
            let (y, cache) = l.forward(x.view()).unwrap();
            let loss = (&y * &weights).sum() + (&y * &y).sum() * 0.5;
            let dy = &weights + &y;
            let mut g = Conv1d::zeros(2, 3, 3);
            l.backward(&cache, dy.view(), &mut g, false);
            (loss, g.to_flat())
        };
        let report = grad_check(loss_and_grad, &layer.to_flat(), 1e-6);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = Conv1d::init(2, 3, 5, &mut rng);
        let x = Array2::from_shape_fn((7, 2), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0));
        let f = |flat: &[f64]| {
            let xi = Array2::from_shape_vec((7, 2), flat.to_vec()).unwrap();
            let (y, cache) = layer.forward(xi.view()).unwrap();
            let mut g = Conv1d::zeros(2, 3, 5);
            let dx = layer.backward(&cache, w.view(), &mut g, true).unwrap();
            ((&y * &w).sum(), dx.iter().copied().collect())
        };
        let report = grad_check(f, x.as_slice().unwrap(), 1e-6);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn dense_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = Dense::init(4, 3, &mut rng);
        let x = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let f = |flat: &[f64]| {
            let mut l = layer.clone();
            l.load_flat(flat);
            let y = l.forward(x.view()).unwrap();
            let pre = y.clone();
            let a = relu(&y);
            let loss = a.mapv(|v| v * v).sum();
            let mut dy = a.mapv(|v| 2.0 * v);
            relu_backward(&pre, &mut dy);
            let mut g = Dense::zeros(4, 3);
            l.backward(x.view(), dy.view(), &mut g);
            (loss, g.to_flat())
        };
        let report = grad_check(f, &layer.to_flat(), 1e-6);
        assert!(report.passed, "{report:?}");
    }
}
