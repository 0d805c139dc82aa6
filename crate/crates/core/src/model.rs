//! Encoder, decoder and masking for the two learning paths.
//!
//! Encoder: conv(k=7) -> ReLU -> conv(k=5) -> ReLU -> mean over time ->
//! dense -> L2 normalization. Decoder: dense -> ReLU -> dense, reshaped to
//! `L x F`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TfecError};
use crate::numkernel::params::prefixed;
use crate::numkernel::{relu, relu_backward, Conv1d, ConvCache, Dense, ParamSet};

/// Norms below this are clamped before normalizing an encoding.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub embed_dim: usize,
    pub kernel1: usize,
    pub kernel2: usize,
    /// Give the reconstruction path its own encoder instead of sharing one.
    pub separate_autoencoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden1: 64,
            hidden2: 128,
            embed_dim: 64,
            kernel1: 7,
            kernel2: 5,
            separate_autoencoder: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        for (name, v) in [
            ("hidden1", self.hidden1),
            ("hidden2", self.hidden2),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                errors.push(format!("{name} must be positive"));
            }
        }
        for (name, k) in [("kernel1", self.kernel1), ("kernel2", self.kernel2)] {
            if k % 2 == 0 {
                errors.push(format!("{name} must be odd, got {k}"));
            }
        }
        errors
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub proj: Dense,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    conv1: ConvCache,
    pre1: Array2<f64>,
    conv2: ConvCache,
    pre2: Array2<f64>,
    pooled: Array1<f64>,
    norm: f64,
    pub r: Array1<f64>,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, in_ch: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv1d::init(in_ch, cfg.hidden1, cfg.kernel1, rng),
            conv2: Conv1d::init(cfg.hidden1, cfg.hidden2, cfg.kernel2, rng),
            proj: Dense::init(cfg.hidden2, cfg.embed_dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.output_dim()
    }

    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.forward(x)?.r)
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<EncoderCache> {
        if x.nrows() == 0 {
            return Err(TfecError::Shape("cannot encode an empty segment".into()));
        }
        let (pre1, conv1) = self.conv1.forward(x)?;
        let act1 = relu(&pre1);
        let (pre2, conv2) = self.conv2.forward(act1.view())?;
        let pooled = relu(&pre2)
            .mean_axis(Axis(0))
            .expect("non-empty time axis");
        let z = self.proj.forward(pooled.view())?;
        let norm = z.dot(&z).sqrt().max(NORM_FLOOR);
        let r = z / norm;
        Ok(EncoderCache {
            conv1,
            pre1,
            conv2,
            pre2,
            pooled,
            norm,
            r,
        })
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d r`.
    pub fn backward(&self, cache: &EncoderCache, dr: ArrayView1<'_, f64>, grad: &mut Encoder) {
        let r = &cache.r;
        let dz = (&dr - &(r * r.dot(&dr))) / cache.norm;
        let dpooled = self.proj.backward(cache.pooled.view(), dz.view(), &mut grad.proj);
        let len = cache.pre2.nrows();
        let mut da2 = Array2::from_shape_fn(cache.pre2.dim(), |(_, o)| dpooled[o] / len as f64);
        relu_backward(&cache.pre2, &mut da2);
        let mut da1 = self
            .conv2
            .backward(&cache.conv2, da2.view(), &mut grad.conv2, true)
            .expect("input gradient requested");
        relu_backward(&cache.pre1, &mut da1);
        self.conv1
            .backward(&cache.conv1, da1.view(), &mut grad.conv1, false);
    }
}

impl ParamSet for Encoder {
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = prefixed("conv1", self.conv1.named_tensors());
        out.extend(prefixed("conv2", self.conv2.named_tensors()));
        out.extend(prefixed("proj", self.proj.named_tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.conv1.tensors_mut();
        out.extend(self.conv2.tensors_mut());
        out.extend(self.proj.tensors_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub hidden: Dense,
    pub output: Dense,
    pub len: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    input: Array1<f64>,
    pre_hidden: Array1<f64>,
    act_hidden: Array1<f64>,
    pub x_hat: Array2<f64>,
}

impl Decoder {
    pub fn init<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        len: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Dense::init(cfg.embed_dim, cfg.hidden2, rng),
            output: Dense::init(cfg.hidden2, len * channels, rng),
            len,
            channels,
        }
    }

    pub fn decode(&self, r: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(r)?.x_hat)
    }

    pub fn forward(&self, r: ArrayView1<'_, f64>) -> Result<DecoderCache> {
        let pre_hidden = self.hidden.forward(r)?;
        let act_hidden = relu(&pre_hidden);
        let flat = self.output.forward(act_hidden.view())?;
        let x_hat = flat
            .into_shape_with_order((self.len, self.channels))
            .map_err(|e| TfecError::Shape(e.to_string()))?;
        Ok(DecoderCache {
            input: r.to_owned(),
            pre_hidden,
            act_hidden,
            x_hat,
        })
    }

    /// Accumulates parameter gradients and returns `d loss / d r`.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        dx_hat: ArrayView2<'_, f64>,
        grad: &mut Decoder,
    ) -> Array1<f64> {
        let dflat: Array1<f64> = dx_hat.iter().copied().collect();
        let mut dhidden = self
            .output
            .backward(cache.act_hidden.view(), dflat.view(), &mut grad.output);
        relu_backward(&cache.pre_hidden, &mut dhidden);
        self.hidden
            .backward(cache.input.view(), dhidden.view(), &mut grad.hidden)
    }
}

impl ParamSet for Decoder {
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = prefixed("hidden", self.hidden.named_tensors());
        out.extend(prefixed("output", self.output.named_tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.hidden.tensors_mut();
        out.extend(self.output.tensors_mut());
        out
    }
}

/// Hidden positions of one masked segment (`true` = hidden).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub mask: Array2<bool>,
}

impl MaskSpec {
    pub fn hidden_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Hides `round(ratio * L)` timesteps per channel, drawn as contiguous spans
/// of up to `ceil(L / 10)` steps, and zeroes them.
pub fn mask_random<R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    ratio: f64,
    rng: &mut R,
) -> Result<(Array2<f64>, MaskSpec)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(TfecError::config(format!("mask ratio {ratio} must lie in [0, 1)")));
    }
    let (len, channels) = x.dim();
    let mut mask = Array2::from_elem((len, channels), false);
    let target = (ratio * len as f64).round() as usize;
    let max_span = len.div_ceil(10).max(1);
    for c in 0..channels {
        let mut hidden = 0;
        while hidden < target {
            let start = rng.random_range(0..len);
            let span = rng.random_range(1..=max_span);
            for t in start..(start + span).min(len) {
                if hidden == target {
                    break;
                }
                if !mask[[t, c]] {
                    mask[[t, c]] = true;
                    hidden += 1;
                }
            }
        }
    }
    let mut masked = x.to_owned();
    ndarray::Zip::from(&mut masked).and(&mask).for_each(|v, &m| {
        if m {
            *v = 0.0;
        }
    });
    Ok((masked, MaskSpec { ratio, mask }))
}

/// Which positions the reconstruction error averages over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconScope {
    #[default]
    All,
    MaskedOnly,
}

fn scope_weights(mask: &MaskSpec, dim: (usize, usize), scope: ReconScope) -> Result<Array2<f64>> {
    match scope {
        ReconScope::All => Ok(Array2::ones(dim)),
        ReconScope::MaskedOnly => {
            if mask.mask.dim() != dim {
                return Err(TfecError::Shape("mask shape differs from target".into()));
            }
            Ok(mask.mask.mapv(|m| if m { 1.0 } else { 0.0 }))
        }
    }
}

/// Mean squared reconstruction error.
pub fn recon_loss(
    x_hat: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    mask: &MaskSpec,
    scope: ReconScope,
) -> Result<f64> {
    Ok(recon_loss_and_grad(x_hat, x, mask, scope)?.0)
}

/// Reconstruction error and its gradient with respect to `x_hat`.
pub fn recon_loss_and_grad(
    x_hat: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    mask: &MaskSpec,
    scope: ReconScope,
) -> Result<(f64, Array2<f64>)> {
    if x_hat.dim() != x.dim() {
        return Err(TfecError::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            x_hat.dim(),
            x.dim()
        )));
    }
    let weights = scope_weights(mask, x.dim(), scope)?;
    let count = weights.sum();
    if count == 0.0 {
        return Ok((0.0, Array2::zeros(x.dim())));
    }
    let diff = &x_hat - &x;
    let loss = (&diff * &diff * &weights).sum() / count;
    let grad = diff * &weights * (2.0 / count);
    Ok((loss, grad))
}

/// All learnable weights: the shared encoder, the reconstruction decoder and,
/// optionally, a separate reconstruction encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub ae_encoder: Option<Encoder>,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        in_ch: usize,
        crop_len: usize,
        rng: &mut R,
    ) -> Self {
        let encoder = Encoder::init(cfg, in_ch, rng);
        let decoder = Decoder::init(cfg, crop_len, in_ch, rng);
        let ae_encoder = cfg
            .separate_autoencoder
            .then(|| Encoder::init(cfg, in_ch, rng));
        Self {
            encoder,
            decoder,
            ae_encoder,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    /// Encoder used by the reconstruction path.
    pub fn recon_encoder(&self) -> &Encoder {
        self.ae_encoder.as_ref().unwrap_or(&self.encoder)
    }

    pub fn recon_encoder_mut(&mut self) -> &mut Encoder {
        match self.ae_encoder.as_mut() {
            Some(e) => e,
            None => &mut self.encoder,
        }
    }
}

impl ParamSet for Model {
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = prefixed("encoder", self.encoder.named_tensors());
        out.extend(prefixed("decoder", self.decoder.named_tensors()));
        if let Some(ae) = &self.ae_encoder {
            out.extend(prefixed("ae_encoder", ae.named_tensors()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.decoder.tensors_mut());
        if let Some(ae) = &mut self.ae_encoder {
            out.extend(ae.tensors_mut());
        }
        out
    }
}

pub const CHECKPOINT_FORMAT: &str = "tfec-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned JSON checkpoint: architecture plus named, shaped tensors in
/// row-major order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub in_channels: usize,
    pub crop_len: usize,
    pub tensors: Vec<CheckpointTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, cfg: &ModelConfig) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: *cfg,
            in_channels: model.encoder.conv1.in_channels(),
            crop_len: model.decoder.len,
            tensors: model
                .named_tensors()
                .into_iter()
                .map(|(name, shape, data)| CheckpointTensor {
                    name,
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(TfecError::config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Model::init(&self.model, self.in_channels, self.crop_len, &mut rng);
        let expected: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != self.tensors.len() {
            return Err(TfecError::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(TfecError::Shape(format!(
                    "checkpoint tensor {} {:?} does not match {} {:?}",
                    t.name, t.shape, name, shape
                )));
            }
        }
        for (dst, t) in model.tensors_mut().into_iter().zip(&self.tensors) {
            dst.copy_from_slice(&t.data);
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TfecError::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
