//! Training loop: co-enhanced views, the contrastive and reconstruction
//! paths, the weighted joint objective and Adam updates, plus ablation and
//! augmentation-comparison drivers.
//!
//! Per-sample randomness comes from a ChaCha stream keyed by
//! `(seed, epoch, sample)`, and gradients are summed in fixed-size chunks
//! reduced in index order, so a seeded run gives the same bits on any number
//! of threads.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeh::{aligned_crop, baseline_augment, AugmentKind, CoEnhancer, CoehConfig, NeighborIndex};
use crate::dataset::{znormalize, MtsDataset};
use crate::error::{Result, TfecError};
use crate::metrics::{evaluate, ClusterMetrics};
use crate::model::{mask_random, recon_loss_and_grad, EncoderCache, MaskSpec, Model, ModelConfig, ReconScope};
use crate::numkernel::{adam_step_set, AdamConfig, AdamState, ParamSet};
use crate::pgcl::{
    build_pairs, contrastive_loss, fuse_views, kmeans, kmeans_warm, select_high_confidence,
    ClusterState, KMeansConfig,
};

/// Samples per gradient chunk; chunk sums are added in index order.
const GRAD_CHUNK: usize = 8;
/// Above this corpus size the default switches from full batch to 32.
const FULL_BATCH_LIMIT: usize = 256;
const DEFAULT_MINIBATCH: usize = 32;
/// Epoch index used for the random streams of the final evaluation pass.
const EVAL_EPOCH: u64 = 0xFFFF_FFFF;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborSpace {
    /// Distances between z-normalized input series.
    #[default]
    Input,
    /// Distances between current encoder outputs, rebuilt every epoch.
    Encoder,
}

/// Flat run configuration. Every key can be overridden with `key=value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub seed: u64,
    pub epochs: usize,
    /// `None`: full batch up to 256 series, 32 above.
    pub batch_size: Option<usize>,
    /// Crop length `L`; `None` means `ceil(0.9 * T)`.
    pub crop_len: Option<usize>,
    pub neighbors: usize,
    pub gamma: f64,
    pub neighbor_space: NeighborSpace,
    pub mask_ratio: f64,
    pub recon_scope: ReconScope,
    /// Fraction of each cluster kept as high-confidence members.
    pub q: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Cluster count; `None` uses the corpus class count.
    pub k: Option<usize>,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    pub use_coeh: bool,
    pub use_pgcl: bool,
    pub use_read: bool,
    /// Replaces co-enhancement with a classical augmentation for the second view.
    pub augmentation: Option<AugmentKind>,
    pub augment_strength: Option<f64>,
    pub hidden1: usize,
    pub hidden2: usize,
    pub embed_dim: usize,
    pub kernel1: usize,
    pub kernel2: usize,
    pub separate_autoencoder: bool,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Merge a `_TRAIN`/`_TEST` file with its sibling split when loading.
    pub merge_splits: bool,
    pub znormalize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let coeh = CoehConfig::default();
        let model = ModelConfig::default();
        let adam = AdamConfig::default();
        Self {
            dataset: None,
            seed: 0,
            epochs: 100,
            batch_size: None,
            crop_len: coeh.crop_len,
            neighbors: coeh.neighbors,
            gamma: coeh.gamma,
            neighbor_space: NeighborSpace::Input,
            mask_ratio: 0.15,
            recon_scope: ReconScope::All,
            q: 0.5,
            alpha: 1.0,
            beta: 0.5,
            k: None,
            kmeans_restarts: 10,
            kmeans_max_iter: 100,
            use_coeh: true,
            use_pgcl: true,
            use_read: true,
            augmentation: None,
            augment_strength: None,
            hidden1: model.hidden1,
            hidden2: model.hidden2,
            embed_dim: model.embed_dim,
            kernel1: model.kernel1,
            kernel2: model.kernel2,
            separate_autoencoder: model.separate_autoencoder,
            lr: adam.lr,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            merge_splits: false,
            znormalize: true,
        }
    }
}

impl RunConfig {
    pub fn coeh_config(&self) -> CoehConfig {
        CoehConfig {
            crop_len: self.crop_len,
            neighbors: self.neighbors,
            gamma: self.gamma,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden1: self.hidden1,
            hidden2: self.hidden2,
            embed_dim: self.embed_dim,
            kernel1: self.kernel1,
            kernel2: self.kernel2,
            separate_autoencoder: self.separate_autoencoder,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// β after the ablation switches: 1 without reconstruction, 0 without
    /// the contrastive path.
    pub fn effective_beta(&self) -> f64 {
        match (self.use_pgcl, self.use_read) {
            (true, false) => 1.0,
            (false, true) => 0.0,
            _ => self.beta,
        }
    }

    /// Copy with `k`, `batch_size` and `crop_len` filled in for `ds`.
    pub fn resolved(&self, ds: &MtsDataset) -> RunConfig {
        let mut out = self.clone();
        out.k = self.k.or_else(|| ds.class_count());
        out.batch_size = Some(match self.batch_size {
            Some(b) => b.min(ds.n()),
            None if ds.n() <= FULL_BATCH_LIMIT => ds.n(),
            None => DEFAULT_MINIBATCH,
        });
        out.crop_len = Some(self.coeh_config().resolved_crop_len(ds.t()));
        out
    }

    /// Every problem with this configuration for `ds`, not just the first.
    pub fn validate(&self, ds: &MtsDataset) -> Vec<String> {
        let mut errors = Vec::new();
        if !(0.0..=1.0).contains(&self.beta) {
            errors.push(format!("beta {} must lie in [0, 1]", self.beta));
        }
        if !self.use_pgcl && !self.use_read {
            errors.push("at least one of use_pgcl and use_read must be true".into());
        }
        errors.extend(self.validate_common(ds));
        errors
    }

    fn validate_common(&self, ds: &MtsDataset) -> Vec<String> {
        let mut errors = Vec::new();
        if !(self.q > 0.0 && self.q <= 1.0) {
            errors.push(format!("q {} must lie in (0, 1]", self.q));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            errors.push(format!("alpha {} must be finite and non-negative", self.alpha));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            errors.push(format!("mask_ratio {} must lie in [0, 1)", self.mask_ratio));
        }
        if self.batch_size == Some(0) {
            errors.push("batch_size must be positive".into());
        }
        match self.k.or_else(|| ds.class_count()) {
            None => errors.push("k must be set for an unlabelled corpus".into()),
            Some(k) if k == 0 || k > ds.n() => {
                errors.push(format!("k {k} must lie in 1..={}", ds.n()))
            }
            Some(_) => {}
        }
        if self.kmeans_restarts == 0 {
            errors.push("kmeans_restarts must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errors.push(format!("lr {} must be positive", self.lr));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                errors.push(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            errors.push(format!("adam_eps {} must be positive", self.adam_eps));
        }
        if let Some(s) = self.augment_strength {
            if !(s > 0.0 && s.is_finite()) {
                errors.push(format!("augment_strength {s} must be positive"));
            }
        }
        errors.extend(self.coeh_config().validate(ds.n(), ds.t()));
        errors.extend(self.model_config().validate());
        errors
    }

    /// Applies `key=value` overrides. Values are read as JSON, falling back to
    /// a plain string. All bad overrides are reported together.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut value = serde_json::to_value(&*self)?;
        let map = value.as_object_mut().expect("config serializes to an object");
        let mut errors = Vec::new();
        for raw in overrides {
            let raw = raw.as_ref();
            let Some((key, text)) = raw.split_once('=') else {
                errors.push(format!("override {raw:?} is not key=value"));
                continue;
            };
            let key = key.trim();
            if !map.contains_key(key) {
                errors.push(format!("unknown config key {key:?}"));
                continue;
            }
            let parsed = serde_json::from_str(text.trim())
                .unwrap_or_else(|_| serde_json::Value::String(text.trim().to_string()));
            map.insert(key.to_string(), parsed);
        }
        if !errors.is_empty() {
            return Err(TfecError::Config(errors));
        }
        *self = serde_json::from_value(value)
            .map_err(|e| TfecError::Config(vec![format!("invalid override: {e}")]))?;
        Ok(())
    }
}

/// `beta * l_con + (1 - beta) * l_recon`.
pub fn total_loss(l_con: f64, l_recon: f64, beta: f64) -> f64 {
    beta * l_con + (1.0 - beta) * l_recon
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_con: f64,
    pub l_recon: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    /// Effective configuration with every default resolved.
    pub config: RunConfig,
    pub effective_beta: f64,
    pub losses: Vec<EpochLoss>,
    /// Final fused encodings, one row per series.
    pub embeddings: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub metrics: Option<ClusterMetrics>,
    pub final_wcss: f64,
    /// Number of spectral mixing calls made during the run.
    pub mix_calls: u64,
    pub wall_clock_seconds: f64,
}

fn sample_rng(seed: u64, epoch: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) | (i & 0xFFFF_FFFF));
    rng
}

enum ViewSource {
    Coeh(CoEnhancer),
    Baseline(AugmentKind, f64),
    /// Two independent crops, no mixing.
    Crops,
}

struct Views {
    a: Vec<Array2<f64>>,
    b: Vec<Array2<f64>>,
    masked: Vec<Option<(Array2<f64>, MaskSpec)>>,
}

struct Trainer<'a> {
    cfg: RunConfig,
    ds: &'a MtsDataset,
    crop_len: usize,
    source: ViewSource,
    mix_calls_retired: u64,
    beta: f64,
    k: usize,
}

impl<'a> Trainer<'a> {
    fn new(cfg: RunConfig, ds: &'a MtsDataset) -> Result<Self> {
        let crop_len = cfg.coeh_config().resolved_crop_len(ds.t());
        let source = match cfg.augmentation {
            Some(kind) => ViewSource::Baseline(kind, cfg.augment_strength.unwrap_or(kind.default_strength())),
            None if cfg.use_coeh => ViewSource::Coeh(CoEnhancer::new(ds, cfg.coeh_config())?),
            None => ViewSource::Crops,
        };
        let k = cfg.k.or_else(|| ds.class_count()).expect("validated");
        Ok(Self {
            beta: cfg.effective_beta(),
            cfg,
            ds,
            crop_len,
            source,
            mix_calls_retired: 0,
            k,
        })
    }

    fn mix_calls(&self) -> u64 {
        let live = match &self.source {
            ViewSource::Coeh(e) => e.mix_calls(),
            _ => 0,
        };
        self.mix_calls_retired + live
    }

    fn refresh_neighbors(&mut self, model: &Model) -> Result<()> {
        if self.cfg.neighbor_space != NeighborSpace::Encoder {
            return Ok(());
        }
        let ViewSource::Coeh(old) = &self.source else {
            return Ok(());
        };
        let rows = self.encode_all(model, |i| self.ds.series(i).to_owned())?;
        let index = NeighborIndex::from_points(rows.view(), self.cfg.neighbors)?;
        self.mix_calls_retired += old.mix_calls();
        self.source = ViewSource::Coeh(CoEnhancer::with_index(self.ds, self.cfg.coeh_config(), index)?);
        Ok(())
    }

    fn encode_all<F>(&self, model: &Model, view: F) -> Result<Array2<f64>>
    where
        F: Fn(usize) -> Array2<f64> + Sync,
    {
        let rows: Vec<_> = (0..self.ds.n())
            .into_par_iter()
            .map(|i| model.encoder.encode(view(i).view()))
            .collect::<Result<_>>()?;
        stack_rows(&rows)
    }

    fn make_views(&self, epoch: u64, len: usize, with_mask: bool) -> Result<Views> {
        let per_sample: Vec<_> = (0..self.ds.n())
            .into_par_iter()
            .map(|i| {
                let mut rng = sample_rng(self.cfg.seed, epoch, i as u64);
                let x = self.ds.series(i);
                let (a, b) = match &self.source {
                    ViewSource::Coeh(enh) => {
                        let (a, b) = enh.enhance_with_len(self.ds, i, len, &mut rng)?;
                        (a.values, b.values)
                    }
                    ViewSource::Baseline(kind, strength) => {
                        let a = aligned_crop(x, &[], len, &mut rng)?.anchor;
                        let b = baseline_augment(a.view(), *kind, &mut rng, *strength)?;
                        (a, b)
                    }
                    ViewSource::Crops => {
                        let a = aligned_crop(x, &[], len, &mut rng)?.anchor;
                        let b = aligned_crop(x, &[], len, &mut rng)?.anchor;
                        (a, b)
                    }
                };
                let masked = if with_mask {
                    Some(mask_random(b.view(), self.cfg.mask_ratio, &mut rng)?)
                } else {
                    None
                };
                Ok((a, b, masked))
            })
            .collect::<Result<_>>()?;
        let mut views = Views {
            a: Vec::with_capacity(per_sample.len()),
            b: Vec::with_capacity(per_sample.len()),
            masked: Vec::with_capacity(per_sample.len()),
        };
        for (a, b, m) in per_sample {
            views.a.push(a);
            views.b.push(b);
            views.masked.push(m);
        }
        Ok(views)
    }

    fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.k,
            max_iter: self.cfg.kmeans_max_iter,
            restarts: self.cfg.kmeans_restarts,
            seed: self.cfg.seed,
        }
    }

    fn refresh_clusters(&self, fused: ArrayView2<'_, f64>, prev: Option<&ClusterState>) -> Result<ClusterState> {
        let mut state = match prev {
            None => kmeans(fused, &self.kmeans_config())?,
            Some(p) => kmeans_warm(fused, p.centroids.view(), self.cfg.kmeans_max_iter)?,
        };
        select_high_confidence(&mut state, fused, self.cfg.q)?;
        Ok(state)
    }

    /// Loss and gradient of one batch at the current parameters.
    fn batch_step(
        &self,
        model: &Model,
        views: &Views,
        batch: &[usize],
        clusters: Option<&ClusterState>,
        cached: Option<Vec<(EncoderCache, EncoderCache)>>,
    ) -> Result<(f64, f64, Model)> {
        let use_con = self.cfg.use_pgcl && self.beta > 0.0;
        let use_recon = self.cfg.use_read && self.beta < 1.0;
        let mut grad = model.zeros_like();

        let mut l_con = 0.0;
        if use_con {
            let enc = match cached {
                Some(enc) => enc,
                None => forward_pairs(model, views, batch)?,
            };
            let state = clusters.expect("clusters are refreshed when the contrastive path is on");
            let mut local = vec![usize::MAX; self.ds.n()];
            for (pos, &i) in batch.iter().enumerate() {
                local[i] = pos;
            }
            let highconf: Vec<Vec<usize>> = state
                .highconf
                .iter()
                .map(|set| set.iter().map(|&i| local[i]).filter(|&p| p != usize::MAX).collect())
                .collect();
            let (loss, mut g) = contrastive_from_caches(model, &enc, &highconf, self.cfg.alpha)?;
            g.scale(self.beta);
            grad.accumulate(&g);
            l_con = loss;
        }

        let mut l_recon = 0.0;
        if use_recon {
            let items: Vec<ReconItem<'_>> = batch
                .iter()
                .map(|&i| {
                    let (masked, mask) = views.masked[i].as_ref().expect("masks drawn for reconstruction");
                    (masked, mask, &views.b[i])
                })
                .collect();
            let (loss, mut g) = recon_from_items(model, &items, self.cfg.recon_scope)?;
            g.scale(1.0 - self.beta);
            grad.accumulate(&g);
            l_recon = loss;
        }
        Ok((l_con, l_recon, grad))
    }

    fn run(&mut self, model: &mut Model) -> Result<Vec<EpochLoss>> {
        let n = self.ds.n();
        let batch_size = self.cfg.resolved(self.ds).batch_size.expect("resolved");
        let mut adam = AdamState::new(self.cfg.adam_config(), &*model);
        let mut clusters: Option<ClusterState> = None;
        let mut losses = Vec::with_capacity(self.cfg.epochs);
        let need_masks = self.cfg.use_read && self.beta < 1.0;
        let need_clusters = self.cfg.use_pgcl && self.beta > 0.0;

        for epoch in 0..self.cfg.epochs {
            self.refresh_neighbors(model)?;
            let views = self.make_views(epoch as u64, self.crop_len, need_masks)?;
            let full_batch = batch_size >= n;
            let mut cached = None;
            if need_clusters {
                let (r, rp) = if full_batch {
                    let all: Vec<usize> = (0..n).collect();
                    let enc = forward_pairs(model, &views, &all)?;
                    let r = stack_rows(&enc.iter().map(|(a, _)| a.r.clone()).collect::<Vec<_>>())?;
                    let rp = stack_rows(&enc.iter().map(|(_, b)| b.r.clone()).collect::<Vec<_>>())?;
                    cached = Some(enc);
                    (r, rp)
                } else {
                    (
                        self.encode_all(model, |i| views.a[i].clone())?,
                        self.encode_all(model, |i| views.b[i].clone())?,
                    )
                };
                let fused = fuse_views(r.view(), rp.view())?;
                clusters = Some(self.refresh_clusters(fused.view(), clusters.as_ref())?);
            }

            let mut order: Vec<usize> = (0..n).collect();
            if batch_size < n {
                order.shuffle(&mut sample_rng(self.cfg.seed, epoch as u64, 0xFFFF_FFFE));
            }
            let (mut con_sum, mut recon_sum) = (0.0, 0.0);
            for batch in order.chunks(batch_size) {
                let (l_con, l_recon, grad) =
                    self.batch_step(model, &views, batch, clusters.as_ref(), cached.take())?;
                let l_total = total_loss(l_con, l_recon, self.beta);
                if !l_total.is_finite() || !grad.all_finite() {
                    return Err(TfecError::NonFiniteLoss {
                        epoch,
                        detail: format!("l_con {l_con}, l_recon {l_recon}"),
                    });
                }
                adam_step_set(model, &grad, &mut adam)?;
                con_sum += l_con * batch.len() as f64;
                recon_sum += l_recon * batch.len() as f64;
            }
            let l_con = con_sum / n as f64;
            let l_recon = recon_sum / n as f64;
            losses.push(EpochLoss {
                epoch,
                l_con,
                l_recon,
                l_total: total_loss(l_con, l_recon, self.beta),
            });
        }
        Ok(losses)
    }

    /// Full-length views through the encoder, fused, clustered.
    fn final_clustering(&mut self, model: &Model) -> Result<(Array2<f64>, ClusterState)> {
        self.refresh_neighbors(model)?;
        let t = self.ds.t();
        let views = match &self.source {
            ViewSource::Crops => {
                let full: Vec<Array2<f64>> = (0..self.ds.n()).map(|i| self.ds.series(i).to_owned()).collect();
                Views {
                    a: full.clone(),
                    b: full,
                    masked: Vec::new(),
                }
            }
            _ => self.make_views(EVAL_EPOCH, t, false)?,
        };
        let r = self.encode_all(model, |i| views.a[i].clone())?;
        let rp = self.encode_all(model, |i| views.b[i].clone())?;
        let fused = fuse_views(r.view(), rp.view())?;
        let state = kmeans(fused.view(), &self.kmeans_config())?;
        Ok((fused, state))
    }
}

/// Sums per-sample gradient contributions in fixed chunks, reduced in order.
fn chunked_grad<F>(model: &Model, count: usize, f: F) -> Model
where
    F: Fn(usize, &mut Model) + Sync,
{
    let positions: Vec<usize> = (0..count).collect();
    let partials: Vec<Model> = positions
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = model.zeros_like();
            for &pos in chunk {
                f(pos, &mut g);
            }
            g
        })
        .collect();
    let mut total = model.zeros_like();
    for p in &partials {
        total.accumulate(p);
    }
    total
}

fn contrastive_from_caches(
    model: &Model,
    enc: &[(EncoderCache, EncoderCache)],
    highconf: &[Vec<usize>],
    alpha: f64,
) -> Result<(f64, Model)> {
    let r = stack_rows(&enc.iter().map(|(a, _)| a.r.clone()).collect::<Vec<_>>())?;
    let rp = stack_rows(&enc.iter().map(|(_, b)| b.r.clone()).collect::<Vec<_>>())?;
    let pairs = build_pairs(highconf);
    let out = contrastive_loss(&pairs, r.view(), rp.view(), highconf, alpha)?;
    let grad = chunked_grad(model, enc.len(), |pos, g| {
        model.encoder.backward(&enc[pos].0, out.grad_r.row(pos), &mut g.encoder);
        model.encoder.backward(&enc[pos].1, out.grad_r_prime.row(pos), &mut g.encoder);
    });
    Ok((out.loss, grad))
}

/// Contrastive loss of two view batches through the shared encoder, with its
/// gradient with respect to every model parameter. `highconf` indexes rows
/// of the batch.
pub fn contrastive_objective(
    model: &Model,
    views_a: &[Array2<f64>],
    views_b: &[Array2<f64>],
    highconf: &[Vec<usize>],
    alpha: f64,
) -> Result<(f64, Model)> {
    if views_a.len() != views_b.len() {
        return Err(TfecError::Shape(format!("{} vs {} views", views_a.len(), views_b.len())));
    }
    let enc = (0..views_a.len())
        .into_par_iter()
        .map(|i| Ok((model.encoder.forward(views_a[i].view())?, model.encoder.forward(views_b[i].view())?)))
        .collect::<Result<Vec<_>>>()?;
    contrastive_from_caches(model, &enc, highconf, alpha)
}

type ReconItem<'a> = (&'a Array2<f64>, &'a MaskSpec, &'a Array2<f64>);

fn recon_from_items(model: &Model, items: &[ReconItem<'_>], scope: ReconScope) -> Result<(f64, Model)> {
    let b = items.len();
    let passes: Vec<_> = items
        .par_iter()
        .map(|&(masked, mask, target)| {
            let enc = model.recon_encoder().forward(masked.view())?;
            let dec = model.decoder.forward(enc.r.view())?;
            let (loss, grad) = recon_loss_and_grad(dec.x_hat.view(), target.view(), mask, scope)?;
            Ok((enc, dec, loss, grad))
        })
        .collect::<Result<_>>()?;
    let loss = passes.iter().map(|(_, _, l, _)| l).sum::<f64>() / b as f64;
    let grad = chunked_grad(model, b, |pos, g| {
        let (ec, dc, _, dx) = &passes[pos];
        let dx = dx / b as f64;
        let dr = model.decoder.backward(dc, dx.view(), &mut g.decoder);
        model.recon_encoder().backward(ec, dr.view(), g.recon_encoder_mut());
    });
    Ok((loss, grad))
}

/// Mean reconstruction loss of masked inputs against their targets, with its
/// gradient with respect to every model parameter.
pub fn reconstruction_objective(
    model: &Model,
    masked: &[(Array2<f64>, MaskSpec)],
    targets: &[Array2<f64>],
    scope: ReconScope,
) -> Result<(f64, Model)> {
    if masked.len() != targets.len() || masked.is_empty() {
        return Err(TfecError::Shape(format!("{} masked inputs for {} targets", masked.len(), targets.len())));
    }
    let items: Vec<ReconItem<'_>> = masked.iter().zip(targets).map(|((m, s), t)| (m, s, t)).collect();
    recon_from_items(model, &items, scope)
}

fn forward_pairs(model: &Model, views: &Views, batch: &[usize]) -> Result<Vec<(EncoderCache, EncoderCache)>> {
    batch
        .par_iter()
        .map(|&i| {
            Ok((
                model.encoder.forward(views.a[i].view())?,
                model.encoder.forward(views.b[i].view())?,
            ))
        })
        .collect()
}

fn stack_rows(rows: &[ndarray::Array1<f64>]) -> Result<Array2<f64>> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| TfecError::Shape(e.to_string()))
}

/// A trained run: its report and the final parameters.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub model: Model,
}

fn run_inner(cfg: &RunConfig, ds: &MtsDataset, frozen: bool) -> Result<TrainOutcome> {
    let started = Instant::now();
    let errors = if frozen {
        let mut e = cfg.validate_common(ds);
        if !(0.0..=1.0).contains(&cfg.beta) {
            e.push(format!("beta {} must lie in [0, 1]", cfg.beta));
        }
        e
    } else {
        cfg.validate(ds)
    };
    if !errors.is_empty() {
        return Err(TfecError::Config(errors));
    }
    let mut echo = cfg.resolved(ds);
    if frozen {
        echo.epochs = 0;
    }
    let prepared;
    let data = if cfg.znormalize {
        prepared = znormalize(ds);
        &prepared
    } else {
        ds
    };

    let mut trainer = Trainer::new(echo.clone(), data)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(u64::MAX);
    let mut model = Model::init(&echo.model_config(), data.f(), trainer.crop_len, &mut init_rng);
    let losses = trainer.run(&mut model)?;
    let (fused, state) = trainer.final_clustering(&model)?;
    let metrics = match &ds.labels {
        Some(labels) => Some(evaluate(&state.assignments, labels)?),
        None => None,
    };
    let report = RunReport {
        dataset: ds.name.clone(),
        effective_beta: echo.effective_beta(),
        config: echo,
        losses,
        embeddings: fused.outer_iter().map(|r| r.to_vec()).collect(),
        assignments: state.assignments,
        metrics,
        final_wcss: state.wcss,
        mix_calls: trainer.mix_calls(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { report, model })
}

/// Trains on `ds` and clusters the final fused encodings.
pub fn train(cfg: &RunConfig, ds: &MtsDataset) -> Result<RunReport> {
    Ok(run_inner(cfg, ds, false)?.report)
}

/// Like [`train`], also returning the trained parameters.
pub fn train_with_model(cfg: &RunConfig, ds: &MtsDataset) -> Result<TrainOutcome> {
    run_inner(cfg, ds, false)
}

/// Enhanced views through an untrained encoder, then k-means.
pub fn frozen_baseline(cfg: &RunConfig, ds: &MtsDataset) -> Result<RunReport> {
    let mut cfg = cfg.clone();
    cfg.use_pgcl = false;
    cfg.use_read = false;
    Ok(run_inner(&cfg, ds, true)?.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub label: String,
    pub use_coeh: bool,
    pub use_pgcl: bool,
    pub use_read: bool,
    pub report: RunReport,
}

/// Component switches of the five ablation rows, in table order.
pub const ABLATION_ROWS: [(&str, bool, bool, bool); 5] = [
    ("full", true, true, true),
    ("-coeh", false, true, true),
    ("-pgcl", true, false, true),
    ("-read", true, true, false),
    ("-pgcl-read", true, false, false),
];

pub fn ablate(cfg: &RunConfig, ds: &MtsDataset) -> Result<Vec<AblationRow>> {
    ABLATION_ROWS
        .iter()
        .enumerate()
        .map(|(idx, &(label, use_coeh, use_pgcl, use_read))| {
            let mut row_cfg = cfg.clone();
            row_cfg.use_coeh = use_coeh;
            row_cfg.use_pgcl = use_pgcl;
            row_cfg.use_read = use_read;
            row_cfg.augmentation = None;
            let report = if use_pgcl || use_read {
                train(&row_cfg, ds)?
            } else {
                frozen_baseline(&row_cfg, ds)?
            };
            Ok(AblationRow {
                row: idx + 1,
                label: label.to_string(),
                use_coeh,
                use_pgcl,
                use_read,
                report,
            })
        })
        .collect()
}

/// One run with co-enhancement, then one per classical augmentation.
pub fn compare_augmentations(cfg: &RunConfig, ds: &MtsDataset) -> Result<Vec<(String, RunReport)>> {
    let mut rows = Vec::with_capacity(1 + AugmentKind::ALL.len());
    let mut base = cfg.clone();
    base.use_coeh = true;
    base.augmentation = None;
    rows.push(("coeh".to_string(), train(&base, ds)?));
    for kind in AugmentKind::ALL {
        let mut c = base.clone();
        c.augmentation = Some(kind);
        rows.push((kind.name().to_string(), train(&c, ds)?));
    }
    Ok(rows)
}

/// k-means on flattened (optionally z-normalized) raw series.
pub fn raw_kmeans_baseline(cfg: &RunConfig, ds: &MtsDataset) -> Result<(Vec<usize>, Option<ClusterMetrics>)> {
    let k = cfg
        .k
        .or_else(|| ds.class_count())
        .ok_or_else(|| TfecError::config("k must be set for an unlabelled corpus"))?;
    let data = if cfg.znormalize { znormalize(ds) } else { ds.clone() };
    let flat = data
        .samples
        .to_shape((data.n(), data.t() * data.f()))
        .map_err(|e| TfecError::Shape(e.to_string()))?
        .to_owned();
    let state = kmeans(
        flat.view(),
        &KMeansConfig {
            k,
            max_iter: cfg.kmeans_max_iter,
            restarts: cfg.kmeans_restarts,
            seed: cfg.seed,
        },
    )?;
    let metrics = match &ds.labels {
        Some(labels) => Some(evaluate(&state.assignments, labels)?),
        None => None,
    };
    Ok((state.assignments, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{random_walks, two_tone, TwoToneSpec};

    fn small_cfg() -> RunConfig {
        RunConfig {
            epochs: 3,
            hidden1: 8,
            hidden2: 8,
            embed_dim: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(2.0, 4.0, 1.0), 2.0);
        assert_eq!(total_loss(2.0, 4.0, 0.0), 4.0);
        assert_eq!(total_loss(2.0, 4.0, 0.5), 3.0);
    }

    #[test]
    fn both_paths_off_is_config_error() {
        let ds = two_tone(&TwoToneSpec::default(), 0);
        let cfg = RunConfig {
            use_pgcl: false,
            use_read: false,
            ..small_cfg()
        };
        assert!(matches!(train(&cfg, &ds), Err(TfecError::Config(_))));
    }

    #[test]
    fn validation_lists_every_problem() {
        let ds = two_tone(&TwoToneSpec::default(), 0);
        let cfg = RunConfig {
            beta: 2.0,
            q: 0.0,
            k: Some(50),
            ..small_cfg()
        };
        assert_eq!(cfg.validate(&ds).len(), 3);
    }

    #[test]
    fn unlabelled_corpus_needs_k() {
        let ds = random_walks(6, 20, 2, 0);
        assert!(small_cfg().validate(&ds).iter().any(|e| e.contains("k must")));
        let cfg = RunConfig { k: Some(2), ..small_cfg() };
        let report = train(&cfg, &ds).unwrap();
        assert!(report.metrics.is_none());
        assert_eq!(report.assignments.len(), 6);
    }

    #[test]
    fn zero_epochs_gives_initial_clustering_only() {
        let ds = two_tone(&TwoToneSpec::default(), 1);
        let cfg = RunConfig { epochs: 0, ..small_cfg() };
        let report = train(&cfg, &ds).unwrap();
        assert!(report.losses.is_empty());
        assert_eq!(report.assignments.len(), 20);
        assert!(report.metrics.is_some());
    }

    #[test]
    fn loss_identity_and_effective_beta() {
        let ds = two_tone(&TwoToneSpec::default(), 2);
        for (pgcl, read, beta) in [(true, true, 0.3), (true, false, 1.0), (false, true, 0.0)] {
            let cfg = RunConfig {
                use_pgcl: pgcl,
                use_read: read,
                beta: 0.3,
                ..small_cfg()
            };
            let report = train(&cfg, &ds).unwrap();
            assert_eq!(report.effective_beta, beta);
            for e in &report.losses {
                let expected = beta * e.l_con + (1.0 - beta) * e.l_recon;
                assert!((e.l_total - expected).abs() < 1e-9);
                if !pgcl {
                    assert_eq!(e.l_con, 0.0);
                }
                if !read {
                    assert_eq!(e.l_recon, 0.0);
                }
            }
        }
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        let ds = two_tone(&TwoToneSpec::default(), 3);
        let a = train(&small_cfg(), &ds).unwrap();
        let b = train(&small_cfg(), &ds).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let ds = two_tone(&TwoToneSpec::default(), 4);
        let cfg = RunConfig { batch_size: Some(7), ..small_cfg() };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| train(&cfg, &ds)).unwrap();
        let b = four.install(|| train(&cfg, &ds)).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.embeddings, b.embeddings);
    }

    #[test]
    fn ablation_rows_and_mix_counter() {
        let ds = two_tone(&TwoToneSpec::default(), 5);
        let cfg = RunConfig { epochs: 2, ..small_cfg() };
        let rows = ablate(&cfg, &ds).unwrap();
        let flags: Vec<_> = rows.iter().map(|r| (r.use_coeh, r.use_pgcl, r.use_read)).collect();
        assert_eq!(
            flags,
            vec![
                (true, true, true),
                (false, true, true),
                (true, false, true),
                (true, true, false),
                (true, false, false)
            ]
        );
        assert_eq!(rows[1].report.mix_calls, 0);
        // two training epochs plus the evaluation pass
        assert_eq!(rows[0].report.mix_calls, 3 * 20);
        assert_eq!(rows[4].report.mix_calls, 20);
        assert!(rows[4].report.losses.is_empty());
        let full = train(&cfg, &ds).unwrap();
        assert_eq!(full.metrics, rows[0].report.metrics);
        assert_eq!(full.embeddings, rows[0].report.embeddings);
    }

    #[test]
    fn augmentation_rows_share_config() {
        let ds = two_tone(&TwoToneSpec::default(), 6);
        let cfg = RunConfig { epochs: 1, ..small_cfg() };
        let rows = compare_augmentations(&cfg, &ds).unwrap();
        let names: Vec<_> = rows.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["coeh", "jitter", "scaling", "permutation", "crop", "mask"]);
        for (_, r) in &rows[1..] {
            assert_eq!(r.mix_calls, 0);
            assert_eq!(r.config.seed, rows[0].1.config.seed);
            assert_eq!(r.config.epochs, rows[0].1.config.epochs);
        }
    }

    #[test]
    fn encoder_neighbor_space_runs() {
        let ds = two_tone(&TwoToneSpec::default(), 7);
        let cfg = RunConfig {
            neighbor_space: NeighborSpace::Encoder,
            epochs: 2,
            ..small_cfg()
        };
        let report = train(&cfg, &ds).unwrap();
        assert_eq!(report.mix_calls, 3 * 20);
    }

    #[test]
    fn overrides_parse_and_reject() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["epochs=0", "augmentation=jitter", "k=3", "gamma=0.5"])
            .unwrap();
        assert_eq!(cfg.epochs, 0);
        assert_eq!(cfg.augmentation, Some(AugmentKind::Jitter));
        assert_eq!(cfg.k, Some(3));
        let err = cfg.apply_overrides(&["nope=1", "epochs"]).unwrap_err();
        match err {
            TfecError::Config(list) => assert_eq!(list.len(), 2),
            other => panic!("{other:?}"),
        }
        assert!(cfg.apply_overrides(&["epochs=abc"]).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig {
            k: Some(4),
            augmentation: Some(AugmentKind::Mask),
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"epochs": 7}"#).unwrap();
        assert_eq!(partial.epochs, 7);
        assert_eq!(partial.beta, 0.5);
        assert!(serde_json::from_str::<RunConfig>(r#"{"epoch": 7}"#).is_err());
    }

    #[test]
    fn raw_baseline_separates_two_tone() {
        let ds = two_tone(&TwoToneSpec::default(), 8);
        let (assign, metrics) = raw_kmeans_baseline(&RunConfig::default(), &ds).unwrap();
        assert_eq!(assign.len(), 20);
        assert!(metrics.unwrap().nmi >= 0.0);
    }
}
