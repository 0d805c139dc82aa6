//! Temporal-frequency co-enhancement.
//!
//! A sample and its nearest neighbours are cropped with one shared window,
//! transformed per channel, blended in the frequency domain
//! (`F = q_i + sum_p delta_p * q_p`) and transformed back. The unmixed crop
//! and the blended crop form the two views fed to the encoder.
//!
//! The classical augmenters used for comparison runs live here as well.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::MtsDataset;
use crate::error::{Result, TfecError};
use crate::numkernel::{RealDft, Spectrum};

/// Largest tolerated imaginary residue (as a fraction of energy) after the
/// inverse transform of a mixed spectrum.
pub const MAX_IMAG_FRACTION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoehConfig {
    /// Crop length `L`; `None` means `ceil(0.9 * T)`.
    pub crop_len: Option<usize>,
    /// Neighbour count `P`.
    pub neighbors: usize,
    /// Mixing budget: upper bound on the sum of neighbour weights.
    pub gamma: f64,
}

impl Default for CoehConfig {
    fn default() -> Self {
        Self {
            crop_len: None,
            neighbors: 3,
            gamma: 0.2,
        }
    }
}

impl CoehConfig {
    pub fn resolved_crop_len(&self, t: usize) -> usize {
        self.crop_len
            .unwrap_or_else(|| ((0.9 * t as f64).ceil() as usize).max(1))
    }

    pub fn validate(&self, n: usize, t: usize) -> Vec<String> {
        let mut errors = Vec::new();
        let l = self.resolved_crop_len(t);
        if l == 0 || l > t {
            errors.push(format!("crop_len {l} must lie in 1..={t}"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            errors.push(format!("gamma {} must lie in [0, 1]", self.gamma));
        }
        if self.neighbors >= n {
            errors.push(format!(
                "neighbors {} must be smaller than the corpus size {n}",
                self.neighbors
            ));
        }
        errors
    }
}

/// Neighbours of one anchor sample with their mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub anchor: usize,
    pub neighbors: Vec<(usize, f64)>,
}

impl NeighborSet {
    pub fn weight_sum(&self) -> f64 {
        self.neighbors.iter().map(|(_, w)| w).sum()
    }
}

/// Pairwise Euclidean distances plus the density gate derived from them.
///
/// The gate is the median, over all samples, of the distance to the `k`-th
/// nearest other sample. Candidates farther than the gate are dropped.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    distances: Array2<f64>,
    k: usize,
    gate: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl NeighborIndex {
    /// `points` is `N x dim`, one flattened sample per row.
    pub fn from_points(points: ArrayView2<'_, f64>, k: usize) -> Result<Self> {
        let n = points.nrows();
        if k == 0 || k >= n {
            return Err(TfecError::config(format!(
                "neighbour count {k} must lie in 1..{n}"
            )));
        }
        let mut distances = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let d = points
                    .row(i)
                    .iter()
                    .zip(points.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                distances[[i, j]] = d;
                distances[[j, i]] = d;
            }
        }
        let mut radii: Vec<f64> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| distances[[i, j]])
                    .collect();
                row.sort_by(f64::total_cmp);
                row[k - 1]
            })
            .collect();
        let gate = median(&mut radii);
        Ok(Self { distances, k, gate })
    }

    pub fn from_dataset(ds: &MtsDataset, k: usize) -> Result<Self> {
        let flat = ds
            .samples
            .to_shape((ds.n(), ds.t() * ds.f()))
            .map_err(|e| TfecError::Shape(e.to_string()))?;
        Self::from_points(flat.view(), k)
    }

    pub fn gate(&self) -> f64 {
        self.gate
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances[[i, j]]
    }

    /// The `k` nearest samples to `i` (ties to the lower index), gated, with
    /// weights `gamma * softmin(d / tau)` where `tau` is the mean kept distance.
    pub fn select(&self, i: usize, gamma: f64) -> NeighborSet {
        let n = self.distances.nrows();
        let mut candidates: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        candidates.sort_by(|&a, &b| {
            self.distances[[i, a]]
                .total_cmp(&self.distances[[i, b]])
                .then(a.cmp(&b))
        });
        candidates.truncate(self.k);
        let kept: Vec<(usize, f64)> = candidates
            .into_iter()
            .map(|j| (j, self.distances[[i, j]]))
            .filter(|&(_, d)| d <= self.gate)
            .collect();
        if kept.is_empty() || gamma <= 0.0 {
            return NeighborSet {
                anchor: i,
                neighbors: Vec::new(),
            };
        }
        let tau = kept.iter().map(|(_, d)| d).sum::<f64>() / kept.len() as f64;
        let neighbors = if tau <= 0.0 {
            let w = gamma / kept.len() as f64;
            kept.iter().map(|&(j, _)| (j, w)).collect()
        } else {
            let d_min = kept.iter().map(|(_, d)| *d).fold(f64::INFINITY, f64::min);
            let raw: Vec<f64> = kept.iter().map(|(_, d)| (-(d - d_min) / tau).exp()).collect();
            let total: f64 = raw.iter().sum();
            kept.iter()
                .zip(raw)
                .map(|(&(j, _), r)| (j, gamma * r / total))
                .collect()
        };
        NeighborSet {
            anchor: i,
            neighbors,
        }
    }
}

/// Neighbour selection straight from a corpus. Builds the full distance
/// matrix, so prefer [`NeighborIndex`] when selecting for many anchors.
pub fn select_neighbors(ds: &MtsDataset, i: usize, p: usize, gamma: f64) -> Result<NeighborSet> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(TfecError::config(format!("gamma {gamma} must lie in [0, 1]")));
    }
    Ok(NeighborIndex::from_dataset(ds, p)?.select(i, gamma))
}

/// Segments cut from one shared window.
#[derive(Debug, Clone)]
pub struct AlignedCrop {
    pub anchor: Array2<f64>,
    pub neighbors: Vec<Array2<f64>>,
    pub window_start: usize,
}

/// Draws one window start uniformly from `0..=T-L` and cuts the anchor and
/// every neighbour with it.
pub fn aligned_crop<R: Rng + ?Sized>(
    anchor: ArrayView2<'_, f64>,
    neighbors: &[ArrayView2<'_, f64>],
    crop_len: usize,
    rng: &mut R,
) -> Result<AlignedCrop> {
    let t = anchor.nrows();
    if crop_len == 0 || crop_len > t {
        return Err(TfecError::config(format!(
            "crop length {crop_len} must lie in 1..={t}"
        )));
    }
    if neighbors.iter().any(|nb| nb.dim() != anchor.dim()) {
        return Err(TfecError::Shape("neighbour shape differs from anchor".into()));
    }
    let window_start = rng.random_range(0..=t - crop_len);
    let window = s![window_start..window_start + crop_len, ..];
    Ok(AlignedCrop {
        anchor: anchor.slice(window).to_owned(),
        neighbors: neighbors.iter().map(|nb| nb.slice(window).to_owned()).collect(),
        window_start,
    })
}

/// Bin-wise `q_i + sum_p delta_p * q_p`, channel by channel.
pub fn frequency_mix(anchor: &[Spectrum], neighbors: &[(&[Spectrum], f64)]) -> Result<Vec<Spectrum>> {
    let mut mixed = anchor.to_vec();
    for (spectra, delta) in neighbors {
        if spectra.len() != anchor.len() {
            return Err(TfecError::Shape(format!(
                "neighbour has {} channels, anchor {}",
                spectra.len(),
                anchor.len()
            )));
        }
        for (out, nb) in mixed.iter_mut().zip(spectra.iter()) {
            if nb.len() != out.len() {
                return Err(TfecError::Shape(format!(
                    "neighbour spectrum has {} bins, anchor {}",
                    nb.len(),
                    out.len()
                )));
            }
            for (o, q) in out.bins.iter_mut().zip(&nb.bins) {
                *o += q * *delta;
            }
        }
    }
    Ok(mixed)
}

/// An augmented segment in input space.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedSample {
    /// `L x F`.
    pub values: Array2<f64>,
    pub window_start: usize,
    pub source: usize,
}

/// Per-channel forward transforms of an `L x F` segment.
pub fn spectra_of(dft: &RealDft, x: ArrayView2<'_, f64>) -> Result<Vec<Spectrum>> {
    x.axis_iter(Axis(1))
        .map(|ch| {
            let ch = ch.to_vec();
            dft.forward(&ch)
        })
        .collect()
}

/// Inverse of [`spectra_of`]; fails when the discarded imaginary residue
/// exceeds [`MAX_IMAG_FRACTION`] of the signal energy.
pub fn synthesize(dft: &RealDft, spectra: &[Spectrum]) -> Result<Array2<f64>> {
    let len = dft.len();
    let mut out = Array2::zeros((len, spectra.len()));
    for (c, spectrum) in spectra.iter().enumerate() {
        let inv = dft.inverse(spectrum)?;
        if inv.imag_fraction() > MAX_IMAG_FRACTION {
            return Err(TfecError::Numeric(format!(
                "mixed spectrum lost Hermitian symmetry (imaginary fraction {:.3e})",
                inv.imag_fraction()
            )));
        }
        out.column_mut(c).assign(&ndarray::Array1::from(inv.signal));
    }
    Ok(out)
}

/// Reusable co-enhancement state for one corpus: neighbour index, planned
/// transform and a count of spectral mixing calls.
#[derive(Debug)]
pub struct CoEnhancer {
    cfg: CoehConfig,
    crop_len: usize,
    dft: RealDft,
    index: NeighborIndex,
    mix_calls: AtomicU64,
}

impl CoEnhancer {
    pub fn new(ds: &MtsDataset, cfg: CoehConfig) -> Result<Self> {
        let index = NeighborIndex::from_dataset(ds, cfg.neighbors)?;
        Self::with_index(ds, cfg, index)
    }

    /// Uses a caller-supplied index, e.g. one built from encoder outputs.
    pub fn with_index(ds: &MtsDataset, cfg: CoehConfig, index: NeighborIndex) -> Result<Self> {
        let errors = cfg.validate(ds.n(), ds.t());
        if !errors.is_empty() {
            return Err(TfecError::Config(errors));
        }
        let crop_len = cfg.resolved_crop_len(ds.t());
        Ok(Self {
            cfg,
            crop_len,
            dft: RealDft::new(crop_len)?,
            index,
            mix_calls: AtomicU64::new(0),
        })
    }

    pub fn crop_len(&self) -> usize {
        self.crop_len
    }

    pub fn config(&self) -> &CoehConfig {
        &self.cfg
    }

    pub fn mix_calls(&self) -> u64 {
        self.mix_calls.load(Ordering::Relaxed)
    }

    pub fn neighbors_of(&self, i: usize) -> NeighborSet {
        self.index.select(i, self.cfg.gamma)
    }

    /// Returns `(temporal view, frequency-enhanced view)` sharing one window.
    pub fn enhance<R: Rng + ?Sized>(
        &self,
        ds: &MtsDataset,
        i: usize,
        rng: &mut R,
    ) -> Result<(EnhancedSample, EnhancedSample)> {
        self.enhance_with_len(ds, i, self.crop_len, rng)
    }

    /// Like [`enhance`](Self::enhance) with an explicit crop length.
    pub fn enhance_with_len<R: Rng + ?Sized>(
        &self,
        ds: &MtsDataset,
        i: usize,
        crop_len: usize,
        rng: &mut R,
    ) -> Result<(EnhancedSample, EnhancedSample)> {
        let set = self.neighbors_of(i);
        let neighbor_views: Vec<ArrayView2<'_, f64>> =
            set.neighbors.iter().map(|&(j, _)| ds.series(j)).collect();
        let crop = aligned_crop(ds.series(i), &neighbor_views, crop_len, rng)?;

        let dft = if crop_len == self.crop_len {
            self.dft.clone()
        } else {
            RealDft::new(crop_len)?
        };
        let anchor_spectra = spectra_of(&dft, crop.anchor.view())?;
        let neighbor_spectra: Vec<Vec<Spectrum>> = crop
            .neighbors
            .iter()
            .map(|nb| spectra_of(&dft, nb.view()))
            .collect::<Result<_>>()?;
        let weighted: Vec<(&[Spectrum], f64)> = neighbor_spectra
            .iter()
            .zip(&set.neighbors)
            .map(|(spectra, &(_, delta))| (spectra.as_slice(), delta))
            .collect();
        self.mix_calls.fetch_add(1, Ordering::Relaxed);
        let mixed = frequency_mix(&anchor_spectra, &weighted)?;
        let enhanced = synthesize(&dft, &mixed)?;

        let view_a = EnhancedSample {
            values: crop.anchor,
            window_start: crop.window_start,
            source: i,
        };
        let view_b = EnhancedSample {
            values: enhanced,
            window_start: crop.window_start,
            source: i,
        };
        Ok((view_a, view_b))
    }
}

/// One-shot co-enhancement of sample `i`.
pub fn coenhance<R: Rng + ?Sized>(
    ds: &MtsDataset,
    i: usize,
    cfg: CoehConfig,
    rng: &mut R,
) -> Result<(EnhancedSample, EnhancedSample)> {
    CoEnhancer::new(ds, cfg)?.enhance(ds, i, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Jitter,
    Scaling,
    Permutation,
    Crop,
    Mask,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 5] = [
        AugmentKind::Jitter,
        AugmentKind::Scaling,
        AugmentKind::Permutation,
        AugmentKind::Crop,
        AugmentKind::Mask,
    ];

    pub fn default_strength(self) -> f64 {
        match self {
            AugmentKind::Jitter => 0.1,
            AugmentKind::Scaling => 0.1,
            AugmentKind::Permutation => 0.2,
            AugmentKind::Crop => 0.1,
            AugmentKind::Mask => 0.15,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Jitter => "jitter",
            AugmentKind::Scaling => "scaling",
            AugmentKind::Permutation => "permutation",
            AugmentKind::Crop => "crop",
            AugmentKind::Mask => "mask",
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentKind {
    type Err = TfecError;

    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| TfecError::config(format!("unknown augmentation kind {s:?}")))
    }
}

/// Classical augmentations of a `T x F` series.
///
/// - jitter: additive `N(0, strength^2)` noise
/// - scaling: each channel times `N(1, strength^2)`
/// - permutation: `ceil(1 / strength)` contiguous segments, shuffled
/// - crop: keeps a random `(1 - strength) * T` window in place, zeros elsewhere
/// - mask: zeros one random contiguous span of `strength * T` steps
pub fn baseline_augment<R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    kind: AugmentKind,
    rng: &mut R,
    strength: f64,
) -> Result<Array2<f64>> {
    if !(strength > 0.0) || !strength.is_finite() {
        return Err(TfecError::config(format!(
            "augmentation strength must be positive, got {strength}"
        )));
    }
    let (t, f) = x.dim();
    let mut out = x.to_owned();
    match kind {
        AugmentKind::Jitter => {
            let noise = Normal::new(0.0, strength).expect("positive std");
            out.mapv_inplace(|v| v + noise.sample(rng));
        }
        AugmentKind::Scaling => {
            let factor = Normal::new(1.0, strength).expect("positive std");
            for mut ch in out.axis_iter_mut(Axis(1)) {
                let s = factor.sample(rng);
                ch.mapv_inplace(|v| v * s);
            }
        }
        AugmentKind::Permutation => {
            let segments = ((1.0 / strength).ceil() as usize).clamp(1, t.max(1));
            let bounds: Vec<usize> = (0..=segments).map(|s| s * t / segments).collect();
            let mut order: Vec<usize> = (0..segments).collect();
            order.shuffle(rng);
            let mut row = 0;
            for seg in order {
                for src in bounds[seg]..bounds[seg + 1] {
                    out.row_mut(row).assign(&x.row(src));
                    row += 1;
                }
            }
        }
        AugmentKind::Crop => {
            let keep = (((1.0 - strength) * t as f64).round() as usize).clamp(1, t);
            let start = rng.random_range(0..=t - keep);
            for step in (0..start).chain(start + keep..t) {
                out.row_mut(step).fill(0.0);
            }
        }
        AugmentKind::Mask => {
            let span = ((strength * t as f64).round() as usize).min(t);
            let start = rng.random_range(0..=t - span);
            out.slice_mut(s![start..start + span, ..]).fill(0.0);
        }
    }
    debug_assert_eq!(out.dim(), (t, f));
    Ok(out)
}
