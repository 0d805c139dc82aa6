/// A collection of named parameter tensors, all stored contiguously.
///
/// Gradient accumulators use the same type as the parameters they belong to,
/// so every layer and model exposes its tensors in one fixed order.
pub trait ParamSet {
    /// `(name, shape, values)` for every tensor, in a stable order.
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])>;

    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn tensors(&self) -> Vec<&[f64]> {
        self.named_tensors().into_iter().map(|(_, _, t)| t).collect()
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Overwrites every tensor from a flat vector laid out like [`to_flat`].
    ///
    /// [`to_flat`]: ParamSet::to_flat
    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter vector has wrong length");
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Prefixes every tensor name of a sub-component.
pub(crate) fn prefixed<'a>(
    prefix: &str,
    tensors: Vec<(String, Vec<usize>, &'a [f64])>,
) -> Vec<(String, Vec<usize>, &'a [f64])> {
    tensors
        .into_iter()
        .map(|(name, shape, t)| (format!("{prefix}.{name}"), shape, t))
        .collect()
}
