//! Non-overlapping patch segmentation and horizon alignment.
//!
//! A length-T sequence becomes K = floor(T/P) contiguous patches; targets
//! are reduced to one mean value per patch, and training pairs match the
//! hidden state at patch k with the target at patch k+h.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A sequence cut into K patches of P steps and F features each.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    patches: Tensor,
}

impl PatchSequence {
    /// Underlying `[K, P, F]` tensor.
    pub fn tensor(&self) -> &Tensor {
        &self.patches
    }

    /// Number of patches.
    pub fn num_patches(&self) -> usize {
        self.patches.shape()[0]
    }

    /// Patch length.
    pub fn patch_len(&self) -> usize {
        self.patches.shape()[1]
    }

    /// Feature count.
    pub fn num_features(&self) -> usize {
        self.patches.shape()[2]
    }

    /// Copy of patch `k` as a `[P, F]` matrix.
    pub fn patch(&self, k: usize) -> Tensor {
        let (_, p, f) = self.patches.dims3().expect("patches are rank 3");
        let start = k * p * f;
        Tensor::new(
            vec![p, f],
            self.patches.data()[start..start + p * f].to_vec(),
        )
        .expect("patch slice matches shape")
    }
}

/// Mean target value per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTargets {
    /// `values[k]` is the mean of the target over patch k.
    pub values: Vec<f64>,
}

/// Cut `x` (shape `[T, F]`) into K = floor(T/P) contiguous patches,
/// dropping the trailing `T mod P` steps.
pub fn patchify(x: &Tensor, patch_len: usize) -> Result<PatchSequence> {
    let (t, f) = x.dims2()?;
    if patch_len == 0 {
        return Err(Error::config("patch length must be >= 1".to_string()));
    }
    if t < patch_len {
        return Err(Error::config(format!(
            "sequence length {t} is shorter than patch length {patch_len}"
        )));
    }
    let k = t / patch_len;
    let dropped = t % patch_len;
    if dropped > 0 {
        log::debug!("patchify: dropping {dropped} trailing steps of {t} (P={patch_len})");
    }
    let data = x.data()[..k * patch_len * f].to_vec();
    Ok(PatchSequence {
        patches: Tensor::new(vec![k, patch_len, f], data)?,
    })
}

/// Mean of `y` within each patch window.
pub fn aggregate_targets(y: &[f64], patch_len: usize) -> Result<PatchTargets> {
    if patch_len == 0 {
        return Err(Error::config("patch length must be >= 1".to_string()));
    }
    if y.len() < patch_len {
        return Err(Error::config(format!(
            "target length {} is shorter than patch length {}",
            y.len(),
            patch_len
        )));
    }
    let k = y.len() / patch_len;
    let values = (0..k)
        .map(|i| y[i * patch_len..(i + 1) * patch_len].iter().sum::<f64>() / patch_len as f64)
        .collect();
    Ok(PatchTargets { values })
}

/// Pair row k of `states` (shape `[K, D]`) with target k+h, yielding K-h
/// input rows and K-h labels.
pub fn align_horizon(
    states: &Tensor,
    targets: &PatchTargets,
    horizon: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let (k, d) = states.dims2()?;
    if targets.values.len() != k {
        return Err(Error::shape(
            "align_horizon",
            format!("{} states but {} patch targets", k, targets.values.len()),
        ));
    }
    check_horizon(k, horizon)?;
    let keep = k - horizon;
    let inputs = Tensor::new(vec![keep, d], states.data()[..keep * d].to_vec())?;
    let labels = targets.values[horizon..].to_vec();
    Ok((inputs, labels))
}

/// Validate `1 <= h < K`.
pub fn check_horizon(num_patches: usize, horizon: usize) -> Result<()> {
    if horizon < 1 {
        return Err(Error::config(format!(
            "forecast horizon must be >= 1, got {horizon}"
        )));
    }
    if horizon >= num_patches {
        return Err(Error::config(format!(
            "forecast horizon {horizon} must be smaller than the patch count {num_patches}"
        )));
    }
    Ok(())
}
