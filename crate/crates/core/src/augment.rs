//! Random crops for RL batches and patch masks for the auxiliary tasks.

use pixrl_nn::Real;
use rand::Rng;

use crate::{CoreError, Result};

/// Raw frame side length.
pub const INPUT_SIZE: usize = 100;
/// Side length after cropping.
pub const CROP_SIZE: usize = 84;
/// Largest valid crop offset on either axis.
pub const MAX_OFFSET: usize = INPUT_SIZE - CROP_SIZE;
/// Offset used for acting and evaluation.
pub const CENTER_OFFSET: (usize, usize) = (MAX_OFFSET / 2, MAX_OFFSET / 2);

/// Copies the `CROP_SIZE²` window at `offset = (row, col)` out of every channel
/// of a `channels × INPUT_SIZE × INPUT_SIZE` stack and appends it to `out`.
pub fn crop_into(stack: &[u8], channels: usize, offset: (usize, usize), out: &mut Vec<u8>) -> Result<()> {
    if stack.len() != channels * INPUT_SIZE * INPUT_SIZE {
        return Err(CoreError::Shape(format!(
            "crop input has {} bytes, expected {channels}×{INPUT_SIZE}×{INPUT_SIZE}",
            stack.len()
        )));
    }
    let (r0, c0) = offset;
    if r0 > MAX_OFFSET || c0 > MAX_OFFSET {
        return Err(CoreError::Shape(format!("crop offset {offset:?} exceeds {MAX_OFFSET}")));
    }
    out.reserve(channels * CROP_SIZE * CROP_SIZE);
    for plane in stack.chunks_exact(INPUT_SIZE * INPUT_SIZE) {
        for r in r0..r0 + CROP_SIZE {
            out.extend_from_slice(&plane[r * INPUT_SIZE + c0..r * INPUT_SIZE + c0 + CROP_SIZE]);
        }
    }
    Ok(())
}

pub fn crop_at(stack: &[u8], channels: usize, offset: (usize, usize)) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    crop_into(stack, channels, offset, &mut out)?;
    Ok(out)
}

/// Uniform offset on `{0..=MAX_OFFSET}²`, row drawn first.
pub fn random_offset<R: Rng + ?Sized>(rng: &mut R) -> (usize, usize) {
    let r = rng.random_range(0..=MAX_OFFSET);
    let c = rng.random_range(0..=MAX_OFFSET);
    (r, c)
}

/// One random window applied to all channels of the stack.
pub fn random_crop<R: Rng + ?Sized>(stack: &[u8], channels: usize, rng: &mut R) -> Result<Vec<u8>> {
    crop_at(stack, channels, random_offset(rng))
}

/// A second, independently drawn crop of the same stack.
pub fn second_view<R: Rng + ?Sized>(stack: &[u8], channels: usize, rng: &mut R) -> Result<Vec<u8>> {
    random_crop(stack, channels, rng)
}

/// Masked patch indices of one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    /// Sorted, unique.
    pub masked: Vec<usize>,
    pub num_patches: usize,
}

impl MaskSet {
    pub fn new(mut masked: Vec<usize>, num_patches: usize) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&i| i >= num_patches) {
            return Err(CoreError::Shape(format!("mask index out of range for {num_patches} patches")));
        }
        Ok(Self { masked, num_patches })
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.num_patches).filter(|&i| !self.is_masked(i)).collect()
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

/// `round(ratio × num_patches)`, halves rounded away from zero.
pub fn mask_count(ratio: f64, num_patches: usize) -> usize {
    (ratio * num_patches as f64).round() as usize
}

/// Uniform subset of `mask_count(ratio)` patches, drawn without replacement.
pub fn sample_mask<R: Rng + ?Sized>(ratio: f64, num_patches: usize, rng: &mut R) -> Result<MaskSet> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CoreError::Config(format!("mask ratio {ratio} must lie in (0, 1)")));
    }
    let k = mask_count(ratio, num_patches);
    MaskSet::new(rand::seq::index::sample(rng, num_patches, k).into_vec(), num_patches)
}

pub const NORM_EPS: f64 = 1e-6;

/// Standardizes every `dim`-long row to zero mean and unit variance:
/// `(x − μ) / √(σ² + ε)`.
pub fn per_patch_normalize<T: Real>(patches: &[T], dim: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(patches.len());
    for row in patches.chunks_exact(dim) {
        let n = dim as f64;
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        out.extend(row.iter().map(|v| T::lit((v.as_f64() - mean) * inv)));
    }
    out
}
