//! Weak and strong view construction.
//!
//! The weak view is jitter-then-scale; the strong view is permute-then-jitter.
//! Jitter magnitudes are expressed in units of the per-channel training
//! standard deviation so the defaults transfer across datasets. Views inherit
//! the anchor's stationarity state and metadata; they are never re-assessed.
//!
//! Randomness: each (sample, epoch, view) gets its own stream derived from
//! the global seed via [`crate::rng::mix`], so augmentation does not depend
//! on batch composition or iteration order.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Segment, SegmentMeta};
use crate::error::{Error, Result};
use crate::rng::{self, TAG_AUGMENT};
use crate::scalar::Real;
use crate::stationarity::StationarityLabel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Weak-view jitter, in units of per-channel training std.
    pub jitter_sigma_weak: f64,
    /// Strong-view jitter, same units.
    pub jitter_sigma_strong: f64,
    /// Spread of the per-channel multiplicative factor (around 1).
    pub scale_sigma: f64,
    /// Maximum number of permutation pieces (1 disables permutation).
    pub max_segments: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            jitter_sigma_weak: 0.05,
            jitter_sigma_strong: 0.8,
            scale_sigma: 0.1,
            max_segments: 8,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jitter_sigma_weak < 0.0 || self.jitter_sigma_strong < 0.0 || self.scale_sigma < 0.0
        {
            return Err(Error::config("augmentation sigmas must be non-negative"));
        }
        if self.max_segments == 0 {
            return Err(Error::config("max_segments must be at least 1"));
        }
        Ok(())
    }
}

/// Paired views of a batch in encoder layout (`B×V×T`), with inherited
/// stationarity states and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch<F> {
    pub view_a: Tensor<F>,
    pub view_b: Tensor<F>,
    pub labels: Vec<StationarityLabel>,
    pub meta: Vec<SegmentMeta>,
}

/// Add `Normal(0, (sigma·σ_ch)²)` noise elementwise. `values` is `T×V`;
/// `channel_std` has one entry per channel. Draws are consumed row-major.
pub fn jitter<F: Real>(
    values: &Tensor<F>,
    sigma: f64,
    channel_std: &[F],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    let (_t, v) = values.dims2()?;
    if channel_std.len() != v {
        return Err(Error::shape(format!(
            "jitter got {} channel stds for {} channels",
            channel_std.len(),
            v
        )));
    }
    if sigma == 0.0 {
        return Ok(values.clone());
    }
    let sig = F::of(sigma);
    let mut out = values.clone();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        let ch = i % v;
        *x += sig * channel_std[ch] * F::standard_normal(rng);
    }
    Ok(out)
}

/// Multiply each channel by a factor `~ Normal(1, sigma²)`, constant along
/// time within the channel.
pub fn scale<F: Real>(values: &Tensor<F>, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<F>> {
    let (_t, v) = values.dims2()?;
    if sigma == 0.0 {
        return Ok(values.clone());
    }
    let sig = F::of(sigma);
    let factors: Vec<F> = (0..v)
        .map(|_| F::one() + sig * F::standard_normal(rng))
        .collect();
    let mut out = values.clone();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        *x *= factors[i % v];
    }
    Ok(out)
}

/// Split the time axis at `m−1` uniformly chosen cut points,
/// `m ~ Uniform{2..max_segments}` (identity when `max_segments` is 1), and
/// concatenate the pieces in shuffled order. The multiset of time rows is
/// preserved.
pub fn permute<F: Real>(
    values: &Tensor<F>,
    max_segments: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    let (t_len, v) = values.dims2()?;
    if max_segments <= 1 || t_len < 2 {
        return Ok(values.clone());
    }
    let m = rng.random_range(2..=max_segments).min(t_len);
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, t_len - 1, m - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut pieces: Vec<std::ops::Range<usize>> = Vec::with_capacity(m);
    let mut start = 0;
    for &c in &cuts {
        pieces.push(start..c);
        start = c;
    }
    pieces.push(start..t_len);
    pieces.shuffle(rng);

    let vals = values.data();
    let mut out = Vec::with_capacity(t_len * v);
    for piece in pieces {
        out.extend_from_slice(&vals[piece.start * v..piece.end * v]);
    }
    Tensor::new(vec![t_len, v], out)
}

fn transpose_to_channels_first<F: Real>(values: &Tensor<F>) -> Result<(usize, usize, Vec<F>)> {
    let (t_len, v) = values.dims2()?;
    let src = values.data();
    let mut out = vec![F::zero(); t_len * v];
    for t in 0..t_len {
        for c in 0..v {
            out[c * t_len + t] = src[t * v + c];
        }
    }
    Ok((v, t_len, out))
}

/// Build the two augmented views of a batch. View a (weak) is
/// `scale ∘ jitter(σ_weak)`; view b (strong) is `jitter(σ_strong) ∘ permute`.
pub fn make_views<F: Real>(
    segments: &[&Segment<F>],
    labels: &[StationarityLabel],
    cfg: &AugmentConfig,
    channel_std: &[F],
    global_seed: u64,
    epoch: u64,
) -> Result<AugmentedBatch<F>> {
    cfg.validate()?;
    if segments.is_empty() {
        return Err(Error::config("cannot augment an empty batch"));
    }
    if segments.len() != labels.len() {
        return Err(Error::shape(format!(
            "batch has {} segments but {} stationarity labels",
            segments.len(),
            labels.len()
        )));
    }
    let (t_len, v) = segments[0].values.dims2()?;
    let b = segments.len();
    let mut a_data = vec![F::zero(); b * v * t_len];
    let mut b_data = vec![F::zero(); b * v * t_len];
    let mut meta = Vec::with_capacity(b);

    for (i, seg) in segments.iter().enumerate() {
        let mut rng_a = rng::stream(&[TAG_AUGMENT, global_seed, seg.id as u64, epoch, 0]);
        let weak = {
            let j = jitter(&seg.values, cfg.jitter_sigma_weak, channel_std, &mut rng_a)?;
            scale(&j, cfg.scale_sigma, &mut rng_a)?
        };
        let mut rng_b = rng::stream(&[TAG_AUGMENT, global_seed, seg.id as u64, epoch, 1]);
        let strong = {
            let p = permute(&seg.values, cfg.max_segments, &mut rng_b)?;
            jitter(&p, cfg.jitter_sigma_strong, channel_std, &mut rng_b)?
        };
        let (_, _, wa) = transpose_to_channels_first(&weak)?;
        let (_, _, sb) = transpose_to_channels_first(&strong)?;
        a_data[i * v * t_len..(i + 1) * v * t_len].copy_from_slice(&wa);
        b_data[i * v * t_len..(i + 1) * v * t_len].copy_from_slice(&sb);
        meta.push(SegmentMeta::from(*seg));
    }

    Ok(AugmentedBatch {
        view_a: Tensor::new(vec![b, v, t_len], a_data)?,
        view_b: Tensor::new(vec![b, v, t_len], b_data)?,
        labels: labels.to_vec(),
        meta,
    })
}
