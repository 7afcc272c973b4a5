//! The segment encoder: three conv/relu/maxpool stages, a global max-pool
//! over time, and a linear map to the embedding dimension. There is no batch
//! normalization and no projection head, so rows of a batch never interact.

use crate::error::{Error, Result};
use crate::rng::{self, TAG_INIT};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of the three conv layers.
    pub channels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub paddings: Vec<usize>,
    pub pool_windows: Vec<usize>,
    /// Embedding size.
    pub output_dim: usize,
}

impl EncoderConfig {
    pub fn with_in_channels(in_channels: usize) -> Self {
        EncoderConfig {
            in_channels,
            channels: vec![32, 64, 128],
            kernel_sizes: vec![8, 8, 8],
            paddings: vec![4, 4, 4],
            pool_windows: vec![2, 2, 2],
            output_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 3 {
            return Err(Error::config(format!(
                "encoder has a fixed depth of 3 conv layers, got {}",
                self.channels.len()
            )));
        }
        if self.kernel_sizes.len() != 3 || self.paddings.len() != 3 || self.pool_windows.len() != 3
        {
            return Err(Error::config(
                "kernel_sizes, paddings and pool_windows must each list 3 entries",
            ));
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.kernel_sizes.contains(&0) || self.pool_windows.contains(&0) {
            return Err(Error::config("kernel sizes and pool windows must be positive"));
        }
        if self.output_dim < 2 {
            return Err(Error::config(format!(
                "output_dim must be at least 2, got {}",
                self.output_dim
            )));
        }
        Ok(())
    }

    /// Time lengths after each conv and pool stage for input length `t_in`,
    /// erroring with the offending layer named when a stage underflows.
    pub fn stage_lengths(&self, t_in: usize) -> Result<Vec<usize>> {
        self.validate()?;
        let mut t = t_in;
        let mut stages = Vec::with_capacity(6);
        for layer in 0..3 {
            let k = self.kernel_sizes[layer];
            let p = self.paddings[layer];
            if t + 2 * p < k {
                return Err(Error::shape(format!(
                    "conv layer {}: kernel {} wider than padded length {}",
                    layer + 1,
                    k,
                    t + 2 * p
                )));
            }
            t = t + 2 * p - k + 1;
            stages.push(t);
            let w = self.pool_windows[layer];
            if t < w {
                return Err(Error::shape(format!(
                    "pool layer {}: window {} larger than length {}",
                    layer + 1,
                    w,
                    t
                )));
            }
            t = (t - w) / w + 1;
            stages.push(t);
        }
        Ok(stages)
    }

    /// Named parameter shapes in registration order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let mut shapes = Vec::new();
        let mut c_in = self.in_channels;
        for layer in 0..3 {
            let c_out = self.channels[layer];
            shapes.push((
                format!("conv{}.weight", layer + 1),
                vec![c_out, c_in, self.kernel_sizes[layer]],
            ));
            shapes.push((format!("conv{}.bias", layer + 1), vec![c_out]));
            c_in = c_out;
        }
        shapes.push(("fc.weight".to_string(), vec![c_in, self.output_dim]));
        shapes.push(("fc.bias".to_string(), vec![self.output_dim]));
        Ok(shapes)
    }

    /// Total parameter count.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }
}

/// Named encoder parameters, ordered as registered on the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub tensors: Vec<(String, Tensor<F>)>,
}

impl<F: Real> EncoderParams<F> {
    pub fn values(&self) -> Vec<Tensor<F>> {
        self.tensors.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Check that shapes match the given configuration, e.g. when resuming
    /// from a checkpoint.
    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        let expected = cfg.param_shapes()?;
        if expected.len() != self.tensors.len() {
            return Err(Error::shape(format!(
                "parameter count mismatch: checkpoint has {}, config wants {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), (have_name, have)) in expected.iter().zip(&self.tensors) {
            if name != have_name || have.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter '{}' has shape {:?}, config wants '{}' {:?}",
                    have_name,
                    have.shape(),
                    name,
                    shape
                )));
            }
        }
        Ok(())
    }
}

/// Kaiming-uniform initialization: weights `U(−√(6/fan_in), √(6/fan_in))`,
/// zero biases. Deterministic under `seed`.
pub fn encoder_init<F: Real>(cfg: &EncoderConfig, seed: u64) -> Result<EncoderParams<F>> {
    let shapes = cfg.param_shapes()?;
    let mut tensors = Vec::with_capacity(shapes.len());
    for (idx, (name, shape)) in shapes.into_iter().enumerate() {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut r = rng::stream(&[TAG_INIT, seed, idx as u64]);
            Tensor::from_fn(shape, |_| {
                F::of(rand::Rng::random_range(&mut r, -bound..bound))
            })
        };
        tensors.push((name, t));
    }
    Ok(EncoderParams { tensors })
}

/// Put every parameter on the tape as a leaf, in registration order.
pub fn register_params<F: Real>(tape: &mut Tape<F>, params: &EncoderParams<F>) -> Vec<Var> {
    params
        .tensors
        .iter()
        .map(|(_, t)| tape.leaf(t.clone()))
        .collect()
}

/// Forward pass: `x (B×V×T) -> embeddings (B×output_dim)`. `param_vars`
/// must come from [`register_params`] with a matching config.
pub fn encode<F: Real>(
    tape: &mut Tape<F>,
    cfg: &EncoderConfig,
    param_vars: &[Var],
    x: Var,
) -> Result<Var> {
    let (_b, v, t_in) = tape.value(x).dims3()?;
    if v != cfg.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, encoder expects {}",
            v, cfg.in_channels
        )));
    }
    cfg.stage_lengths(t_in)?;
    if param_vars.len() != 8 {
        return Err(Error::shape(format!(
            "expected 8 parameter tensors, got {}",
            param_vars.len()
        )));
    }
    let mut h = x;
    for layer in 0..3 {
        let w = param_vars[layer * 2];
        let b = param_vars[layer * 2 + 1];
        h = tape.conv1d(h, w, 1, cfg.paddings[layer])?;
        h = tape.add_bias(h, b)?;
        h = tape.relu(h)?;
        let win = cfg.pool_windows[layer];
        h = tape.maxpool1d(h, win, win)?;
    }
    h = tape.global_maxpool(h)?;
    h = tape.matmul(h, param_vars[6])?;
    tape.add_bias(h, param_vars[7])
}

/// Convenience: run the encoder outside any surrounding graph and return the
/// embedding values.
pub fn encode_values<F: Real>(
    cfg: &EncoderConfig,
    params: &EncoderParams<F>,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let xv = tape.leaf(x.clone());
    let z = encode(&mut tape, cfg, &vars, xv)?;
    Ok(tape.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            in_channels: 2,
            channels: vec![4, 6, 8],
            kernel_sizes: vec![8, 8, 8],
            paddings: vec![4, 4, 4],
            pool_windows: vec![2, 2, 2],
            output_dim: 16,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_cfg();
        let a: EncoderParams<f64> = encoder_init(&cfg, 5).unwrap();
        let b: EncoderParams<f64> = encoder_init(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let c: EncoderParams<f64> = encoder_init(&cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = small_cfg();
        let params: EncoderParams<f64> = encoder_init(&cfg, 0).unwrap();
        let total: usize = params.tensors.iter().map(|(_, t)| t.numel()).sum();
        let expect = (4 * 2 * 8 + 4) + (6 * 4 * 8 + 6) + (8 * 6 * 8 + 8) + (8 * 16 + 16);
        assert_eq!(total, expect);
        assert_eq!(cfg.param_count().unwrap(), expect);
    }

    #[test]
    fn shapes_do_not_depend_on_seed() {
        let cfg = small_cfg();
        let a: EncoderParams<f64> = encoder_init(&cfg, 1).unwrap();
        let b: EncoderParams<f64> = encoder_init(&cfg, 2).unwrap();
        for ((_, x), (_, y)) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(x.shape(), y.shape());
        }
    }

    #[test]
    fn output_shape_is_batch_by_output_dim() {
        let cfg = small_cfg();
        let params = encoder_init::<f64>(&cfg, 3).unwrap();
        for t_len in [24usize, 50, 179] {
            let x = Tensor::from_fn(vec![3, 2, t_len], |i| (i % 7) as f64 * 0.1);
            let z = encode_values(&cfg, &params, &x).unwrap();
            assert_eq!(z.shape(), &[3, 16]);
            assert!(z.is_finite());
        }
    }

    #[test]
    fn zero_input_gives_identical_rows() {
        let cfg = small_cfg();
        let params = encoder_init::<f64>(&cfg, 3).unwrap();
        let x = Tensor::zeros(vec![4, 2, 40]);
        let z = encode_values(&cfg, &params, &x).unwrap();
        let d = z.data();
        for row in 1..4 {
            assert_eq!(&d[row * 16..(row + 1) * 16], &d[..16]);
        }
    }

    #[test]
    fn batch_permutation_permutes_rows() {
        let cfg = small_cfg();
        let params = encoder_init::<f64>(&cfg, 3).unwrap();
        let x = Tensor::from_fn(vec![3, 2, 30], |i| ((i * 37 % 11) as f64 - 5.0) * 0.3);
        let z = encode_values(&cfg, &params, &x).unwrap();
        // swap rows 0 and 2 of the input
        let mut swapped = x.clone();
        let stride = 2 * 30;
        let (head, tail) = swapped.data_mut().split_at_mut(stride);
        head.copy_from_slice(&x.data()[2 * stride..3 * stride]);
        tail[stride..2 * stride].copy_from_slice(&x.data()[..stride]);
        let z2 = encode_values(&cfg, &params, &swapped).unwrap();
        assert_eq!(&z2.data()[..16], &z.data()[2 * 16..3 * 16]);
        assert_eq!(&z2.data()[2 * 16..3 * 16], &z.data()[..16]);
        assert_eq!(&z2.data()[16..2 * 16], &z.data()[16..2 * 16]);
    }

    #[test]
    fn underflow_names_the_layer() {
        let mut cfg = small_cfg();
        cfg.paddings = vec![0, 0, 0];
        match cfg.stage_lengths(9) {
            // 9 -> conv 2 -> pool 1 -> conv layer 2 underflows
            Err(Error::Shape(msg)) => assert!(msg.contains("conv layer 2"), "{}", msg),
            other => panic!("expected shape error, got {:?}", other),
        }
    }

    #[test]
    fn too_small_output_dim_is_rejected() {
        let mut cfg = small_cfg();
        cfg.output_dim = 1;
        assert!(cfg.validate().is_err());
    }
}
