//! Residual encoder with one-dimensional kernels.
//!
//! Input windows enter as `[N, 1, C, M]` maps (electrodes by time). A
//! time-axis kernel of length `k` is a `1 x k` convolution, a channel-axis
//! kernel a `k x 1` convolution. Every convolution pads by `k / 2`.

use serde::{Deserialize, Serialize};

use super::layers::Forward;
use super::store::ParamStore;
use crate::error::{Error, Result};
use crate::numerics::{Axis, NodeId, Op, PoolKind, Scalar};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kernel: usize,
    pub width: usize,
    /// Applied by the first convolution and the shortcut.
    pub stride: usize,
    #[serde(default = "time_axis")]
    pub first_axis: Axis,
    #[serde(default = "channel_axis")]
    pub second_axis: Axis,
}

fn time_axis() -> Axis {
    Axis::Time
}

fn channel_axis() -> Axis {
    Axis::Channel
}

impl BlockSpec {
    pub fn new(kernel: usize, width: usize, stride: usize) -> Self {
        Self {
            kernel,
            width,
            stride,
            first_axis: Axis::Time,
            second_axis: Axis::Channel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub stem_kernel: usize,
    pub stem_width: usize,
    pub stem_stride: usize,
    /// Max pool of width 3, stride 2 along time after the stem.
    pub stem_pool: bool,
    pub blocks: Vec<BlockSpec>,
    /// Representation size `D`. When it differs from the last block width a
    /// linear head maps the pooled features to `D`.
    pub output_dim: usize,
}

impl EncoderConfig {
    /// ResNet18-1D layout: stem plus eight two-convolution blocks, `D = 512`.
    pub fn full() -> Self {
        let kernels = [15, 15, 11, 11, 7, 7, 3, 3];
        let widths = [64, 64, 128, 128, 256, 256, 512, 512];
        let strides = [1, 1, 2, 1, 2, 1, 2, 1];
        Self {
            stem_kernel: 9,
            stem_width: 64,
            stem_stride: 2,
            stem_pool: true,
            blocks: (0..8).map(|i| BlockSpec::new(kernels[i], widths[i], strides[i])).collect(),
            output_dim: 512,
        }
    }

    /// Two blocks of widths 32 and 64 with `D = 64`, for desk runs.
    pub fn tiny() -> Self {
        Self {
            stem_kernel: 5,
            stem_width: 32,
            stem_stride: 2,
            stem_pool: true,
            blocks: vec![BlockSpec::new(5, 32, 1), BlockSpec::new(3, 64, 2)],
            output_dim: 64,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!("unknown encoder preset {other:?} (expected full or tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 {
            return Err(Error::config("encoder output_dim must be positive"));
        }
        if self.blocks.is_empty() {
            return Err(Error::config("encoder needs at least one residual block"));
        }
        let stem = [(self.stem_kernel, self.stem_width, self.stem_stride)];
        let blocks = self.blocks.iter().map(|b| (b.kernel, b.width, b.stride));
        for (i, (k, w, s)) in stem.into_iter().chain(blocks).enumerate() {
            if k == 0 || k % 2 == 0 {
                return Err(Error::config(format!("layer {i}: kernel length {k} must be odd")));
            }
            if w == 0 || s == 0 {
                return Err(Error::config(format!("layer {i}: width and stride must be positive")));
            }
        }
        Ok(())
    }

    pub fn last_width(&self) -> usize {
        self.blocks.last().map_or(self.stem_width, |b| b.width)
    }

    pub fn has_head(&self) -> bool {
        self.output_dim != self.last_width()
    }

    /// Convolution layers in the main path (stem plus two per block).
    pub fn main_path_convs(&self) -> usize {
        1 + 2 * self.blocks.len()
    }

    /// 1x1 projection shortcuts, one per block that changes width or stride.
    pub fn shortcut_convs(&self) -> usize {
        let mut width = self.stem_width;
        self.blocks
            .iter()
            .filter(|b| {
                let proj = b.stride != 1 || b.width != width;
                width = b.width;
                proj
            })
            .count()
    }
}

fn block_needs_projection(spec: &BlockSpec, in_width: usize) -> bool {
    spec.stride != 1 || spec.width != in_width
}

pub fn build_encoder<T: Scalar>(config: &EncoderConfig, rng: &mut SeededRng) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let k = config.stem_kernel;
    store.init_weight("encoder.stem.conv.w".into(), &[config.stem_width, 1, k], k, rng);
    store.init_batch_norm("encoder.stem.bn", config.stem_width);
    let mut width = config.stem_width;
    for (i, b) in config.blocks.iter().enumerate() {
        let p = format!("encoder.block{i}");
        store.init_weight(format!("{p}.conv1.w"), &[b.width, width, b.kernel], width * b.kernel, rng);
        store.init_batch_norm(&format!("{p}.bn1"), b.width);
        store.init_weight(format!("{p}.conv2.w"), &[b.width, b.width, b.kernel], b.width * b.kernel, rng);
        store.init_batch_norm(&format!("{p}.bn2"), b.width);
        if block_needs_projection(b, width) {
            store.init_weight(format!("{p}.short.conv.w"), &[b.width, width, 1], width, rng);
            store.init_batch_norm(&format!("{p}.short.bn"), b.width);
        }
        width = b.width;
    }
    if config.has_head() {
        store.init_weight("encoder.head.w".into(), &[config.output_dim, width], width, rng);
        store.init_bias("encoder.head.b".into(), config.output_dim, width, rng);
    }
    Ok(store)
}

/// `[N, 1, C, M]` windows to `[N, D]` representations.
pub fn encode<T: Scalar>(f: &mut Forward<'_, T>, config: &EncoderConfig, x: NodeId) -> Result<NodeId> {
    let shape = f.value(x).shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::contract(format!("encoder expects [N, 1, C, M] input, got {shape:?}")));
    }
    let k = config.stem_kernel;
    let mut h = f.conv(x, "encoder.stem.conv", Axis::Time, config.stem_stride, k / 2)?;
    h = f.batch_norm(h, "encoder.stem.bn")?;
    h = f.relu(h)?;
    if config.stem_pool {
        let m = f.value(h).shape()[3];
        let (width, padding) = if m >= 2 { (3, 1) } else { (1, 0) };
        h = f.apply(
            Op::Pool {
                kind: PoolKind::Max,
                axis: Axis::Time,
                width,
                stride: 2,
                padding,
            },
            &[h],
        )?;
    }
    let mut width = config.stem_width;
    for (i, b) in config.blocks.iter().enumerate() {
        let p = format!("encoder.block{i}");
        let pad = b.kernel / 2;
        let mut y = f.conv(h, &format!("{p}.conv1"), b.first_axis, b.stride, pad)?;
        y = f.batch_norm(y, &format!("{p}.bn1"))?;
        y = f.relu(y)?;
        y = f.conv(y, &format!("{p}.conv2"), b.second_axis, 1, pad)?;
        y = f.batch_norm(y, &format!("{p}.bn2"))?;
        let short = if block_needs_projection(b, width) {
            let s = f.conv(h, &format!("{p}.short.conv"), b.first_axis, b.stride, 0)?;
            f.batch_norm(s, &format!("{p}.short.bn"))?
        } else {
            h
        };
        y = f.apply(Op::Add, &[y, short])?;
        h = f.relu(y)?;
        width = b.width;
    }
    h = f.apply(Op::GlobalAvgPool, &[h])?;
    if config.has_head() {
        h = f.linear(h, "encoder.head")?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn run(config: &EncoderConfig, shape: [usize; 4], train: bool) -> Tensor<f32> {
        let store = build_encoder::<f32>(config, &mut SeededRng::new(0)).unwrap();
        let mut rng = SeededRng::new(1);
        let x = Tensor::from_fn(&shape, |_| rng.normal() as f32);
        let mut f = Forward::new(&store, train, 0);
        let xi = f.input(x);
        let h = encode(&mut f, config, xi).unwrap();
        f.value(h).clone()
    }

    #[test]
    fn full_preset_counts() {
        let c = EncoderConfig::full();
        assert_eq!(c.main_path_convs(), 17);
        assert_eq!(c.shortcut_convs(), 3);
        assert_eq!(c.output_dim, 512);
        assert!(!c.has_head());
    }

    #[test]
    fn full_preset_accepts_deap_windows() {
        let out = run(&EncoderConfig::full(), [2, 1, 32, 128], false);
        assert_eq!(out.shape(), &[2, 512]);
        assert!(out.all_finite());
    }

    #[test]
    fn tiny_preset_output_dim() {
        let out = run(&EncoderConfig::tiny(), [3, 1, 4, 16], true);
        assert_eq!(out.shape(), &[3, 64]);
    }

    #[test]
    fn parameter_count_depends_only_on_config() {
        let a = build_encoder::<f32>(&EncoderConfig::tiny(), &mut SeededRng::new(1)).unwrap();
        let b = build_encoder::<f32>(&EncoderConfig::tiny(), &mut SeededRng::new(2)).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a, b);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let c = EncoderConfig::tiny();
        assert_eq!(run(&c, [2, 1, 4, 16], false), run(&c, [2, 1, 4, 16], false));
    }

    #[test]
    fn wrong_input_layout_is_a_contract_error() {
        let store = build_encoder::<f32>(&EncoderConfig::tiny(), &mut SeededRng::new(0)).unwrap();
        let mut f = Forward::new(&store, false, 0);
        let x = f.input(Tensor::zeros(&[2, 4, 16]));
        assert!(matches!(encode(&mut f, &EncoderConfig::tiny(), x), Err(Error::Contract(_))));
    }

    #[test]
    fn even_kernels_rejected() {
        let mut c = EncoderConfig::tiny();
        c.blocks[0].kernel = 4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(EncoderConfig::preset("resnet50").is_err());
    }
}
