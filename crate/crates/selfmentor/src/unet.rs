//! The shared encoder-decoder network used by the trainee, referee and
//! reverse nets.
//!
//! The encoder stacks `depth` blocks of same-padded 3x3 convolutions (relu
//! after each), with 4x4 max pooling between blocks and channel width
//! doubling per block. A bottleneck block sits at the deepest resolution.
//! The decoder mirrors the encoder: 4x nearest upsampling, concatenation with
//! the same-resolution encoder output, then a conv block halving the width.
//! A 1x1 convolution plus sigmoid produces the output map in (0,1).

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    concat_channels, conv2d_same, maxpool4, no_grad, relu, sigmoid, Parameter, Tensor,
};
use crate::error::{Error, Result};
use crate::img::Image;

pub const POOL_SIZE: usize = 4;
pub const KERNEL_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    /// Number of encoder (and decoder) sub-modules, `M`.
    pub depth: usize,
    /// Filters in the first encoder block, `F`; doubled per block.
    pub base_filters: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Convolutions per block; two in the reference architecture.
    pub convs_per_block: usize,
}

impl UNetConfig {
    pub fn new(depth: usize, base_filters: usize, in_channels: usize, out_channels: usize) -> Self {
        UNetConfig {
            depth,
            base_filters,
            in_channels,
            out_channels,
            convs_per_block: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1
            || self.base_filters < 1
            || self.in_channels < 1
            || self.out_channels < 1
            || self.convs_per_block < 1
        {
            return Err(Error::Contract(format!(
                "invalid U-net config: {self:?} (all fields must be >= 1)"
            )));
        }
        Ok(())
    }

    /// Input height and width must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        POOL_SIZE.pow(self.depth as u32)
    }

    /// Filters of encoder block `i` (0-based): `F * 2^i`.
    pub fn encoder_filters(&self, block: usize) -> usize {
        self.base_filters << block
    }

    /// Channel widths of every convolution, in construction order, as
    /// `(in, out, kernel)` triples. Also the closed form behind
    /// [`UNetConfig::param_count`].
    fn layer_dims(&self) -> Vec<(usize, usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.in_channels;
        for block in 0..self.depth {
            let filters = self.encoder_filters(block);
            for c in 0..self.convs_per_block {
                dims.push((if c == 0 { prev } else { filters }, filters, KERNEL_SIZE));
            }
            prev = filters;
        }
        let bottleneck = self.base_filters << self.depth;
        for c in 0..self.convs_per_block {
            dims.push((if c == 0 { prev } else { bottleneck }, bottleneck, KERNEL_SIZE));
        }
        prev = bottleneck;
        for block in (0..self.depth).rev() {
            let filters = self.encoder_filters(block);
            let concat = prev + filters;
            for c in 0..self.convs_per_block {
                dims.push((if c == 0 { concat } else { filters }, filters, KERNEL_SIZE));
            }
            prev = filters;
        }
        dims.push((prev, self.out_channels, 1));
        dims
    }

    /// Total number of trainable scalars (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(ci, co, k)| co * ci * k * k + co)
            .sum()
    }
}

struct ConvLayer {
    weights: Parameter,
    bias: Parameter,
}

impl ConvLayer {
    fn init(
        in_channels: usize,
        out_channels: usize,
        ksize: usize,
        rng: &mut ChaCha8Rng,
        glorot: bool,
    ) -> ConvLayer {
        let fan_in = (in_channels * ksize * ksize) as f32;
        let limit = if glorot {
            let fan_out = (out_channels * ksize * ksize) as f32;
            (6.0 / (fan_in + fan_out)).sqrt()
        } else {
            (6.0 / fan_in).sqrt()
        };
        let n = out_channels * in_channels * ksize * ksize;
        let wdata: Vec<f32> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        let weights = Parameter::new(Tensor::with_grad(
            &[out_channels, in_channels, ksize, ksize],
            wdata,
        ));
        let bias = Parameter::new(Tensor::with_grad(&[out_channels], vec![0.0; out_channels]));
        ConvLayer { weights, bias }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_same(x, &self.weights.value, &self.bias.value)
    }
}

pub struct UNet {
    config: UNetConfig,
    encoder: Vec<Vec<ConvLayer>>,
    bottleneck: Vec<ConvLayer>,
    /// Deepest level first.
    decoder: Vec<Vec<ConvLayer>>,
    head: ConvLayer,
}

impl UNet {
    /// Builds a network with deterministic initialization from `seed`:
    /// He-uniform for the relu convolutions, Glorot-uniform for the sigmoid
    /// head, zero biases.
    pub fn build(config: UNetConfig, seed: u64) -> Result<UNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = config.in_channels;
        let mut encoder = Vec::with_capacity(config.depth);
        for block in 0..config.depth {
            let filters = config.encoder_filters(block);
            let mut convs = Vec::with_capacity(config.convs_per_block);
            for c in 0..config.convs_per_block {
                let cin = if c == 0 { prev } else { filters };
                convs.push(ConvLayer::init(cin, filters, KERNEL_SIZE, &mut rng, false));
            }
            encoder.push(convs);
            prev = filters;
        }
        let bneck_filters = config.base_filters << config.depth;
        let mut bottleneck = Vec::with_capacity(config.convs_per_block);
        for c in 0..config.convs_per_block {
            let cin = if c == 0 { prev } else { bneck_filters };
            bottleneck.push(ConvLayer::init(cin, bneck_filters, KERNEL_SIZE, &mut rng, false));
        }
        prev = bneck_filters;
        let mut decoder = Vec::with_capacity(config.depth);
        for block in (0..config.depth).rev() {
            let filters = config.encoder_filters(block);
            let concat = prev + filters;
            let mut convs = Vec::with_capacity(config.convs_per_block);
            for c in 0..config.convs_per_block {
                let cin = if c == 0 { concat } else { filters };
                convs.push(ConvLayer::init(cin, filters, KERNEL_SIZE, &mut rng, false));
            }
            decoder.push(convs);
            prev = filters;
        }
        let head = ConvLayer::init(prev, config.out_channels, 1, &mut rng, true);
        Ok(UNet {
            config,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_impl(x, false)
    }

    pub(crate) fn forward_impl(&self, x: &Tensor, zero_skips: bool) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "U-net input must be NxCxHxW, got {shape:?}"
            )));
        }
        if shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "U-net expects {} input channels, got {}",
                self.config.in_channels, shape[1]
            )));
        }
        let div = self.config.spatial_divisor();
        if !shape[2].is_multiple_of(div) || !shape[3].is_multiple_of(div) {
            return Err(Error::Shape(format!(
                "U-net input {}x{} must be divisible by {div} (pool {POOL_SIZE}, depth {})",
                shape[2], shape[3], self.config.depth
            )));
        }

        let mut cur = x.clone();
        let mut skips = Vec::with_capacity(self.config.depth);
        for block in &self.encoder {
            cur = run_block(block, &cur)?;
            skips.push(cur.clone());
            cur = maxpool4(&cur)?;
        }
        cur = run_block(&self.bottleneck, &cur)?;
        for (block, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = crate::autodiff::upsample_nearest4(&cur)?;
            let skip_t = if zero_skips {
                Tensor::zeros(skip.shape())
            } else {
                skip.clone()
            };
            cur = concat_channels(&up, &skip_t)?;
            cur = run_block(block, &cur)?;
        }
        let logits = self.head.apply(&cur)?;
        Ok(sigmoid(&logits))
    }

    /// Forward pass on a single image without recording gradients.
    pub fn predict(&self, x: &Image) -> Result<Image> {
        no_grad(|| {
            let out = self.forward(&x.to_tensor())?;
            Image::from_tensor(&out)
        })
    }

    fn layers(&self) -> impl Iterator<Item = (String, &ConvLayer)> {
        let enc = self.encoder.iter().enumerate().flat_map(|(b, block)| {
            block
                .iter()
                .enumerate()
                .map(move |(c, l)| (format!("enc{b}.conv{c}"), l))
        });
        let bneck = self
            .bottleneck
            .iter()
            .enumerate()
            .map(|(c, l)| (format!("bottleneck.conv{c}"), l));
        let dec = self.decoder.iter().enumerate().flat_map(|(b, block)| {
            block
                .iter()
                .enumerate()
                .map(move |(c, l)| (format!("dec{b}.conv{c}"), l))
        });
        let head = std::iter::once(("head".to_string(), &self.head));
        enc.chain(bneck).chain(dec).chain(head)
    }

    /// All trainable parameters in deterministic construction order.
    pub fn params(&self) -> Vec<Parameter> {
        self.layers()
            .flat_map(|(_, l)| [l.weights.clone(), l.bias.clone()])
            .collect()
    }

    /// Parameters with their checkpoint block names, in deterministic order.
    pub fn named_params(&self) -> Vec<(String, Parameter)> {
        self.layers()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), l.weights.clone()),
                    (format!("{name}.bias"), l.bias.clone()),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Enables or disables gradient accumulation for every parameter.
    /// Freezing a net keeps gradients flowing through it to upstream tensors.
    pub fn set_trainable(&self, trainable: bool) {
        for p in self.params() {
            p.value.set_tracked(trainable);
        }
    }

    pub fn clear_grads(&self) {
        for p in self.params() {
            p.value.clear_grad();
        }
    }

    /// Copies of all parameter values, for in-memory snapshots.
    pub fn snapshot(&self) -> Vec<Vec<f32>> {
        self.params().iter().map(|p| p.value.data().clone()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f32>]) {
        let params = self.params();
        assert_eq!(params.len(), snapshot.len(), "snapshot layout mismatch");
        for (p, s) in params.iter().zip(snapshot) {
            assert_eq!(p.len(), s.len(), "snapshot tensor size mismatch");
            p.value.data_mut().copy_from_slice(s);
        }
    }
}

fn run_block(block: &[ConvLayer], x: &Tensor) -> Result<Tensor> {
    let mut cur = x.clone();
    for layer in block {
        cur = relu(&layer.apply(&cur)?);
    }
    Ok(cur)
}
