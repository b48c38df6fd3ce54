//! Composite network blocks: conv/norm/activation layers, residual-dense
//! blocks, sequential channel+spatial attention, and squeeze-and-excitation.
//!
//! Each layer registers its tensors in a [`ParamStore`] under a hierarchical
//! slash-delimited prefix at construction time and keeps shared handles, so
//! checkpoint loads that rewrite store tensors are visible to the layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamError, ParamStore};
use crate::tensor::ops::{self, PoolKind};
use crate::tensor::{Ctx, Elem, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum BlockError {
    #[error("block config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Geometry of one residual-dense block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Conv units inside the dense wiring.
    pub dense_units: usize,
    /// Channels added by each dense unit.
    pub growth: usize,
    /// Channel-attention MLP reduction.
    pub attn_ratio: usize,
    pub se_ratio: usize,
    pub spatial_kernel: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<(), BlockError> {
        let fields = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("dense_units", self.dense_units),
            ("growth", self.growth),
            ("attn_ratio", self.attn_ratio),
            ("se_ratio", self.se_ratio),
            ("spatial_kernel", self.spatial_kernel),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(BlockError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.out_channels % self.attn_ratio != 0 {
            return Err(BlockError::Config(format!(
                "out_channels {} not divisible by attn_ratio {}",
                self.out_channels, self.attn_ratio
            )));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(BlockError::Config(format!(
                "spatial_kernel must be odd, got {}",
                self.spatial_kernel
            )));
        }
        Ok(())
    }
}

fn uniform_tensor<T: Elem>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let vals: Vec<T> = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, vals).unwrap()
}

// ---------------------------------------------------------------------------
// leaf layers
// ---------------------------------------------------------------------------

pub struct Conv2d<T: Elem> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    stride: usize,
    padding: usize,
}

impl<T: Elem> Conv2d<T> {
    pub fn new(
        ps: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, BlockError> {
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = uniform_tensor(rng, &[cout, cin, kernel, kernel], fan_in.sqrt().recip());
        let bias = Tensor::zeros(&[cout]);
        ps.register(&format!("{prefix}/weight"), weight.clone(), true)?;
        ps.register(&format!("{prefix}/bias"), bias.clone(), true)?;
        Ok(Conv2d { weight, bias, stride, padding: (kernel - 1) / 2 })
    }

    pub fn forward(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>, BlockError> {
        Ok(ops::conv2d(ctx, x, &self.weight, &self.bias, self.stride, self.padding)?)
    }
}

pub struct BatchNorm2d<T: Elem> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    momentum: f64,
    eps: f64,
}

impl<T: Elem> BatchNorm2d<T> {
    pub fn new(ps: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self, BlockError> {
        let gamma = Tensor::full(&[channels], T::one());
        let beta = Tensor::zeros(&[channels]);
        let running_mean = Tensor::zeros(&[channels]);
        let running_var = Tensor::full(&[channels], T::one());
        ps.register(&format!("{prefix}/gamma"), gamma.clone(), true)?;
        ps.register(&format!("{prefix}/beta"), beta.clone(), true)?;
        ps.register(&format!("{prefix}/running_mean"), running_mean.clone(), false)?;
        ps.register(&format!("{prefix}/running_var"), running_var.clone(), false)?;
        Ok(BatchNorm2d { gamma, beta, running_mean, running_var, momentum: 0.1, eps: 1e-5 })
    }

    pub fn forward(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>, BlockError> {
        Ok(ops::batchnorm2d(
            ctx,
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.momentum,
            self.eps,
        )?)
    }
}

pub struct PRelu<T: Elem> {
    pub slope: Tensor<T>,
}

impl<T: Elem> PRelu<T> {
    pub fn new(ps: &mut ParamStore<T>, prefix: &str) -> Result<Self, BlockError> {
        let slope = Tensor::from_vec(&[1], vec![T::from_f64(0.25)]).unwrap();
        ps.register(&format!("{prefix}/slope"), slope.clone(), true)?;
        Ok(PRelu { slope })
    }

    pub fn forward(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>, BlockError> {
        Ok(ops::prelu(ctx, x, &self.slope)?)
    }
}

/// conv -> batchnorm -> PReLU, the unit used throughout the proposed model.
pub struct ConvBnPrelu<T: Elem> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    act: PRelu<T>,
}

impl<T: Elem> ConvBnPrelu<T> {
    pub fn new(
        ps: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, BlockError> {
        Ok(ConvBnPrelu {
            conv: Conv2d::new(ps, &format!("{prefix}/conv"), cin, cout, kernel, 1, rng)?,
            bn: BatchNorm2d::new(ps, &format!("{prefix}/bn"), cout)?,
            act: PRelu::new(ps, &format!("{prefix}/prelu"))?,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>, BlockError> {
        self.act.forward(ctx, &self.bn.forward(ctx, &self.conv.forward(ctx, x)?)?)
    }
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

/// Channel gate: sigmoid(MLP(avg_pool) + MLP(max_pool)) with a shared
/// C -> C/ratio -> C bottleneck MLP.
pub struct ChannelAttention<T: Elem> {
    w1: Tensor<T>,
    b1: Tensor<T>,
    act: PRelu<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
    channels: usize,
    /// When set, the gate is all-ones (structural ablation).
    pub bypass: bool,
}

impl<T: Elem> ChannelAttention<T> {
    pub fn new(
        ps: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, BlockError> {
        if channels % ratio != 0 {
            return Err(BlockError::Config(format!(
                "channel attention: {channels} channels not divisible by ratio {ratio}"
            )));
        }
        let hidden = channels / ratio;
        let w1 = uniform_tensor(rng, &[hidden, channels], (channels as f64).sqrt().recip());
        let b1 = Tensor::zeros(&[hidden]);
        let w2 = uniform_tensor(rng, &[channels, hidden], (hidden as f64).sqrt().recip());
        let b2 = Tensor::zeros(&[channels]);
        ps.register(&format!("{prefix}/mlp0/weight"), w1.clone(), true)?;
        ps.register(&format!("{prefix}/mlp0/bias"), b1.clone(), true)?;
        let act = PRelu::new(ps, &format!("{prefix}/mlp_prelu"))?;
        ps.register(&format!("{prefix}/mlp1/weight"), w2.clone(), true)?;
        ps.register(&format!("{prefix}/mlp1/bias"), b2.clone(), true)?;
        Ok(ChannelAttention { w1, b1, act, w2, b2, channels, bypass: false })
    }

    fn mlp(&self, ctx: &Ctx<'_, T>, pooled: &Tensor<T>) -> Result<Tensor<T>, BlockError> {
        let n = pooled.shape()[0];
        let flat = ops::reshape(ctx, pooled, &[n, self.channels])?;
        let h = ops::linear(ctx, &flat, &self.w1, &self.b1)?;
        let h = self.act.forward(ctx, &h)?;
        Ok(ops::linear(ctx, &h, &self.w2, &self.b2)?)
    }

    /// Gate tensor of shape N,C,1,1 with entries in (0,1).
    pub fn scale(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>, BlockError> {
        let n = x.shape()[0];
        if self.bypass {
            return Ok(Tensor::full(&[n, self.channels, 1, 1], T::one()));
        }
        let avg = self.mlp(ctx, &ops::global_pool(ctx, x, PoolKind::Avg)?)?;
        let max = self.mlp(ctx, &ops::global_pool(ctx, x, PoolKind::Max)?)?;
        let sum = ops::add(ctx, &avg, &max)?;
        let gate = ops::sigmoid(ctx, &sum);
        Ok(ops::reshape(ctx, &gate, &[n, self.channels, 1, 1])?)
    }
}

/// Spatial gate: sigmoid(conv_kxk(concat(channel_avg, channel_max))).
pub struct SpatialAttention<T: Elem> {
    conv: Conv2d<T>,
    pub bypass: bool,
}

impl<T: Elem> SpatialAttention<T> {
    pub fn new(
        ps: &mut ParamStore<T>,
        prefix: &str,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, BlockError> {
        if kernel % 2 == 0 {
            return Err(BlockError::Config(format!(
                "spatial attention kernel must be odd, got {kernel}"
            )));
        }
        let conv = Conv2d::new(ps, &format!("{prefix}/conv"), 2, 1, kernel, 1, rng)?;
        Ok(SpatialAttention { conv, bypass: false })
    }

    /// Gate tensor of shape N,1,H,W with entries in (0,1).
    pub fn scale(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>, BlockError> {
        let s = x.shape();
        if self.bypass {
            return Ok(Tensor::full(&[s[0], 1, s[2], s[3]], T::one()));
        }
        let avg = ops::channel_reduce(ctx, x, PoolKind::Avg)?;
        let max = ops::channel_reduce(ctx, x, PoolKind::Max)?;
        let desc = ops::concat_channels(ctx, &avg, &max)?;
        Ok(ops::sigmoid(ctx, &self.conv.forward(ctx, &desc)?))
    }
}

/// Sequential channel-then-spatial attention. The spatial gate reads the
/// channel-refined feature; the ordering is pinned by a regression test.
pub struct Cbam<T: Elem> {
    pub channel: ChannelAttention<T>,
    pub spatial: SpatialAttention<T>,
}

impl<T: Elem> Cbam<T> {
    pub fn new(
        ps: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        attn_ratio: usize,
        spatial_kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, BlockError> {
        Ok(Cbam {
            channel: ChannelAttention::new(ps, &format!("{prefix}/channel"), channels, attn_ratio, rng)?,
            spatial: SpatialAttention::new(ps, &format!("{prefix}/spatial"), spatial_kernel, rng)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>, BlockError> {
        let cs = self.channel.scale(ctx, x)?;
        let x = ops::mul_broadcast(ctx, x, &cs)?;
        let ss = self.spatial.scale(ctx, &x)?;
        Ok(ops::mul_broadcast(ctx, &x, &ss)?)
    }

    pub fn set_bypass(&mut self, v: bool) {
        self.channel.bypass = v;
        self.spatial.bypass = v;
    }
}

/// Squeeze-and-excitation: channel gating from a two-layer MLP over the
/// global average descriptor.
pub struct SeBlock<T: Elem> {
    w1: Tensor<T>,
    b1: Tensor<T>,
    act: PRelu<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
    channels: usize,
    pub bypass: bool,
}

impl<T: Elem> SeBlock<T> {
    pub fn new(
        ps: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, BlockError> {
        if channels % ratio != 0 {
            return Err(BlockError::Config(format!(
                "se block: {channels} channels not divisible by ratio {ratio}"
            )));
        }
        let hidden = channels / ratio;
        let w1 = uniform_tensor(rng, &[hidden, channels], (channels as f64).sqrt().recip());
        let b1 = Tensor::zeros(&[hidden]);
        let w2 = uniform_tensor(rng, &[channels, hidden], (hidden as f64).sqrt().recip());
        let b2 = Tensor::zeros(&[channels]);
        ps.register(&format!("{prefix}/fc0/weight"), w1.clone(), true)?;
        ps.register(&format!("{prefix}/fc0/bias"), b1.clone(), true)?;
        let act = PRelu::new(ps, &format!("{prefix}/fc_prelu"))?;
        ps.register(&format!("{prefix}/fc1/weight"), w2.clone(), true)?;
        ps.register(&format!("{prefix}/fc1/bias"), b2.clone(), true)?;
        Ok(SeBlock { w1, b1, act, w2, b2, channels, bypass: false })
    }

    pub fn forward(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>, BlockError> {
        if self.bypass {
            return Ok(x.clone());
        }
        let n = x.shape()[0];
        let squeeze = ops::global_pool(ctx, x, PoolKind::Avg)?;
        let flat = ops::reshape(ctx, &squeeze, &[n, self.channels])?;
        let h = ops::linear(ctx, &flat, &self.w1, &self.b1)?;
        let h = self.act.forward(ctx, &h)?;
        let h = ops::linear(ctx, &h, &self.w2, &self.b2)?;
        let gate = ops::sigmoid(ctx, &h);
        let gate = ops::reshape(ctx, &gate, &[n, self.channels, 1, 1])?;
        Ok(ops::mul_broadcast(ctx, x, &gate)?)
    }
}

// ---------------------------------------------------------------------------
// residual-dense block
// ---------------------------------------------------------------------------

enum Shortcut<T: Elem> {
    Identity,
    Project { conv: Conv2d<T>, bn: BatchNorm2d<T> },
}

/// Residual block with dense inner wiring and CBAM attention on the branch.
///
/// Unit i consumes the concatenation of the block input and all previous unit
/// outputs; a 1x1 fusion conv maps the final concatenation to `out_channels`;
/// attention gates the fused branch; the shortcut joins last.
pub struct ResidualDenseBlock<T: Elem> {
    units: Vec<ConvBnPrelu<T>>,
    fuse: Conv2d<T>,
    attn: Cbam<T>,
    shortcut: Shortcut<T>,
}

impl<T: Elem> ResidualDenseBlock<T> {
    pub fn new(
        ps: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BlockConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, BlockError> {
        cfg.validate()?;
        let mut units = Vec::with_capacity(cfg.dense_units);
        for i in 0..cfg.dense_units {
            let cin = cfg.in_channels + i * cfg.growth;
            units.push(ConvBnPrelu::new(ps, &format!("{prefix}/unit{i}"), cin, cfg.growth, 3, rng)?);
        }
        let fuse_in = cfg.in_channels + cfg.dense_units * cfg.growth;
        let fuse = Conv2d::new(ps, &format!("{prefix}/fuse"), fuse_in, cfg.out_channels, 1, 1, rng)?;
        let attn =
            Cbam::new(ps, &format!("{prefix}/attn"), cfg.out_channels, cfg.attn_ratio, cfg.spatial_kernel, rng)?;
        let shortcut = if cfg.in_channels == cfg.out_channels {
            Shortcut::Identity
        } else {
            Shortcut::Project {
                conv: Conv2d::new(ps, &format!("{prefix}/shortcut/conv"), cfg.in_channels, cfg.out_channels, 1, 1, rng)?,
                bn: BatchNorm2d::new(ps, &format!("{prefix}/shortcut/bn"), cfg.out_channels)?,
            }
        };
        Ok(ResidualDenseBlock { units, fuse, attn, shortcut })
    }

    pub fn forward(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>, BlockError> {
        let mut cat = x.clone();
        for unit in &self.units {
            let y = unit.forward(ctx, &cat)?;
            cat = ops::concat_channels(ctx, &cat, &y)?;
        }
        let branch = self.fuse.forward(ctx, &cat)?;
        let branch = self.attn.forward(ctx, &branch)?;
        let shortcut = match &self.shortcut {
            Shortcut::Identity => x.clone(),
            Shortcut::Project { conv, bn } => bn.forward(ctx, &conv.forward(ctx, x)?)?,
        };
        Ok(ops::add(ctx, &branch, &shortcut)?)
    }

    pub fn attn_mut(&mut self) -> &mut Cbam<T> {
        &mut self.attn
    }
}

// ---------------------------------------------------------------------------
// bottleneck
// ---------------------------------------------------------------------------

/// Three residual-dense blocks with dense wiring across blocks (block j reads
/// the concatenation of the bottleneck input and all previous block outputs),
/// fused by a 1x1 conv back to `width`, then squeeze-and-excitation.
pub struct Bottleneck<T: Elem> {
    blocks: Vec<ResidualDenseBlock<T>>,
    fuse: Conv2d<T>,
    se: SeBlock<T>,
}

pub const BOTTLENECK_BLOCKS: usize = 3;

impl<T: Elem> Bottleneck<T> {
    pub fn new(
        ps: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        dense_units: usize,
        attn_ratio: usize,
        se_ratio: usize,
        spatial_kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, BlockError> {
        let mut blocks = Vec::with_capacity(BOTTLENECK_BLOCKS);
        for j in 0..BOTTLENECK_BLOCKS {
            let cfg = BlockConfig {
                in_channels: width * (j + 1),
                out_channels: width,
                dense_units,
                growth: width,
                attn_ratio,
                se_ratio,
                spatial_kernel,
            };
            blocks.push(ResidualDenseBlock::new(ps, &format!("{prefix}/rdb{j}"), &cfg, rng)?);
        }
        let fuse_in = width * (BOTTLENECK_BLOCKS + 1);
        let fuse = Conv2d::new(ps, &format!("{prefix}/fuse"), fuse_in, width, 1, 1, rng)?;
        let se = SeBlock::new(ps, &format!("{prefix}/se"), width, se_ratio, rng)?;
        Ok(Bottleneck { blocks, fuse, se })
    }

    pub fn forward(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>, BlockError> {
        let mut cat = x.clone();
        for block in &self.blocks {
            let y = block.forward(ctx, &cat)?;
            cat = ops::concat_channels(ctx, &cat, &y)?;
        }
        let fused = self.fuse.forward(ctx, &cat)?;
        self.se.forward(ctx, &fused)
    }
}

// ---------------------------------------------------------------------------
// baseline double conv
// ---------------------------------------------------------------------------

/// Plain U-Net stage: (conv3x3 -> BN -> ReLU) twice. No learnable activation.
pub struct DoubleConv<T: Elem> {
    conv0: Conv2d<T>,
    bn0: BatchNorm2d<T>,
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
}

impl<T: Elem> DoubleConv<T> {
    pub fn new(
        ps: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, BlockError> {
        Ok(DoubleConv {
            conv0: Conv2d::new(ps, &format!("{prefix}/conv0"), cin, cout, 3, 1, rng)?,
            bn0: BatchNorm2d::new(ps, &format!("{prefix}/bn0"), cout)?,
            conv1: Conv2d::new(ps, &format!("{prefix}/conv1"), cout, cout, 3, 1, rng)?,
            bn1: BatchNorm2d::new(ps, &format!("{prefix}/bn1"), cout)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>, BlockError> {
        let x = ops::relu(ctx, &self.bn0.forward(ctx, &self.conv0.forward(ctx, x)?)?);
        Ok(ops::relu(ctx, &self.bn1.forward(ctx, &self.conv1.forward(ctx, &x)?)?))
    }
}
