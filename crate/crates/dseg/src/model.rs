//! The attention residual U-Net and the plain U-Net baseline, assembled from
//! blocks with a shared forward interface.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    BlockConfig, BlockError, Bottleneck, Cbam, Conv2d, ConvBnPrelu, DoubleConv, ResidualDenseBlock,
};
use crate::params::ParamStore;
use crate::tensor::{ops, Ctx, Elem, Tensor, TensorError};

pub const STAGES: usize = 5;
/// Four pools between the five encoder stages: inputs must divide by 16.
pub const DOWNSAMPLE_FACTOR: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model spec error: {0}")]
    Spec(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Proposed,
    Unet,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::Proposed => "proposed",
            Arch::Unet => "unet",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "proposed" => Ok(Arch::Proposed),
            "unet" => Ok(Arch::Unet),
            other => Err(ModelError::Spec(format!("unknown arch {other:?}"))),
        }
    }
}

/// Declarative architecture description; both models are built from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub in_channels: usize,
    pub base_width: usize,
    pub stage_widths: [usize; STAGES],
    pub dense_units: usize,
    pub attn_ratio: usize,
    pub se_ratio: usize,
    pub spatial_kernel: usize,
    pub out_channels: usize,
}

impl ModelSpec {
    /// Defaults with stage widths doubling from `base_width`.
    pub fn with_base_width(arch: Arch, base_width: usize) -> Self {
        ModelSpec {
            arch,
            in_channels: 1,
            base_width,
            stage_widths: [
                base_width,
                base_width * 2,
                base_width * 4,
                base_width * 8,
                base_width * 16,
            ],
            dense_units: 2,
            attn_ratio: 8.min(base_width),
            se_ratio: 16.min(base_width),
            spatial_kernel: 7,
            out_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels != 1 || self.out_channels != 1 {
            return Err(ModelError::Spec(
                "single-channel input and output required".into(),
            ));
        }
        for w in self.stage_widths {
            if w == 0 {
                return Err(ModelError::Spec("stage widths must be >= 1".into()));
            }
        }
        if self.dense_units == 0 {
            return Err(ModelError::Spec("dense_units must be >= 1".into()));
        }
        Ok(())
    }

    fn block_config(&self, cin: usize, cout: usize) -> BlockConfig {
        BlockConfig {
            in_channels: cin,
            out_channels: cout,
            dense_units: self.dense_units,
            growth: cout,
            attn_ratio: self.attn_ratio,
            se_ratio: self.se_ratio,
            spatial_kernel: self.spatial_kernel,
        }
    }
}

struct ProposedNet<T: Elem> {
    stem: ConvBnPrelu<T>,
    encoder: Vec<ResidualDenseBlock<T>>,
    bottleneck: Bottleneck<T>,
    decoder: Vec<(ResidualDenseBlock<T>, Cbam<T>)>,
    head: Conv2d<T>,
}

struct UnetNet<T: Elem> {
    encoder: Vec<DoubleConv<T>>,
    decoder: Vec<DoubleConv<T>>,
    head: Conv2d<T>,
}

enum Net<T: Elem> {
    Proposed(ProposedNet<T>),
    Unet(UnetNet<T>),
}

/// A built network: spec, parameter registry, and the layer graph.
pub struct Model<T: Elem> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
    net: Net<T>,
}

/// Build the model named by `spec.arch` with seeded initialization.
pub fn build_model<T: Elem>(spec: &ModelSpec, seed: u64) -> Result<Model<T>, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let net = match spec.arch {
        Arch::Proposed => Net::Proposed(build_proposed_net(spec, &mut ps, &mut rng)?),
        Arch::Unet => Net::Unet(build_unet_net(spec, &mut ps, &mut rng)?),
    };
    Ok(Model { spec: spec.clone(), params: ps, net })
}

/// The attention residual U-Net: 5x5 stem, five attention residual-dense
/// encoder stages with max-pool downsampling, a 3-block SE bottleneck, and a
/// bilinear-upsampling decoder where every stage ends in attention.
pub fn build_proposed<T: Elem>(spec: &ModelSpec, seed: u64) -> Result<Model<T>, ModelError> {
    let mut spec = spec.clone();
    spec.arch = Arch::Proposed;
    build_model(&spec, seed)
}

/// The plain U-Net baseline: double-conv stages, max pool, bilinear upsample
/// with skip concatenation, no attention or dense wiring.
pub fn build_unet<T: Elem>(spec: &ModelSpec, seed: u64) -> Result<Model<T>, ModelError> {
    let mut spec = spec.clone();
    spec.arch = Arch::Unet;
    build_model(&spec, seed)
}

fn build_proposed_net<T: Elem>(
    spec: &ModelSpec,
    ps: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
) -> Result<ProposedNet<T>, ModelError> {
    let w = spec.stage_widths;
    let stem = ConvBnPrelu::new(ps, "stem", spec.in_channels, w[0], 5, rng)?;
    let mut encoder = Vec::with_capacity(STAGES);
    for i in 0..STAGES {
        let cin = if i == 0 { w[0] } else { w[i - 1] };
        let cfg = spec.block_config(cin, w[i]);
        encoder.push(ResidualDenseBlock::new(ps, &format!("enc{}", i + 1), &cfg, rng)?);
    }
    let bottleneck = Bottleneck::new(
        ps,
        "bottleneck",
        w[STAGES - 1],
        spec.dense_units,
        spec.attn_ratio,
        spec.se_ratio,
        spec.spatial_kernel,
        rng,
    )?;
    let mut decoder = Vec::with_capacity(STAGES - 1);
    for j in 0..STAGES - 1 {
        // dec j upsamples from width w[4-j] and fuses the skip of width w[3-j].
        let up_in = w[STAGES - 1 - j];
        let skip = w[STAGES - 2 - j];
        let cfg = spec.block_config(up_in + skip, skip);
        let rdb = ResidualDenseBlock::new(ps, &format!("dec{}/block", j + 1), &cfg, rng)?;
        let attn = Cbam::new(
            ps,
            &format!("dec{}/attn", j + 1),
            skip,
            spec.attn_ratio,
            spec.spatial_kernel,
            rng,
        )?;
        decoder.push((rdb, attn));
    }
    let head = Conv2d::new(ps, "head/conv", w[0], spec.out_channels, 1, 1, rng)?;
    Ok(ProposedNet { stem, encoder, bottleneck, decoder, head })
}

fn build_unet_net<T: Elem>(
    spec: &ModelSpec,
    ps: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
) -> Result<UnetNet<T>, ModelError> {
    let w = spec.stage_widths;
    let mut encoder = Vec::with_capacity(STAGES);
    for i in 0..STAGES {
        let cin = if i == 0 { spec.in_channels } else { w[i - 1] };
        encoder.push(DoubleConv::new(ps, &format!("enc{}", i + 1), cin, w[i], rng)?);
    }
    let mut decoder = Vec::with_capacity(STAGES - 1);
    for j in 0..STAGES - 1 {
        let up_in = w[STAGES - 1 - j];
        let skip = w[STAGES - 2 - j];
        decoder.push(DoubleConv::new(ps, &format!("dec{}/block", j + 1), up_in + skip, skip, rng)?);
    }
    let head = Conv2d::new(ps, "head/conv", w[0], spec.out_channels, 1, 1, rng)?;
    Ok(UnetNet { encoder, decoder, head })
}

impl<T: Elem> Model<T> {
    fn check_geometry(&self, x: &Tensor<T>) -> Result<(usize, usize), ModelError> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(ModelError::Geometry(format!(
                "input must be N,{},H,W, got {s:?}",
                self.spec.in_channels
            )));
        }
        let (h, w) = (s[2], s[3]);
        if h % DOWNSAMPLE_FACTOR != 0 || w % DOWNSAMPLE_FACTOR != 0 {
            // Name the deepest stage whose pool would see an odd extent.
            let mut stage = 2;
            let (mut hh, mut ww) = (h, w);
            while hh % 2 == 0 && ww % 2 == 0 {
                hh /= 2;
                ww /= 2;
                stage += 1;
            }
            return Err(ModelError::Geometry(format!(
                "input {h}x{w} is not divisible by {DOWNSAMPLE_FACTOR}; the pool before encoder stage {stage} would see an odd extent"
            )));
        }
        Ok((h, w))
    }

    /// Probability map of the same spatial size as the input.
    pub fn forward(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_geometry(x)?;
        match &self.net {
            Net::Proposed(net) => {
                let mut cur = net.stem.forward(ctx, x)?;
                let mut skips = Vec::with_capacity(STAGES);
                for (i, stage) in net.encoder.iter().enumerate() {
                    if i > 0 {
                        cur = ops::maxpool2d(ctx, &cur)?;
                    }
                    cur = stage.forward(ctx, &cur)?;
                    skips.push(cur.clone());
                }
                cur = net.bottleneck.forward(ctx, &cur)?;
                for (j, (rdb, attn)) in net.decoder.iter().enumerate() {
                    let up = ops::bilinear_upsample2x(ctx, &cur)?;
                    let skip = &skips[STAGES - 2 - j];
                    let cat = ops::concat_channels(ctx, &up, skip)?;
                    let y = rdb.forward(ctx, &cat)?;
                    cur = attn.forward(ctx, &y)?;
                }
                let logits = net.head.forward(ctx, &cur)?;
                Ok(ops::sigmoid(ctx, &logits))
            }
            Net::Unet(net) => {
                let mut cur = x.clone();
                let mut skips = Vec::with_capacity(STAGES);
                for (i, stage) in net.encoder.iter().enumerate() {
                    if i > 0 {
                        cur = ops::maxpool2d(ctx, &cur)?;
                    }
                    cur = stage.forward(ctx, &cur)?;
                    skips.push(cur.clone());
                }
                for (j, block) in net.decoder.iter().enumerate() {
                    let up = ops::bilinear_upsample2x(ctx, &cur)?;
                    let skip = &skips[STAGES - 2 - j];
                    let cat = ops::concat_channels(ctx, &up, skip)?;
                    cur = block.forward(ctx, &cat)?;
                }
                let logits = net.head.forward(ctx, &cur)?;
                Ok(ops::sigmoid(ctx, &logits))
            }
        }
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Force every attention and SE gate to all-ones (structural ablation).
    pub fn set_attention_bypass(&mut self, v: bool) {
        if let Net::Proposed(net) = &mut self.net {
            for stage in &mut net.encoder {
                stage.attn_mut().set_bypass(v);
            }
            for (rdb, attn) in &mut net.decoder {
                rdb.attn_mut().set_bypass(v);
                attn.set_bypass(v);
            }
        }
    }
}

/// Trainable parameter count of the proposed architecture with the decoder's
/// bilinear upsampling replaced by 2x2 stride-2 transposed convolutions.
/// Built only for the parameter audit; the transposed variant has no forward.
pub fn proposed_transposed_upsample_param_count(spec: &ModelSpec) -> Result<usize, ModelError> {
    let model = build_proposed::<f32>(spec, 0)?;
    let w = spec.stage_widths;
    let mut extra = 0usize;
    for j in 0..STAGES - 1 {
        let c = w[STAGES - 1 - j];
        extra += c * c * 2 * 2 + c; // weight [C,C,2,2] + bias [C]
    }
    Ok(model.param_count() + extra)
}
