//! U-Net shaped segmentation models with conditioning hook points.
//!
//! Every backbone exposes the same two hooks, which is all the conditioning
//! modules need:
//!
//! * the **bottleneck**: the encoder's lowest-resolution feature map, where the
//!   conditioned self-attention block is inserted;
//! * the **decoder stage inputs**: the feature map of each decoder stage right
//!   after the skip connection has been merged, where coordinate planes are
//!   concatenated (the stage's first convolution is widened by three input
//!   channels to accept them). Feature modulation is applied after each decoder
//!   block's last convolution and normalization.
//!
//! Two reference encoders are provided: a plain double-convolution U-Net with
//! concatenation skips and a residual multi-scale (Res2Net-style) network with
//! summation skips.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConSA, ConSAConfig, ConditionContext, ConditionEmbedder, FiLMParams, FilmGenerator};
use crate::data::VolumeDims;
use crate::error::{Error, Result};
use crate::hdsc::{concat_coords, dense_coords};
use crate::nn::{Conv2d, Forward, GroupNorm, ParamStore};
use crate::plane::Plane;
use crate::sampling::{relative_center, CropBox, CropSample, RelCenter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Residual multi-scale blocks.
    CnnRes2,
    /// Two 3x3 convolutions per stage.
    CnnPlain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    Sum,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub encoder_kind: EncoderKind,
    pub stage_channels: Vec<usize>,
    pub skip_mode: SkipMode,
    pub dropout: f64,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channel splits inside a residual multi-scale block.
    pub res2_scales: usize,
    /// Upper bound on GroupNorm groups.
    pub norm_groups: usize,
}

impl BackboneSpec {
    pub fn res2(stage_channels: Vec<usize>) -> Self {
        Self {
            encoder_kind: EncoderKind::CnnRes2,
            stage_channels,
            skip_mode: SkipMode::Sum,
            dropout: 0.1,
            in_channels: 1,
            num_classes: 2,
            res2_scales: 4,
            norm_groups: 8,
        }
    }

    pub fn unet(stage_channels: Vec<usize>) -> Self {
        Self {
            encoder_kind: EncoderKind::CnnPlain,
            skip_mode: SkipMode::Concat,
            ..Self::res2(stage_channels)
        }
    }

    /// Default widths for the residual multi-scale backbone.
    pub fn res2_default() -> Self {
        Self::res2(vec![64, 128, 256, 512, 1024])
    }

    /// Default widths for the plain U-Net backbone.
    pub fn unet_default() -> Self {
        Self::unet(vec![32, 64, 128, 256, 512])
    }

    pub fn depth(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth() < 2 {
            return Err(Error::BadSpec(format!(
                "depth must be at least 2, got {}",
                self.depth()
            )));
        }
        if self.stage_channels.contains(&0) || self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::BadSpec("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::BadSpec(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.encoder_kind == EncoderKind::CnnRes2 {
            if self.res2_scales == 0 {
                return Err(Error::BadSpec("res2_scales must be positive".into()));
            }
            if let Some(c) = self.stage_channels.iter().find(|&&c| c % self.res2_scales != 0) {
                return Err(Error::BadSpec(format!(
                    "stage width {c} not divisible by res2_scales {}",
                    self.res2_scales
                )));
            }
        }
        Ok(())
    }

    /// Input sizes must be divisible by this factor.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdscPlacement {
    None,
    Decoder,
    Encoder,
    #[serde(rename = "encoder+decoder")]
    EncoderDecoder,
}

impl HdscPlacement {
    pub fn encoder(self) -> bool {
        matches!(self, Self::Encoder | Self::EncoderDecoder)
    }

    pub fn decoder(self) -> bool {
        matches!(self, Self::Decoder | Self::EncoderDecoder)
    }
}

impl FromStr for HdscPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "decoder" => Ok(Self::Decoder),
            "encoder" => Ok(Self::Encoder),
            "encoder+decoder" => Ok(Self::EncoderDecoder),
            other => Err(Error::Config(format!("unknown hdsc placement {other}"))),
        }
    }
}

/// Conditioning configurations, including the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ConditioningMode {
    None,
    Film,
    FilmHdsc,
    /// Bottleneck attention with the age token only.
    ConsaAge,
    /// Bottleneck attention with age and location tokens.
    Consa,
    ConsaHdsc,
    /// Coordinates at the configured placement.
    Hdsc,
    HdscDecoder,
    HdscEncoder,
    HdscEncoderDecoder,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 10] = [
        Self::None,
        Self::Film,
        Self::FilmHdsc,
        Self::ConsaAge,
        Self::Consa,
        Self::ConsaHdsc,
        Self::Hdsc,
        Self::HdscDecoder,
        Self::HdscEncoder,
        Self::HdscEncoderDecoder,
    ];

    pub fn family(self) -> ConditioningFamily {
        match self {
            Self::Film | Self::FilmHdsc => ConditioningFamily::Film,
            Self::ConsaAge => ConditioningFamily::Consa { use_location: false },
            Self::Consa | Self::ConsaHdsc => ConditioningFamily::Consa { use_location: true },
            _ => ConditioningFamily::None,
        }
    }

    /// Coordinate placement, resolving the generic `+hdsc` modes to `configured`.
    pub fn hdsc(self, configured: HdscPlacement) -> HdscPlacement {
        match self {
            Self::FilmHdsc | Self::ConsaHdsc | Self::Hdsc => configured,
            Self::HdscDecoder => HdscPlacement::Decoder,
            Self::HdscEncoder => HdscPlacement::Encoder,
            Self::HdscEncoderDecoder => HdscPlacement::EncoderDecoder,
            _ => HdscPlacement::None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Film => "film",
            Self::FilmHdsc => "film+hdsc",
            Self::ConsaAge => "consa_age",
            Self::Consa => "consa",
            Self::ConsaHdsc => "consa+hdsc",
            Self::Hdsc => "hdsc",
            Self::HdscDecoder => "hdsc_decoder",
            Self::HdscEncoder => "hdsc_encoder",
            Self::HdscEncoderDecoder => "hdsc_enc_dec",
        }
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "consa_age_loc" {
            return Ok(Self::Consa);
        }
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown conditioning mode {s}")))
    }
}

impl TryFrom<String> for ConditioningMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ConditioningMode> for String {
    fn from(m: ConditioningMode) -> String {
        m.as_str().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningFamily {
    None,
    Consa { use_location: bool },
    Film,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditioningConfig {
    pub mode: ConditioningMode,
    pub hdsc_placement: HdscPlacement,
    pub hid_dim: usize,
    pub heads: usize,
    pub num_ages: usize,
    pub consa_residual: bool,
    pub consa_prenorm: bool,
    pub attention_dropout: f64,
}

impl ConditioningConfig {
    pub fn new(mode: ConditioningMode) -> Self {
        Self {
            mode,
            hdsc_placement: HdscPlacement::Decoder,
            hid_dim: 64,
            heads: 4,
            num_ages: 4,
            consa_residual: false,
            consa_prenorm: true,
            attention_dropout: 0.1,
        }
    }

    pub fn family(&self) -> ConditioningFamily {
        self.mode.family()
    }

    pub fn hdsc(&self) -> HdscPlacement {
        self.mode.hdsc(self.hdsc_placement)
    }
}

/// Conditioning information for a batch, one entry per sample.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, in_channels, h, w)`.
    pub images: Tensor,
    pub ages: Vec<usize>,
    /// Location fed to the location embedding.
    pub centers: Vec<RelCenter>,
    /// True crop windows, used for coordinate planes.
    pub boxes: Vec<CropBox>,
    pub dims: Vec<VolumeDims>,
}

impl Batch {
    pub fn from_samples(samples: &[CropSample], dtype: DType, device: &Device) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (h, w) = first.image.shape();
        let mut data = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if s.image.shape() != (h, w) {
                return Err(Error::Shape(format!(
                    "mixed crop sizes {:?} and {:?} in one batch",
                    (h, w),
                    s.image.shape()
                )));
            }
            data.extend(s.image.data().iter().map(|&v| v as f64));
        }
        let images = Tensor::from_vec(data, (samples.len(), 1, h, w), device)?.to_dtype(dtype)?;
        Ok(Self {
            images,
            ages: samples.iter().map(|s| s.age_index).collect(),
            centers: samples.iter().map(|s| s.rel_center).collect(),
            boxes: samples.iter().map(|s| s.bbox).collect(),
            dims: samples.iter().map(|s| s.dims).collect(),
        })
    }

    /// Tiles of one slice, with exact (unjittered) relative centers.
    pub fn from_tiles(
        slice: &Plane<f32>,
        boxes: &[CropBox],
        age: usize,
        dims: VolumeDims,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let samples = boxes
            .iter()
            .map(|b| {
                Ok(CropSample {
                    image: slice.crop(b.top, b.bottom, b.left, b.right),
                    mask: None,
                    bbox: *b,
                    rel_center: relative_center(b, dims)?,
                    age_index: age,
                    dims,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(&samples, dtype, device)
    }

    pub fn len(&self) -> usize {
        self.ages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ages.is_empty()
    }
}

#[derive(Debug, Clone)]
struct PlainBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
}

impl PlainBlock {
    fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), input, output, 3)?,
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), output, groups)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), output, output, 3)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), output, groups)?,
        })
    }

    fn forward(&self, x: &Tensor, film: Option<&FiLMParams>) -> Result<Tensor> {
        let y = self.norm1.forward(&self.conv1.forward(x)?)?.silu()?;
        let mut y = self.norm2.forward(&self.conv2.forward(&y)?)?;
        if let Some(p) = film {
            y = crate::conditioning::film_apply(&y, p)?;
        }
        Ok(y.silu()?)
    }
}

/// Residual multi-scale block: 1x1 projection, hierarchical 3x3 convolutions
/// over channel splits, 1x1 fusion, identity or 1x1 shortcut.
#[derive(Debug, Clone)]
struct Res2Block {
    feature_channels: usize,
    proj_in: Conv2d,
    norm_in: GroupNorm,
    splits: Vec<(Conv2d, GroupNorm)>,
    proj_out: Conv2d,
    norm_out: GroupNorm,
    shortcut: Option<Conv2d>,
    scales: usize,
}

impl Res2Block {
    fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, scales: usize, groups: usize) -> Result<Self> {
        let width = output / scales;
        let splits = (1..scales)
            .map(|i| {
                Ok((
                    Conv2d::new(store, &format!("{name}.split{i}.conv"), width, width, 3)?,
                    GroupNorm::new(store, &format!("{name}.split{i}.norm"), width, groups)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            feature_channels: input,
            proj_in: Conv2d::new(store, &format!("{name}.proj_in"), input, output, 1)?,
            norm_in: GroupNorm::new(store, &format!("{name}.norm_in"), output, groups)?,
            splits,
            proj_out: Conv2d::new(store, &format!("{name}.proj_out"), output, output, 1)?,
            norm_out: GroupNorm::new(store, &format!("{name}.norm_out"), output, groups)?,
            shortcut: if input != output {
                Some(Conv2d::new(store, &format!("{name}.shortcut"), input, output, 1)?)
            } else {
                None
            },
            scales,
        })
    }

    fn forward(&self, x: &Tensor, film: Option<&FiLMParams>) -> Result<Tensor> {
        let y = self.norm_in.forward(&self.proj_in.forward(x)?)?.silu()?;
        let width = y.dims4()?.1 / self.scales;
        let mut parts = vec![y.narrow(1, 0, width)?];
        let mut prev: Option<Tensor> = None;
        for (i, (conv, norm)) in self.splits.iter().enumerate() {
            let chunk = y.narrow(1, (i + 1) * width, width)?;
            let input = match &prev {
                Some(p) => (chunk + p)?,
                None => chunk,
            };
            let out = norm.forward(&conv.forward(&input)?)?.silu()?;
            parts.push(out.clone());
            prev = Some(out);
        }
        let mut fused = self.norm_out.forward(&self.proj_out.forward(&Tensor::cat(&parts, 1)?)?)?;
        if let Some(p) = film {
            fused = crate::conditioning::film_apply(&fused, p)?;
        }
        // Coordinate channels (if any) only enter through the first projection.
        let features = x.narrow(1, 0, self.feature_channels)?;
        let residual = match &self.shortcut {
            Some(s) => s.forward(&features)?,
            None => features,
        };
        Ok((fused + residual)?.silu()?)
    }
}

#[derive(Debug, Clone)]
enum Block {
    Plain(PlainBlock),
    Res2(Res2Block),
}

impl Block {
    fn new(spec: &BackboneSpec, store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(match spec.encoder_kind {
            EncoderKind::CnnPlain => Block::Plain(PlainBlock::new(store, name, input, output, spec.norm_groups)?),
            EncoderKind::CnnRes2 => Block::Res2(Res2Block::new(
                store,
                name,
                input,
                output,
                spec.res2_scales,
                spec.norm_groups,
            )?),
        })
    }

    fn first_conv_mut(&mut self) -> &mut Conv2d {
        match self {
            Block::Plain(b) => &mut b.conv1,
            Block::Res2(b) => &mut b.proj_in,
        }
    }

    fn forward(&self, x: &Tensor, film: Option<&FiLMParams>) -> Result<Tensor> {
        match self {
            Block::Plain(b) => b.forward(x, film),
            Block::Res2(b) => b.forward(x, film),
        }
    }
}

#[derive(Debug, Clone)]
struct UpConv {
    conv: Conv2d,
    norm: GroupNorm,
}

impl UpConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let up = x.upsample_nearest2d(2 * h, 2 * w)?;
        Ok(self.norm.forward(&self.conv.forward(&up)?)?.silu()?)
    }
}

/// Intermediate tensors of one forward pass, exposed for inspection.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Output of every encoder stage, finest first.
    pub encoder: Vec<Tensor>,
    /// Bottleneck after the conditioning block (if any).
    pub bottleneck: Tensor,
    /// Input of every decoder block after skip merging (and coordinate
    /// concatenation), coarsest first.
    pub decoder_inputs: Vec<Tensor>,
    pub logits: Tensor,
}

pub struct SegModel {
    spec: BackboneSpec,
    seed: u64,
    store: ParamStore,
    encoder: Vec<Block>,
    ups: Vec<UpConv>,
    decoder: Vec<Block>,
    head: Conv2d,
    conditioning: Option<ConditioningConfig>,
    embedder: Option<ConditionEmbedder>,
    consa: Option<ConSA>,
    films: Vec<FilmGenerator>,
}

impl fmt::Debug for SegModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SegModel")
            .field("spec", &self.spec)
            .field("conditioning", &self.conditioning)
            .field("params", &self.num_params())
            .finish()
    }
}

/// Builds an unconditioned backbone. Parameters are a pure function of
/// `(spec, seed, dtype)`.
pub fn build_backbone(spec: &BackboneSpec, seed: u64, dtype: DType) -> Result<SegModel> {
    spec.validate()?;
    let mut store = ParamStore::new(seed, dtype);
    let ch = &spec.stage_channels;
    let depth = spec.depth();
    let mut encoder = Vec::with_capacity(depth);
    for (i, &c) in ch.iter().enumerate() {
        let input = if i == 0 { spec.in_channels } else { ch[i - 1] };
        encoder.push(Block::new(spec, &mut store, &format!("enc{i}"), input, c)?);
    }
    let mut ups = Vec::with_capacity(depth - 1);
    let mut decoder = Vec::with_capacity(depth - 1);
    for level in (0..depth - 1).rev() {
        let c = ch[level];
        ups.push(UpConv {
            conv: Conv2d::new(&mut store, &format!("up{level}.conv"), ch[level + 1], c, 3)?,
            norm: GroupNorm::new(&mut store, &format!("up{level}.norm"), c, spec.norm_groups)?,
        });
        let merged = match spec.skip_mode {
            SkipMode::Sum => c,
            SkipMode::Concat => 2 * c,
        };
        decoder.push(Block::new(spec, &mut store, &format!("dec{level}"), merged, c)?);
    }
    let head = Conv2d::new(&mut store, "head", ch[0], spec.num_classes, 1)?;
    Ok(SegModel {
        spec: spec.clone(),
        seed,
        store,
        encoder,
        ups,
        decoder,
        head,
        conditioning: None,
        embedder: None,
        consa: None,
        films: Vec::new(),
    })
}

/// Inserts the conditioning modules selected by `cfg.mode`.
pub fn attach_conditioning(mut model: SegModel, cfg: &ConditioningConfig) -> Result<SegModel> {
    if model.conditioning.is_some() {
        return Err(Error::AlreadyConditioned);
    }
    let store = &mut model.store;
    let spec = &model.spec;
    let hdsc = cfg.hdsc();
    match cfg.family() {
        ConditioningFamily::None => {}
        ConditioningFamily::Consa { use_location } => {
            let embedder = ConditionEmbedder::new(store, "cond.emb", cfg.num_ages, cfg.hid_dim, use_location)?;
            let consa_cfg = ConSAConfig {
                hid_dim: cfg.hid_dim,
                heads: cfg.heads,
                in_channels: *spec.stage_channels.last().expect("validated depth"),
                dropout: cfg.attention_dropout,
                prenorm: cfg.consa_prenorm,
                residual: cfg.consa_residual,
                use_location,
            };
            model.consa = Some(ConSA::new(store, "cond.consa", consa_cfg)?);
            model.embedder = Some(embedder);
        }
        ConditioningFamily::Film => {
            model.embedder = Some(ConditionEmbedder::new(store, "cond.emb", cfg.num_ages, cfg.hid_dim, true)?);
            let depth = spec.depth();
            for level in (0..depth - 1).rev() {
                model.films.push(FilmGenerator::new(
                    store,
                    &format!("cond.film{level}"),
                    cfg.hid_dim,
                    spec.stage_channels[level],
                )?);
            }
        }
    }
    if hdsc.encoder() {
        for block in &mut model.encoder {
            block.first_conv_mut().widen_input(store, 3)?;
        }
    }
    if hdsc.decoder() {
        for block in &mut model.decoder {
            block.first_conv_mut().widen_input(store, 3)?;
        }
    }
    if cfg.mode != ConditioningMode::None {
        model.conditioning = Some(*cfg);
    }
    Ok(model)
}

impl SegModel {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn conditioning(&self) -> Option<&ConditioningConfig> {
        self.conditioning.as_ref()
    }

    pub fn mode(&self) -> ConditioningMode {
        self.conditioning.map(|c| c.mode).unwrap_or(ConditioningMode::None)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn consa(&self) -> Option<&ConSA> {
        self.consa.as_ref()
    }

    pub fn embedder(&self) -> Option<&ConditionEmbedder> {
        self.embedder.as_ref()
    }

    /// Number of classes the distinct age coding supports, if conditioned on age.
    pub fn num_ages(&self) -> Option<usize> {
        self.embedder.as_ref().map(|e| e.num_ages())
    }

    fn hdsc(&self) -> HdscPlacement {
        self.conditioning.map(|c| c.hdsc()).unwrap_or(HdscPlacement::None)
    }

    fn with_coords(&self, x: &Tensor, batch: &Batch) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let grids = batch
            .boxes
            .iter()
            .zip(&batch.dims)
            .map(|(b, d)| dense_coords(b, *d, (h, w)))
            .collect::<Result<Vec<_>>>()?;
        concat_coords(x, &grids)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let (b, c, h, w) = batch.images.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let m = self.spec.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not a multiple of {m}")));
        }
        if batch.ages.len() != b || batch.centers.len() != b || batch.boxes.len() != b || batch.dims.len() != b {
            return Err(Error::Shape("batch metadata length does not match images".into()));
        }
        if let Some(e) = &self.embedder {
            e.check_ages(&batch.ages)?;
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Batch, fwd: &mut Forward) -> Result<Tensor> {
        Ok(self.forward_trace(batch, fwd)?.logits)
    }

    pub fn forward_trace(&self, batch: &Batch, fwd: &mut Forward) -> Result<ForwardTrace> {
        self.check_batch(batch)?;
        let hdsc = self.hdsc();
        let ctx: Option<ConditionContext> = match &self.embedder {
            Some(e) => Some(e.context(&batch.ages, &batch.centers)?),
            None => None,
        };

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = batch.images.clone();
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                x = x.max_pool2d(2)?;
            }
            if hdsc.encoder() {
                x = self.with_coords(&x, batch)?;
            }
            x = block.forward(&x, None)?;
            skips.push(x.clone());
        }

        let mut x = fwd.dropout(&x, self.spec.dropout)?;
        if let (Some(consa), Some(ctx)) = (&self.consa, &ctx) {
            x = consa.forward(&x, ctx, fwd)?;
        }
        let bottleneck = x.clone();

        let depth = self.spec.depth();
        let mut decoder_inputs = Vec::with_capacity(depth - 1);
        for (stage, (up, block)) in self.ups.iter().zip(&self.decoder).enumerate() {
            let level = depth - 2 - stage;
            let u = up.forward(&x)?;
            let skip = &skips[level];
            let mut merged = match self.spec.skip_mode {
                SkipMode::Sum => (u + skip)?,
                SkipMode::Concat => Tensor::cat(&[&u, skip], 1)?,
            };
            if hdsc.decoder() {
                merged = self.with_coords(&merged, batch)?;
            }
            decoder_inputs.push(merged.clone());
            let film = match (self.films.get(stage), &ctx) {
                (Some(g), Some(ctx)) => Some(g.params(ctx)?),
                _ => None,
            };
            x = block.forward(&merged, film.as_ref())?;
        }
        let logits = self.head.forward(&x)?;
        Ok(ForwardTrace {
            encoder: skips,
            bottleneck,
            decoder_inputs,
            logits,
        })
    }

    /// Resolution `(h', w')` of each decoder stage, coarse to fine, for an input crop.
    pub fn decoder_resolutions(&self, crop: (usize, usize)) -> Vec<(usize, usize)> {
        (0..self.spec.depth() - 1)
            .rev()
            .map(|level| (crop.0 >> level, crop.1 >> level))
            .collect()
    }
}

/// Convenience bundle used by configs and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub conditioning: ConditioningConfig,
    pub seed: u64,
    pub dtype: DType,
}

impl ModelConfig {
    pub fn build(&self) -> Result<SegModel> {
        let model = build_backbone(&self.backbone, self.seed, self.dtype)?;
        attach_conditioning(model, &self.conditioning)
    }
}
