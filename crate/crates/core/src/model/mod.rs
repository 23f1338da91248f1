//! The stair-line network: a sliced stem, three sections of dilated
//! SE-ResNeXt bottlenecks, an anisotropic ASPP neck and two per-cell heads.

mod blocks;
mod checkpoint;

pub use blocks::{
    depth_to_space, space_to_depth, Aspp, BlockKind, BlockSpec, Bottleneck, ConvBnAct, Focus,
    ASPP_DILATIONS,
};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};

use crate::data::{decode_grid, DetectedSegment, GridConfig};
use crate::nn::{join, Conv2d, Conv2dConfig, Layer, Mode, Param, ParamVisitor, Sigmoid};
use crate::tensor::{ShapeError, Tensor};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Network hyperparameters. Every internal width is the 1x width times
/// `width_factor`; the 2- and 8-channel outputs never scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width_factor: f64,
    pub image_size: usize,
    pub grid_n: usize,
    pub se_reduction: usize,
    pub groups_per_branch: usize,
    /// Slicing stem; a plain stride-2 3x3 conv when off.
    pub use_focus: bool,
    pub use_aspp: bool,
    /// Dilated bottlenecks; all branches use (1,1) when off.
    pub use_dilation: bool,
    /// Seed of the weight initializer.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width_factor: 1.0,
            image_size: 512,
            grid_n: 64,
            se_reduction: 16,
            groups_per_branch: 16,
            use_focus: true,
            use_aspp: true,
            use_dilation: true,
            init_seed: 0,
        }
    }
}

/// Dilation pairs of bottlenecks x.1, x.3, x.5 and x.7 in sections 2 and 3.
const SECTION_DILATIONS: [[(usize, usize); 2]; 4] = [
    [(1, 2), (2, 2)],
    [(2, 4), (4, 4)],
    [(3, 8), (8, 8)],
    [(4, 16), (16, 16)],
];

/// Initial classifier bias, the logit of a 5% prior.
const CLS_PRIOR: f32 = 0.05;

impl ModelConfig {
    pub fn with_width(width_factor: f64) -> Self {
        ModelConfig {
            width_factor,
            ..ModelConfig::default()
        }
    }

    pub fn grid(&self) -> GridConfig {
        GridConfig {
            image_size: self.image_size,
            grid_n: self.grid_n,
            cell_size: self.image_size / self.grid_n.max(1),
        }
    }

    pub fn channels(&self, base: usize) -> usize {
        (base as f64 * self.width_factor).round() as usize
    }

    pub fn stem_channels(&self) -> usize {
        self.channels(64)
    }

    pub fn section_channels(&self, section: usize) -> usize {
        match section {
            1 => self.channels(256),
            _ => self.channels(512),
        }
    }

    pub fn head_channels(&self) -> usize {
        self.channels(128)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.width_factor.is_finite() && self.width_factor > 0.0) {
            return Err(ModelError::Config(format!("width factor {}", self.width_factor)));
        }
        if self.grid_n == 0 || self.image_size != self.grid_n * 8 {
            return Err(ModelError::Config(format!(
                "the network downsamples by 8: image size {} needs a {}-cell grid, got {}",
                self.image_size,
                self.image_size / 8,
                self.grid_n
            )));
        }
        if self.se_reduction == 0 || self.groups_per_branch == 0 {
            return Err(ModelError::Config("SE reduction and group count must be positive".into()));
        }
        let g = self.groups_per_branch;
        for spec in self.block_specs() {
            let b = spec.branch_channels();
            if b < g || b % g != 0 || spec.out_channels % 4 != 0 {
                return Err(ModelError::Config(format!(
                    "width factor {} leaves {b} branch channels for {g} groups",
                    self.width_factor
                )));
            }
        }
        let c = self.section_channels(2);
        if self.use_aspp && c % g != 0 {
            return Err(ModelError::Config(format!(
                "ASPP width {c} is not divisible into {g} groups"
            )));
        }
        if self.head_channels() == 0 || self.stem_channels() == 0 {
            return Err(ModelError::Config(format!("width factor {} is too small", self.width_factor)));
        }
        Ok(())
    }

    /// The 19 bottlenecks in order.
    pub fn block_specs(&self) -> Vec<BlockSpec> {
        let g = self.groups_per_branch;
        let plain = [(1, 1), (1, 1)];
        let mut specs = Vec::new();
        let c0 = self.stem_channels();
        let c1 = self.section_channels(1);
        let c2 = self.section_channels(2);
        for i in 0..3 {
            specs.push(BlockSpec {
                kind: if i == 0 { BlockKind::Downsampling } else { BlockKind::Standard },
                in_channels: if i == 0 { c0 } else { c1 },
                out_channels: c1,
                stride: if i == 0 { 2 } else { 1 },
                dilations: plain,
                groups_per_branch: g,
            });
        }
        for section in [2, 3] {
            for i in 0..8 {
                let first = i == 0;
                let downsample = first && section == 2;
                let dilations = if i % 2 == 1 && self.use_dilation {
                    Some(SECTION_DILATIONS[i / 2])
                } else {
                    None
                };
                specs.push(BlockSpec {
                    kind: match (downsample, dilations) {
                        (true, _) => BlockKind::Downsampling,
                        (_, Some(_)) => BlockKind::Dilated,
                        _ => BlockKind::Standard,
                    },
                    in_channels: if downsample { c1 } else { c2 },
                    out_channels: c2,
                    stride: if downsample { 2 } else { 1 },
                    dilations: dilations.unwrap_or(plain),
                    groups_per_branch: g,
                });
            }
        }
        specs
    }

    /// Table-style name of bottleneck `index` ("Bottleneck 2.5").
    pub fn block_name(index: usize) -> String {
        match index {
            0..=2 => format!("Bottleneck 1.{index}"),
            3..=10 => format!("Bottleneck 2.{}", index - 3),
            _ => format!("Bottleneck 3.{}", index - 11),
        }
    }
}

#[derive(Clone, Debug)]
enum Stem {
    Focus(Focus),
    Conv(ConvBnAct),
}

impl Layer for Stem {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ShapeError> {
        match self {
            Stem::Focus(f) => f.forward(x, mode),
            Stem::Conv(c) => c.forward(x, mode),
        }
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        match self {
            Stem::Focus(f) => f.backward(grad),
            Stem::Conv(c) => c.backward(grad),
        }
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        match self {
            Stem::Focus(s) => s.visit_params(prefix, f),
            Stem::Conv(c) => c.visit_params(&join(prefix, "conv"), f),
        }
    }
}

/// Raw network outputs for a batch: classifier logits `[B, 2, N, N]` and
/// sigmoid locations `[B, 8, N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub loc: Tensor,
}

impl ModelOutput {
    pub fn prediction(&self, index: usize, grid: GridConfig) -> PredictionGrid {
        let logits = self.logits.item(index).to_vec();
        let cls_prob = logits.iter().map(|&z| crate::nn::sigmoid(z)).collect();
        PredictionGrid {
            grid,
            logits,
            cls_prob,
            loc: self.loc.item(index).to_vec(),
        }
    }

    pub fn predictions(&self, grid: GridConfig) -> Vec<PredictionGrid> {
        (0..self.logits.n()).map(|i| self.prediction(i, grid)).collect()
    }
}

/// One image's prediction, channel-major like [`crate::data::LabelGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionGrid {
    pub grid: GridConfig,
    pub logits: Vec<f32>,
    pub cls_prob: Vec<f32>,
    pub loc: Vec<f32>,
}

impl PredictionGrid {
    pub fn decode(&self, threshold: f32) -> Vec<DetectedSegment> {
        decode_grid(&self.cls_prob, &self.loc, &self.grid, threshold)
    }
}

/// Output size `[channels, height, width]` of a named stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    /// Learnable scalars.
    pub total: usize,
    /// Non-learnable buffers such as running statistics.
    pub buffers: usize,
    pub sections: Vec<(String, usize)>,
}

impl ParamReport {
    /// Size of the learnable weights at 4 bytes each, in megabytes.
    pub fn size_mb(&self) -> f64 {
        self.total as f64 * 4.0 / 1e6
    }
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBox {
    pub row0: isize,
    pub row1: isize,
    pub col0: isize,
    pub col1: isize,
}

impl PixelBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (r, c) = (row as isize, col as isize);
        (self.row0..=self.row1).contains(&r) && (self.col0..=self.col1).contains(&c)
    }

    fn union(self, o: PixelBox) -> PixelBox {
        PixelBox {
            row0: self.row0.min(o.row0),
            row1: self.row1.max(o.row1),
            col0: self.col0.min(o.col0),
            col1: self.col1.max(o.col1),
        }
    }

    /// Input region read by a convolution to produce this output region.
    pub fn through_conv(self, cfg: &Conv2dConfig) -> PixelBox {
        let s = cfg.stride as isize;
        let span = |lo: isize, hi: isize, pad: usize, dil: usize, k: usize| {
            (lo * s - pad as isize, hi * s - pad as isize + (dil * (k - 1)) as isize)
        };
        let (row0, row1) = span(self.row0, self.row1, cfg.padding.0, cfg.dilation.0, cfg.kernel.0);
        let (col0, col1) = span(self.col0, self.col1, cfg.padding.1, cfg.dilation.1, cfg.kernel.1);
        PixelBox { row0, row1, col0, col1 }
    }

    fn clamp(self, h: usize, w: usize) -> PixelBox {
        PixelBox {
            row0: self.row0.max(0),
            row1: self.row1.min(h as isize - 1),
            col0: self.col0.max(0),
            col1: self.col1.min(w as isize - 1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StairNet {
    config: ModelConfig,
    stem: Stem,
    pub blocks: Vec<Bottleneck>,
    pub aspp: Option<Aspp>,
    pub neck: ConvBnAct,
    pub cls_conv: ConvBnAct,
    pub cls_out: Conv2d,
    pub loc_conv: ConvBnAct,
    pub loc_out: Conv2d,
    loc_act: Sigmoid,
    trace: Vec<LayerShape>,
}

impl StairNet {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let c0 = config.stem_channels();
        let stem = if config.use_focus {
            Stem::Focus(Focus::new(3, c0, &mut rng)?)
        } else {
            Stem::Conv(ConvBnAct::new(Conv2dConfig::new(3, c0, 3).stride(2), true, &mut rng)?)
        };
        let blocks = config
            .block_specs()
            .into_iter()
            .map(|s| Bottleneck::new(s, config.se_reduction, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let c2 = config.section_channels(2);
        let aspp = config
            .use_aspp
            .then(|| {
                Aspp::new(c2, config.groups_per_branch, &ASPP_DILATIONS, config.se_reduction, &mut rng)
            })
            .transpose()?;
        let hc = config.head_channels();
        let neck = ConvBnAct::new(Conv2dConfig::new(c2, hc, 3), true, &mut rng)?;
        let cls_conv = ConvBnAct::new(Conv2dConfig::new(hc, hc, 3), true, &mut rng)?;
        let mut cls_out = Conv2d::new(Conv2dConfig::new(hc, 2, 1).bias(true), &mut rng)?;
        let prior = (CLS_PRIOR / (1.0 - CLS_PRIOR)).ln();
        if let Some(b) = &mut cls_out.bias {
            b.value.iter_mut().for_each(|v| *v = prior);
        }
        let loc_conv = ConvBnAct::new(Conv2dConfig::new(hc, hc, 3), true, &mut rng)?;
        let loc_out = Conv2d::new(Conv2dConfig::new(hc, 8, 1).bias(true), &mut rng)?;
        Ok(StairNet {
            config,
            stem,
            blocks,
            aspp,
            neck,
            cls_conv,
            cls_out,
            loc_conv,
            loc_out,
            loc_act: Sigmoid::default(),
            trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grid(&self) -> GridConfig {
        self.config.grid()
    }

    /// Output shapes recorded by the last forward pass, one row per stage.
    pub fn last_trace(&self) -> &[LayerShape] {
        &self.trace
    }

    fn record(&mut self, name: &str, t: &Tensor) {
        self.trace.push(LayerShape {
            name: name.to_string(),
            shape: [t.c(), t.h(), t.w()],
        });
    }

    /// Runs a batch `[B, 3, S, S]` of images scaled to `[0, 1]`.
    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<ModelOutput, ShapeError> {
        let s = self.config.image_size;
        if images.c() != 3 || images.h() != s || images.w() != s {
            return Err(ShapeError::new(format!(
                "expected [B, 3, {s}, {s}] input, got {:?}",
                images.shape()
            )));
        }
        self.trace.clear();
        let mut x = self.stem.forward(images, mode)?;
        self.record("Initial", &x);
        for i in 0..self.blocks.len() {
            x = self.blocks[i].forward(&x, mode)?;
            self.record(&ModelConfig::block_name(i), &x);
        }
        if let Some(a) = &mut self.aspp {
            x = a.forward(&x, mode)?;
            self.record("ASPP", &x);
        }
        let x = self.neck.forward(&x, mode)?;
        self.record("Conv 3x3", &x);
        let c = self.cls_conv.forward(&x, mode)?;
        self.record("classification Conv 3x3", &c);
        let logits = self.cls_out.forward(&c, mode)?;
        self.record("classification Conv 1x1", &logits);
        // The classifier sigmoid is fused into the loss and applied at decode.
        self.record("classification Sigmoid", &logits);
        let l = self.loc_conv.forward(&x, mode)?;
        self.record("location Conv 3x3", &l);
        let l = self.loc_out.forward(&l, mode)?;
        self.record("location Conv 1x1", &l);
        let loc = self.loc_act.forward(&l, mode)?;
        self.record("location Sigmoid", &loc);
        Ok(ModelOutput { logits, loc })
    }

    /// Backpropagates output gradients from the last recording pass and
    /// returns the gradient with respect to the input images.
    pub fn backward(&mut self, d_logits: &Tensor, d_loc: &Tensor) -> Tensor {
        let g = self.loc_act.backward(d_loc);
        let g = self.loc_out.backward(&g);
        let mut g = self.loc_conv.backward(&g);
        let gc = self.cls_out.backward(d_logits);
        g.add_assign(&self.cls_conv.backward(&gc)).expect("head shapes agree");
        let mut g = self.neck.backward(&g);
        if let Some(a) = &mut self.aspp {
            g = a.backward(&g);
        }
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        self.stem.backward(&g)
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        self.stem.visit_params("stem", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&format!("{}.{}", block_section(i), block_offset(i)), f);
        }
        if let Some(a) = &mut self.aspp {
            a.visit_params("aspp", f);
        }
        self.neck.visit_params("neck", f);
        self.cls_conv.visit_params("cls_head.conv", f);
        self.cls_out.visit_params("cls_head.out", f);
        self.loc_conv.visit_params("loc_head.conv", f);
        self.loc_out.visit_params("loc_head.out", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p: &mut Param| p.zero_grad());
    }

    pub fn param_report(&mut self) -> ParamReport {
        let mut sections: Vec<(String, usize)> = Vec::new();
        let mut total = 0;
        let mut buffers = 0;
        self.visit_params(&mut |name, p| {
            if !p.trainable {
                buffers += p.len();
                return;
            }
            total += p.len();
            let section = name.split('.').next().unwrap_or(name).to_string();
            match sections.last_mut() {
                Some((s, n)) if *s == section => *n += p.len(),
                _ => sections.push((section, p.len())),
            }
        });
        ParamReport {
            total,
            buffers,
            sections,
        }
    }

    /// Gates gradients through squeeze-and-excitation as constants, so that
    /// input gradients reflect only the convolutional path.
    pub fn set_se_detached(&mut self, detached: bool) {
        for b in &mut self.blocks {
            b.se.detach_gate = detached;
        }
        if let Some(a) = &mut self.aspp {
            a.se.detach_gate = detached;
        }
    }

    /// Input pixels that can influence output cell (`row`, `col`) through the
    /// convolutional path (squeeze-and-excitation pooling excluded).
    pub fn receptive_box(&self, row: usize, col: usize) -> PixelBox {
        let (r, c) = (row as isize, col as isize);
        let mut b = PixelBox { row0: r, row1: r, col0: c, col1: c };
        // Both heads share the geometry of their 3x3 conv.
        b = b.through_conv(self.cls_conv.config());
        b = b.through_conv(self.neck.config());
        if let Some(a) = &self.aspp {
            b = a
                .branches
                .iter()
                .map(|br| b.through_conv(br.config()))
                .fold(b, PixelBox::union);
        }
        for blk in self.blocks.iter().rev() {
            b = b
                .through_conv(blk.branch_a.config())
                .union(b.through_conv(blk.branch_b.config()));
        }
        b = match &self.stem {
            Stem::Focus(f) => {
                let s = b.through_conv(f.conv.config());
                PixelBox {
                    row0: 2 * s.row0,
                    row1: 2 * s.row1 + 1,
                    col0: 2 * s.col0,
                    col1: 2 * s.col1 + 1,
                }
            }
            Stem::Conv(c) => b.through_conv(c.config()),
        };
        let s = self.config.image_size;
        b.clamp(s, s)
    }
}

fn block_section(index: usize) -> &'static str {
    match index {
        0..=2 => "section1",
        3..=10 => "section2",
        _ => "section3",
    }
}

fn block_offset(index: usize) -> usize {
    match index {
        0..=2 => index,
        3..=10 => index - 3,
        _ => index - 11,
    }
}

/// Builds a model and reports its parameter counts.
pub fn build_model(config: ModelConfig) -> Result<(StairNet, ParamReport), ModelError> {
    let mut model = StairNet::new(config)?;
    let report = model.param_report();
    Ok((model, report))
}

/// Converts an RGB image to a `[1, 3, H, W]` tensor scaled to `[0, 1]`.
pub fn image_to_tensor(image: &RgbImage) -> Tensor {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, px) in image.enumerate_pixels() {
        for ch in 0..3 {
            *t.at_mut(0, ch, y as usize, x as usize) = px.0[ch] as f32 / 255.0;
        }
    }
    t
}

/// Stacks images into one batch tensor.
pub fn images_to_batch(images: &[&RgbImage]) -> Result<Tensor, ShapeError> {
    let items: Vec<Tensor> = images.iter().map(|im| image_to_tensor(im)).collect();
    Tensor::stack(&items)
}
