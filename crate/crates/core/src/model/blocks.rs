//! Network building blocks: conv-norm-activation units, the space-to-depth
//! stem, dilated SE-ResNeXt bottlenecks and the anisotropic ASPP neck.

use crate::nn::{join, take_cache, BatchNorm2d, Conv2d, Conv2dConfig, Layer, Mode, ParamVisitor, Relu, SqueezeExcite};
use crate::tensor::{ShapeError, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Convolution followed by batch normalization and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    relu: Option<Relu>,
}

impl ConvBnAct {
    pub fn new(cfg: Conv2dConfig, relu: bool, rng: &mut impl Rng) -> Result<Self, ShapeError> {
        Ok(ConvBnAct {
            conv: Conv2d::new(cfg, rng)?,
            bn: BatchNorm2d::new(cfg.out_channels),
            relu: relu.then(Relu::default),
        })
    }

    pub fn config(&self) -> &Conv2dConfig {
        self.conv.config()
    }
}

impl Layer for ConvBnAct {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ShapeError> {
        let y = self.conv.forward(x, mode)?;
        let y = self.bn.forward(&y, mode)?;
        match &mut self.relu {
            Some(r) => r.forward(&y, mode),
            None => Ok(y),
        }
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = match &mut self.relu {
            Some(r) => r.backward(grad),
            None => grad.clone(),
        };
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }
}

/// Moves each 2x2 pixel block into channels. Output channel block `k` holds
/// the pixels at offsets (even row, even col), (odd row, even col),
/// (even row, odd col), (odd row, odd col) for `k = 0..4`.
pub fn space_to_depth(x: &Tensor) -> Result<Tensor, ShapeError> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(ShapeError::new(format!("slicing needs even spatial size, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, 4 * c, oh, ow]);
    for b in 0..n {
        for (k, (dr, dc)) in OFFSETS.into_iter().enumerate() {
            for ch in 0..c {
                let src = x.plane(b, ch);
                let dst = out.plane_mut(b, k * c + ch);
                for y in 0..oh {
                    let row = &src[(2 * y + dr) * w..];
                    for xx in 0..ow {
                        dst[y * ow + xx] = row[2 * xx + dc];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor) -> Tensor {
    let [n, c4, oh, ow] = x.shape();
    let c = c4 / 4;
    let (h, w) = (oh * 2, ow * 2);
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for (k, (dr, dc)) in OFFSETS.into_iter().enumerate() {
            for ch in 0..c {
                let src = x.plane(b, k * c + ch).to_vec();
                let dst = out.plane_mut(b, ch);
                for y in 0..oh {
                    for xx in 0..ow {
                        dst[(2 * y + dr) * w + 2 * xx + dc] = src[y * ow + xx];
                    }
                }
            }
        }
    }
    out
}

const OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// Focus stem: lossless 2x2 slicing followed by a 3x3 conv unit.
#[derive(Clone, Debug)]
pub struct Focus {
    pub conv: ConvBnAct,
}

impl Focus {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Result<Self, ShapeError> {
        Ok(Focus {
            conv: ConvBnAct::new(Conv2dConfig::new(4 * in_channels, out_channels, 3), true, rng)?,
        })
    }
}

impl Layer for Focus {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ShapeError> {
        let s = space_to_depth(x)?;
        self.conv.forward(&s, mode)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        depth_to_space(&self.conv.backward(grad))
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.conv.visit_params(&join(prefix, "conv"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Standard,
    Downsampling,
    Dilated,
}

/// Static description of one bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// (row, column) dilation of the two grouped branches.
    pub dilations: [(usize, usize); 2],
    pub groups_per_branch: usize,
}

impl BlockSpec {
    pub fn mid_channels(&self) -> usize {
        self.out_channels / 2
    }

    pub fn branch_channels(&self) -> usize {
        self.mid_channels() / 2
    }
}

#[derive(Clone, Debug)]
struct BottleneckCache {
    branch_split: usize,
}

/// SE-ResNeXt bottleneck whose grouped 3x3 convolution is split into two
/// branches with their own (row, column) dilation.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub spec: BlockSpec,
    pub reduce: ConvBnAct,
    pub branch_a: Conv2d,
    pub branch_b: Conv2d,
    pub bn_mid: BatchNorm2d,
    relu_mid: Relu,
    pub expand: ConvBnAct,
    pub se: SqueezeExcite,
    pub shortcut: Option<ConvBnAct>,
    relu_out: Relu,
    cache: Option<BottleneckCache>,
}

impl Bottleneck {
    pub fn new(spec: BlockSpec, se_reduction: usize, rng: &mut impl Rng) -> Result<Self, ShapeError> {
        let mid = spec.mid_channels();
        let half = spec.branch_channels();
        let g = spec.groups_per_branch;
        if half == 0 || half % g != 0 {
            return Err(ShapeError::new(format!(
                "branch width {half} is not a positive multiple of {g} groups"
            )));
        }
        let branch = |(r, c): (usize, usize), rng: &mut _| {
            Conv2d::new(
                Conv2dConfig::new(half, half, 3).dilation(r, c).groups(g).stride(spec.stride),
                rng,
            )
        };
        let shortcut = (spec.stride != 1 || spec.in_channels != spec.out_channels)
            .then(|| {
                ConvBnAct::new(
                    Conv2dConfig::new(spec.in_channels, spec.out_channels, 1).stride(spec.stride),
                    false,
                    rng,
                )
            })
            .transpose()?;
        Ok(Bottleneck {
            spec,
            reduce: ConvBnAct::new(Conv2dConfig::new(spec.in_channels, mid, 1), true, rng)?,
            branch_a: branch(spec.dilations[0], rng)?,
            branch_b: branch(spec.dilations[1], rng)?,
            bn_mid: BatchNorm2d::new(mid),
            relu_mid: Relu::default(),
            expand: ConvBnAct::new(Conv2dConfig::new(mid, spec.out_channels, 1), false, rng)?,
            se: SqueezeExcite::new(spec.out_channels, se_reduction, rng),
            shortcut,
            relu_out: Relu::default(),
            cache: None,
        })
    }
}

impl Layer for Bottleneck {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ShapeError> {
        if x.c() != self.spec.in_channels {
            return Err(ShapeError::new(format!(
                "bottleneck expects {} channels, got {}",
                self.spec.in_channels,
                x.c()
            )));
        }
        let h = self.reduce.forward(x, mode)?;
        let half = self.spec.branch_channels();
        let parts = h.split_channels(&[half, half])?;
        let a = self.branch_a.forward(&parts[0], mode)?;
        let b = self.branch_b.forward(&parts[1], mode)?;
        let m = Tensor::concat_channels(&[&a, &b])?;
        let m = self.bn_mid.forward(&m, mode)?;
        let m = self.relu_mid.forward(&m, mode)?;
        let e = self.expand.forward(&m, mode)?;
        let mut y = self.se.forward(&e, mode)?;
        match &mut self.shortcut {
            Some(s) => y.add_assign(&s.forward(x, mode)?)?,
            None => y.add_assign(x)?,
        }
        if mode.record() {
            self.cache = Some(BottleneckCache { branch_split: half });
        }
        self.relu_out.forward(&y, mode)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = take_cache(&mut self.cache, "bottleneck");
        let g = self.relu_out.backward(grad);
        let d_short = match &mut self.shortcut {
            Some(s) => s.backward(&g),
            None => g.clone(),
        };
        let g_e = self.se.backward(&g);
        let g_m = self.expand.backward(&g_e);
        let g_m = self.relu_mid.backward(&g_m);
        let g_m = self.bn_mid.backward(&g_m);
        let half = cache.branch_split;
        let parts = g_m.split_channels(&[half, half]).expect("cached split");
        let ga = self.branch_a.backward(&parts[0]);
        let gb = self.branch_b.backward(&parts[1]);
        let g_h = Tensor::concat_channels(&[&ga, &gb]).expect("branch shapes agree");
        let mut dx = self.reduce.backward(&g_h);
        dx.add_assign(&d_short).expect("shortcut shape");
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.reduce.visit_params(&join(prefix, "reduce"), f);
        self.branch_a.visit_params(&join(prefix, "branch_a"), f);
        self.branch_b.visit_params(&join(prefix, "branch_b"), f);
        self.bn_mid.visit_params(&join(prefix, "bn_mid"), f);
        self.expand.visit_params(&join(prefix, "expand"), f);
        self.se.visit_params(&join(prefix, "se"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params(&join(prefix, "shortcut"), f);
        }
    }
}

/// (row, column) dilations of the four context branches.
pub const ASPP_DILATIONS: [(usize, usize); 4] = [(2, 6), (3, 12), (5, 18), (6, 24)];

/// Atrous pyramid: the input plus four grouped dilated 3x3 branches,
/// channel attention over the concatenation, and a 1x1 fusion back to the
/// input width.
#[derive(Clone, Debug)]
pub struct Aspp {
    channels: usize,
    pub branches: Vec<ConvBnAct>,
    pub se: SqueezeExcite,
    pub fusion: ConvBnAct,
}

impl Aspp {
    pub fn new(
        channels: usize,
        groups: usize,
        dilations: &[(usize, usize)],
        se_reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ShapeError> {
        let branches = dilations
            .iter()
            .map(|&(r, c)| {
                ConvBnAct::new(
                    Conv2dConfig::new(channels, channels, 3).dilation(r, c).groups(groups),
                    true,
                    rng,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let total = channels * (dilations.len() + 1);
        Ok(Aspp {
            channels,
            branches,
            se: SqueezeExcite::new(total, se_reduction, rng),
            fusion: ConvBnAct::new(Conv2dConfig::new(total, channels, 1), true, rng)?,
        })
    }
}

impl Layer for Aspp {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ShapeError> {
        if x.c() != self.channels {
            return Err(ShapeError::new(format!(
                "ASPP expects {} channels, got {}",
                self.channels,
                x.c()
            )));
        }
        let outs = self
            .branches
            .iter_mut()
            .map(|b| b.forward(x, mode))
            .collect::<Result<Vec<_>, _>>()?;
        let mut parts: Vec<&Tensor> = vec![x];
        parts.extend(outs.iter());
        let cat = Tensor::concat_channels(&parts)?;
        let att = self.se.forward(&cat, mode)?;
        self.fusion.forward(&att, mode)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.fusion.backward(grad);
        let g = self.se.backward(&g);
        let sizes = vec![self.channels; self.branches.len() + 1];
        let parts = g.split_channels(&sizes).expect("concatenated width");
        let mut dx = parts[0].clone();
        for (b, gp) in self.branches.iter_mut().zip(&parts[1..]) {
            dx.add_assign(&b.backward(gp)).expect("branch input shape");
        }
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("branch{i}")), f);
        }
        self.se.visit_params(&join(prefix, "se"), f);
        self.fusion.visit_params(&join(prefix, "fusion"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_layer, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn slicing_order() {
        let x = Tensor::from_vec([1, 1, 4, 4], (1..=16).map(|v| v as f32).collect()).unwrap();
        let s = space_to_depth(&x).unwrap();
        assert_eq!(s.shape(), [1, 4, 2, 2]);
        assert_eq!(s.plane(0, 0), &[1., 3., 9., 11.]);
        assert_eq!(s.plane(0, 1), &[5., 7., 13., 15.]);
        assert_eq!(s.plane(0, 2), &[2., 4., 10., 12.]);
        assert_eq!(s.plane(0, 3), &[6., 8., 14., 16.]);
        assert_eq!(s.sum(), x.sum());
        assert_eq!(depth_to_space(&s), x);
        let odd = Tensor::zeros([1, 1, 3, 4]);
        assert!(space_to_depth(&odd).is_err());
    }

    fn spec(kind: BlockKind, cin: usize, cout: usize, stride: usize, d: [(usize, usize); 2]) -> BlockSpec {
        BlockSpec {
            kind,
            in_channels: cin,
            out_channels: cout,
            stride,
            dilations: d,
            groups_per_branch: 2,
        }
    }

    #[test]
    fn bottleneck_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut down = Bottleneck::new(spec(BlockKind::Downsampling, 4, 8, 2, [(1, 1); 2]), 4, &mut rng).unwrap();
        let y = down.forward(&random_tensor([2, 4, 8, 8], 1), Mode::Eval).unwrap();
        assert_eq!(y.shape(), [2, 8, 4, 4]);
        let mut dil = Bottleneck::new(spec(BlockKind::Dilated, 8, 8, 1, [(1, 2), (2, 2)]), 4, &mut rng).unwrap();
        assert!(dil.shortcut.is_none());
        let y = dil.forward(&y, Mode::Eval).unwrap();
        assert_eq!(y.shape(), [2, 8, 4, 4]);
        assert!(dil.forward(&random_tensor([1, 4, 4, 4], 2), Mode::Eval).is_err());
    }

    #[test]
    fn bottleneck_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Bottleneck::new(spec(BlockKind::Downsampling, 4, 8, 2, [(1, 2), (2, 2)]), 4, &mut rng).unwrap();
        // Nonzero excitation weights so the gate path is exercised.
        b.se.fc2_w.value.iter_mut().enumerate().for_each(|(i, v)| *v = 0.3 * ((i % 5) as f32 - 2.0));
        check_layer(&mut b, &random_tensor([2, 4, 6, 6], 3), Mode::Train, 5e-2);
    }

    #[test]
    fn aspp_gradients_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = Aspp::new(4, 2, &[(1, 2), (2, 3)], 4, &mut rng).unwrap();
        let x = random_tensor([2, 4, 6, 7], 4);
        assert_eq!(a.forward(&x, Mode::Eval).unwrap().shape(), [2, 4, 6, 7]);
        check_layer(&mut a, &x, Mode::Train, 5e-2);
    }

    #[test]
    fn focus_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut f = Focus::new(3, 4, &mut rng).unwrap();
        check_layer(&mut f, &random_tensor([2, 3, 6, 6], 5), Mode::Train, 5e-2);
    }
}
