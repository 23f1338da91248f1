use super::{join, matmul, take_cache, Layer, Mode, Param, ParamVisitor};
use crate::tensor::{ShapeError, Tensor};
use rand::Rng;

/// Grouped 2-D convolution with independent row/column dilation and padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
    /// (row, column)
    pub dilation: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl Conv2dConfig {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2dConfig {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding: (kernel / 2, kernel / 2),
            dilation: (1, 1),
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    /// Sets the dilation and the "same" padding that goes with it.
    pub fn dilation(mut self, row: usize, col: usize) -> Self {
        self.dilation = (row, col);
        self.padding = (row * (self.kernel.0 / 2), col * (self.kernel.1 / 2));
        self
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |size: usize, k: usize, pad: usize, dil: usize| {
            (size + 2 * pad).saturating_sub(dil * (k - 1) + 1) / self.stride + 1
        };
        (
            span(h, self.kernel.0, self.padding.0, self.dilation.0),
            span(w, self.kernel.1, self.padding.1, self.dilation.1),
        )
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    fn patch_len(&self) -> usize {
        self.in_per_group() * self.kernel.0 * self.kernel.1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.padding == (0, 0)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    cfg: Conv2dConfig,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(cfg: Conv2dConfig, rng: &mut impl Rng) -> Result<Self, ShapeError> {
        if cfg.groups == 0
            || cfg.in_channels % cfg.groups != 0
            || cfg.out_channels % cfg.groups != 0
        {
            return Err(ShapeError::new(format!(
                "{} -> {} channels cannot be split into {} groups",
                cfg.in_channels, cfg.out_channels, cfg.groups
            )));
        }
        if cfg.in_channels == 0 || cfg.out_channels == 0 || cfg.stride == 0 {
            return Err(ShapeError::new(format!("degenerate convolution {cfg:?}")));
        }
        let weight = Param::kaiming(
            vec![
                cfg.out_channels,
                cfg.in_per_group(),
                cfg.kernel.0,
                cfg.kernel.1,
            ],
            cfg.patch_len(),
            rng,
        );
        let bias = cfg
            .bias
            .then(|| Param::new(vec![cfg.out_channels], vec![0.0; cfg.out_channels]));
        Ok(Conv2d {
            cfg,
            weight,
            bias,
            input: None,
        })
    }

    pub fn config(&self) -> &Conv2dConfig {
        &self.cfg
    }

    /// Unfolds the channels of one group of one image into a
    /// `patch_len x (oh * ow)` matrix.
    fn im2col(&self, x: &Tensor, n: usize, g: usize, col: &mut [f32]) {
        let cfg = &self.cfg;
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = cfg.output_size(h, w);
        let (kh, kw) = cfg.kernel;
        let cin = cfg.in_per_group();
        let s = cfg.stride;
        for ci in 0..cin {
            let plane = x.plane(n, g * cin + ci);
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((ci * kh + ky) * kw + kx) * oh * ow;
                    let dst = &mut col[row..row + oh * ow];
                    let y_off = (ky * cfg.dilation.0) as isize - cfg.padding.0 as isize;
                    let x_off = (kx * cfg.dilation.1) as isize - cfg.padding.1 as isize;
                    let (x_lo, x_hi) = valid_range(ow, s, x_off, w);
                    for oy in 0..oh {
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        let iy = (oy * s) as isize + y_off;
                        if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        out[..x_lo].fill(0.0);
                        out[x_hi..].fill(0.0);
                        if s == 1 {
                            let start = (x_lo as isize + x_off) as usize;
                            out[x_lo..x_hi].copy_from_slice(&src[start..start + x_hi - x_lo]);
                        } else {
                            for (ox, o) in out.iter_mut().enumerate().take(x_hi).skip(x_lo) {
                                *o = src[((ox * s) as isize + x_off) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Conv2d::im2col`]: scatters columns back into `dx`.
    fn col2im(&self, col: &[f32], dx: &mut Tensor, n: usize, g: usize) {
        let cfg = &self.cfg;
        let (h, w) = (dx.h(), dx.w());
        let (oh, ow) = cfg.output_size(h, w);
        let (kh, kw) = cfg.kernel;
        let cin = cfg.in_per_group();
        let s = cfg.stride;
        for ci in 0..cin {
            let plane = dx.plane_mut(n, g * cin + ci);
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((ci * kh + ky) * kw + kx) * oh * ow;
                    let src = &col[row..row + oh * ow];
                    let y_off = (ky * cfg.dilation.0) as isize - cfg.padding.0 as isize;
                    let x_off = (kx * cfg.dilation.1) as isize - cfg.padding.1 as isize;
                    let (x_lo, x_hi) = valid_range(ow, s, x_off, w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + y_off;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let row_src = &src[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let start = (x_lo as isize + x_off) as usize;
                            for (d, v) in dst[start..start + x_hi - x_lo]
                                .iter_mut()
                                .zip(&row_src[x_lo..x_hi])
                            {
                                *d += v;
                            }
                        } else {
                            for (ox, v) in row_src.iter().enumerate().take(x_hi).skip(x_lo) {
                                dst[((ox * s) as isize + x_off) as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + offset` is inside `0..width`.
fn valid_range(ow: usize, stride: usize, offset: isize, width: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = (width as isize - offset + s - 1) / s;
    let lo = lo.clamp(0, ow as isize) as usize;
    let hi = hi.clamp(0, ow as isize) as usize;
    (lo, hi.max(lo))
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ShapeError> {
        let cfg = self.cfg;
        if x.c() != cfg.in_channels {
            return Err(ShapeError::new(format!(
                "conv expects {} input channels, got {:?}",
                cfg.in_channels,
                x.shape()
            )));
        }
        let (oh, ow) = cfg.output_size(x.h(), x.w());
        let mut y = Tensor::zeros([x.n(), cfg.out_channels, oh, ow]);
        let (cout, k, npix) = (cfg.out_per_group(), cfg.patch_len(), oh * ow);
        let mut col = if cfg.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; k * npix]
        };
        for n in 0..x.n() {
            for g in 0..cfg.groups {
                let w = &self.weight.value[g * cout * k..(g + 1) * cout * k];
                let out = &mut y.item_mut(n)[g * cout * npix..(g + 1) * cout * npix];
                if cfg.is_pointwise() {
                    let input = &x.item(n)[g * k * npix..(g + 1) * k * npix];
                    matmul(cout, npix, k, w, false, input, false, out, false);
                } else {
                    self.im2col(x, n, g, &mut col);
                    matmul(cout, npix, k, w, false, &col, false, out, false);
                }
            }
            if let Some(b) = &self.bias {
                for (c, &bv) in b.value.iter().enumerate() {
                    y.plane_mut(n, c).iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        if mode.record() {
            self.input = Some(x.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = take_cache(&mut self.input, "conv2d");
        let cfg = self.cfg;
        let (oh, ow) = (grad.h(), grad.w());
        let (cout, k, npix) = (cfg.out_per_group(), cfg.patch_len(), oh * ow);
        let mut dx = Tensor::zeros(x.shape());
        let mut col = vec![0.0; k * npix];
        for n in 0..x.n() {
            for g in 0..cfg.groups {
                let dy = &grad.item(n)[g * cout * npix..(g + 1) * cout * npix];
                let wslice = g * cout * k..(g + 1) * cout * k;
                if cfg.is_pointwise() {
                    let input = &x.item(n)[g * k * npix..(g + 1) * k * npix];
                    matmul(
                        cout,
                        k,
                        npix,
                        dy,
                        false,
                        input,
                        true,
                        &mut self.weight.grad[wslice.clone()],
                        true,
                    );
                    let dxi = &mut dx.item_mut(n)[g * k * npix..(g + 1) * k * npix];
                    matmul(
                        k,
                        npix,
                        cout,
                        &self.weight.value[wslice],
                        true,
                        dy,
                        false,
                        dxi,
                        true,
                    );
                } else {
                    self.im2col(&x, n, g, &mut col);
                    matmul(
                        cout,
                        k,
                        npix,
                        dy,
                        false,
                        &col,
                        true,
                        &mut self.weight.grad[wslice.clone()],
                        true,
                    );
                    matmul(
                        k,
                        npix,
                        cout,
                        &self.weight.value[wslice],
                        true,
                        dy,
                        false,
                        &mut col,
                        false,
                    );
                    self.col2im(&col, &mut dx, n, g);
                }
            }
            if let Some(b) = &mut self.bias {
                for (c, bg) in b.grad.iter_mut().enumerate() {
                    *bg += grad.plane(n, c).iter().sum::<f32>();
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
