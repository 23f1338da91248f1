use super::{join, take_cache, Layer, Mode, Param, ParamVisitor};
use crate::tensor::{ShapeError, Tensor};

const EPS: f32 = 1e-5;
const MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<NormCache>,
}

#[derive(Clone, Debug)]
struct NormCache {
    x_hat: Tensor,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Param::new(vec![channels], vec![1.0; channels]),
            beta: Param::new(vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ShapeError> {
        if x.c() != self.channels {
            return Err(ShapeError::new(format!(
                "batch norm over {} channels got {:?}",
                self.channels,
                x.shape()
            )));
        }
        let (n, plane) = (x.n(), x.plane_len());
        let count = (n * plane) as f64;
        let mut y = Tensor::zeros(x.shape());
        let mut x_hat = if mode.record() {
            Tensor::zeros(x.shape())
        } else {
            Tensor::zeros([0, 0, 0, 0])
        };
        let mut inv_stds = vec![0.0; self.channels];
        for c in 0..self.channels {
            let (mean, inv_std) = if mode.batch_stats() {
                let mut sum = 0.0f64;
                for b in 0..n {
                    sum += x.plane(b, c).iter().map(|&v| v as f64).sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0f64;
                for b in 0..n {
                    sq += x
                        .plane(b, c)
                        .iter()
                        .map(|&v| (v as f64 - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / count;
                let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                let rm = &mut self.running_mean.value[c];
                *rm = (1.0 - MOMENTUM) * *rm + MOMENTUM * mean as f32;
                let rv = &mut self.running_var.value[c];
                *rv = (1.0 - MOMENTUM) * *rv + MOMENTUM * unbiased as f32;
                (mean as f32, 1.0 / ((var as f32) + EPS).sqrt())
            } else {
                (
                    self.running_mean.value[c],
                    1.0 / (self.running_var.value[c] + EPS).sqrt(),
                )
            };
            inv_stds[c] = inv_std;
            let (g, bt) = (self.gamma.value[c], self.beta.value[c]);
            for b in 0..n {
                let src = x.plane(b, c);
                let dst = y.plane_mut(b, c);
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - mean) * inv_std * g + bt;
                }
                if mode.record() {
                    for (h, &v) in x_hat.plane_mut(b, c).iter_mut().zip(src) {
                        *h = (v - mean) * inv_std;
                    }
                }
            }
        }
        if mode.record() {
            self.cache = Some(NormCache {
                x_hat,
                inv_std: inv_stds,
                batch_stats: mode.batch_stats(),
            });
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = take_cache(&mut self.cache, "batch_norm");
        let (n, plane) = (grad.n(), grad.plane_len());
        let count = (n * plane) as f32;
        let mut dx = Tensor::zeros(grad.shape());
        for c in 0..self.channels {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for b in 0..n {
                for (&dy, &xh) in grad.plane(b, c).iter().zip(cache.x_hat.plane(b, c)) {
                    sum_dy += dy as f64;
                    sum_dy_xhat += (dy * xh) as f64;
                }
            }
            self.gamma.grad[c] += sum_dy_xhat as f32;
            self.beta.grad[c] += sum_dy as f32;
            let scale = self.gamma.value[c] * cache.inv_std[c];
            if cache.batch_stats {
                let mean_dy = sum_dy as f32 / count;
                let mean_dy_xhat = sum_dy_xhat as f32 / count;
                for b in 0..n {
                    let xh = cache.x_hat.plane(b, c);
                    let dy = grad.plane(b, c);
                    for ((d, &g), &h) in dx.plane_mut(b, c).iter_mut().zip(dy).zip(xh) {
                        *d = scale * (g - mean_dy - h * mean_dy_xhat);
                    }
                }
            } else {
                for b in 0..n {
                    for (d, &g) in dx.plane_mut(b, c).iter_mut().zip(grad.plane(b, c)) {
                        *d = scale * g;
                    }
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
