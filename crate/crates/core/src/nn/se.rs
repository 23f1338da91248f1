use super::act::sigmoid;
use super::{join, take_cache, Layer, Mode, Param, ParamVisitor};
use crate::tensor::{ShapeError, Tensor};
use rand::Rng;

/// Squeeze-and-excitation channel gating.
///
/// The excitation output layer starts at zero, so every gate equals
/// `sigmoid(0) = 0.5` until training moves it.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    channels: usize,
    hidden: usize,
    pub fc1_w: Param,
    pub fc1_b: Param,
    pub fc2_w: Param,
    pub fc2_b: Param,
    /// When set, backward treats the gates as constants. Used to probe the
    /// receptive field of the convolutional path alone.
    pub detach_gate: bool,
    cache: Option<SeCache>,
}

#[derive(Clone, Debug)]
struct SeCache {
    x: Tensor,
    squeezed: Vec<f32>,
    hidden: Vec<f32>,
    gate: Vec<f32>,
}

impl SqueezeExcite {
    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        SqueezeExcite {
            channels,
            hidden,
            fc1_w: Param::kaiming(vec![hidden, channels], channels, rng),
            fc1_b: Param::new(vec![hidden], vec![0.0; hidden]),
            fc2_w: Param::new(vec![channels, hidden], vec![0.0; channels * hidden]),
            fc2_b: Param::new(vec![channels], vec![0.0; channels]),
            detach_gate: false,
            cache: None,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Per-(item, channel) gates for `x`, plus the intermediate activations.
    fn gates(&self, x: &Tensor) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let (n, c, h) = (x.n(), self.channels, self.hidden);
        let plane = x.plane_len() as f32;
        let mut squeezed = vec![0.0; n * c];
        for b in 0..n {
            for ch in 0..c {
                squeezed[b * c + ch] = x.plane(b, ch).iter().sum::<f32>() / plane;
            }
        }
        let mut hidden = vec![0.0; n * h];
        let mut gate = vec![0.0; n * c];
        for b in 0..n {
            let s = &squeezed[b * c..(b + 1) * c];
            for j in 0..h {
                let w = &self.fc1_w.value[j * c..(j + 1) * c];
                let z: f32 = w.iter().zip(s).map(|(a, b)| a * b).sum::<f32>() + self.fc1_b.value[j];
                hidden[b * h + j] = z.max(0.0);
            }
            let hv = &hidden[b * h..(b + 1) * h];
            for ch in 0..c {
                let w = &self.fc2_w.value[ch * h..(ch + 1) * h];
                let z: f32 = w.iter().zip(hv).map(|(a, b)| a * b).sum::<f32>() + self.fc2_b.value[ch];
                gate[b * c + ch] = sigmoid(z);
            }
        }
        (squeezed, hidden, gate)
    }

    /// Gates computed for the most recent recording forward pass.
    pub fn last_gates(&self) -> Option<&[f32]> {
        self.cache.as_ref().map(|c| c.gate.as_slice())
    }
}

impl Layer for SqueezeExcite {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ShapeError> {
        if x.c() != self.channels {
            return Err(ShapeError::new(format!(
                "squeeze-excite over {} channels got {:?}",
                self.channels,
                x.shape()
            )));
        }
        let (squeezed, hidden, gate) = self.gates(x);
        let mut y = x.clone();
        for b in 0..x.n() {
            for ch in 0..self.channels {
                let g = gate[b * self.channels + ch];
                y.plane_mut(b, ch).iter_mut().for_each(|v| *v *= g);
            }
        }
        if mode.record() {
            self.cache = Some(SeCache {
                x: x.clone(),
                squeezed,
                hidden,
                gate,
            });
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = take_cache(&mut self.cache, "squeeze_excite");
        let (n, c, h) = (grad.n(), self.channels, self.hidden);
        let plane = grad.plane_len() as f32;
        let mut dx = grad.clone();
        let mut d_squeezed = vec![0.0f32; n * c];
        for b in 0..n {
            for ch in 0..c {
                let g = cache.gate[b * c + ch];
                let d_gate: f32 = grad
                    .plane(b, ch)
                    .iter()
                    .zip(cache.x.plane(b, ch))
                    .map(|(a, b)| a * b)
                    .sum();
                dx.plane_mut(b, ch).iter_mut().for_each(|v| *v *= g);
                // Back through the sigmoid.
                let dz2 = d_gate * g * (1.0 - g);
                self.fc2_b.grad[ch] += dz2;
                let hv = &cache.hidden[b * h..(b + 1) * h];
                for j in 0..h {
                    self.fc2_w.grad[ch * h + j] += dz2 * hv[j];
                }
                d_squeezed[b * c + ch] = dz2;
            }
            // d_squeezed currently holds dz2; push it through fc2 and fc1.
            let dz2 = d_squeezed[b * c..(b + 1) * c].to_vec();
            let mut dz1 = vec![0.0f32; h];
            for (j, dz) in dz1.iter_mut().enumerate() {
                if cache.hidden[b * h + j] <= 0.0 {
                    continue;
                }
                *dz = (0..c).map(|ch| dz2[ch] * self.fc2_w.value[ch * h + j]).sum();
            }
            let s = &cache.squeezed[b * c..(b + 1) * c];
            for j in 0..h {
                self.fc1_b.grad[j] += dz1[j];
                for ch in 0..c {
                    self.fc1_w.grad[j * c + ch] += dz1[j] * s[ch];
                }
            }
            for ch in 0..c {
                d_squeezed[b * c + ch] = (0..h)
                    .map(|j| dz1[j] * self.fc1_w.value[j * c + ch])
                    .sum::<f32>();
            }
        }
        if !self.detach_gate {
            for b in 0..n {
                for ch in 0..c {
                    let ds = d_squeezed[b * c + ch] / plane;
                    dx.plane_mut(b, ch).iter_mut().for_each(|v| *v += ds);
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "fc1.weight"), &mut self.fc1_w);
        f(&join(prefix, "fc1.bias"), &mut self.fc1_b);
        f(&join(prefix, "fc2.weight"), &mut self.fc2_w);
        f(&join(prefix, "fc2.bias"), &mut self.fc2_b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_layer, probe_weights, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gates_start_uniform_at_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut se = SqueezeExcite::new(32, 16, &mut rng);
        let x = random_tensor([2, 32, 4, 4], 1);
        let y = se.forward(&x, Mode::Train).unwrap();
        assert!(se.last_gates().unwrap().iter().all(|&g| g == 0.5));
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b * 0.5);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut se = SqueezeExcite::new(8, 2, &mut rng);
        se.fc2_w.value = probe_weights(se.fc2_w.len(), 4);
        se.fc1_b.value = vec![0.3; se.hidden()];
        let x = random_tensor([2, 8, 3, 3], 5);
        check_layer(&mut se, &x, Mode::Train, 2e-2);
    }
}
