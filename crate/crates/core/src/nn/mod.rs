//! CPU layers with explicit backward passes.
//!
//! Each layer caches what its backward pass needs during a recording forward
//! pass ([`Mode::Train`] or [`Mode::Probe`]) and accumulates parameter
//! gradients into [`Param::grad`] on `backward`.

mod act;
mod conv;
mod norm;
mod se;

pub use act::{Relu, Sigmoid};
pub(crate) use act::sigmoid;
pub use conv::{Conv2d, Conv2dConfig};
pub use norm::BatchNorm2d;
pub use se::SqueezeExcite;

use crate::tensor::{ShapeError, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// How a forward pass treats normalization statistics and caching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, caches for backward.
    Train,
    /// Running statistics, no caches.
    Eval,
    /// Running statistics with caches, for gradient probes of a frozen network.
    Probe,
}

impl Mode {
    pub fn batch_stats(self) -> bool {
        matches!(self, Mode::Train)
    }

    pub fn record(self) -> bool {
        matches!(self, Mode::Train | Mode::Probe)
    }
}

/// A named learnable tensor, or a non-trainable buffer such as a running mean.
#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param {
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<f32>) -> Self {
        Param {
            shape,
            value,
            grad: Vec::new(),
            trainable: false,
        }
    }

    /// He-normal initialization for a layer with the given fan-in.
    pub fn kaiming(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let len = shape.iter().product();
        let value = (0..len).map(|_| normal.sample(rng) as f32).collect();
        Param::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub type ParamVisitor<'a> = dyn FnMut(&str, &mut Param) + 'a;

pub trait Layer {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ShapeError>;

    /// Consumes the cache of the last recording forward pass and returns the
    /// gradient with respect to its input.
    fn backward(&mut self, grad: &Tensor) -> Tensor;

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn take_cache<T>(slot: &mut Option<T>, layer: &str) -> T {
    slot.take()
        .unwrap_or_else(|| panic!("{layer}: backward called without a recording forward pass"))
}

/// Row-major `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a_t`/`b_t` select whether the stored matrix is the transpose of the operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (a_rs, a_cs) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (b_rs, b_cs) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every element addressed by the
    // strides above, and `c` does not alias `a` or `b`.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            1.0,
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences against the analytic backward pass.

    use super::*;

    /// Scalar objective used by the checks: `sum(y * weights)`.
    pub fn objective(y: &Tensor, weights: &[f32]) -> f64 {
        y.data()
            .iter()
            .zip(weights)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn probe_weights(len: usize, seed: u64) -> Vec<f32> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, probe_weights(n, seed)).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-2)
    }

    /// Central differences at `eps` and `eps / 2`. Returns `None` when the two
    /// disagree, which happens when a ReLU kink lies inside the step.
    fn numeric(mut f: impl FnMut(f32) -> f64, eps: f32, tol: f64) -> Option<f64> {
        let wide = (f(eps) - f(-eps)) / (2.0 * eps as f64);
        let half = eps / 2.0;
        let (up, mid, down) = (f(half), f(0.0), f(-half));
        let narrow = (up - down) / (2.0 * half as f64);
        // A kink right at the probe point is crossed symmetrically by both
        // central differences; the one-sided slopes still disagree there.
        let fwd = (up - mid) / half as f64;
        let bwd = (mid - down) / half as f64;
        let smooth = rel_err(wide, narrow) < tol / 5.0 && rel_err(fwd, bwd) < tol.max(0.05);
        smooth.then_some(narrow)
    }

    /// Checks input and parameter gradients of `layer` in the given mode.
    ///
    /// Points where the objective is not smooth at the step size are skipped;
    /// at most a fifth of the probed points may be skipped.
    pub fn check_layer<L: Layer>(layer: &mut L, x: &Tensor, mode: Mode, tol: f64) {
        let y = layer.forward(x, mode).unwrap();
        let w = probe_weights(y.numel(), 99);
        let g = Tensor::from_vec(y.shape(), w.clone()).unwrap();
        layer.visit_params("", &mut |_, p| p.zero_grad());
        let dx = layer.backward(&g);

        let eps = 1e-2f32;
        // Running statistics must not drift between evaluations.
        let snapshot = snapshot_buffers(layer);
        let eval = |layer: &mut L, x: &Tensor| -> f64 {
            restore_buffers(layer, &snapshot);
            let y = layer.forward(x, mode).unwrap();
            if mode.record() {
                layer.backward(&Tensor::zeros(y.shape()));
            }
            objective(&y, &w)
        };
        let (mut probed, mut skipped) = (0usize, 0usize);

        let stride = (x.numel() / 40).max(1);
        for i in (0..x.numel()).step_by(stride) {
            probed += 1;
            let num = numeric(
                |d| {
                    let mut xp = x.clone();
                    xp.data_mut()[i] += d;
                    eval(layer, &xp)
                },
                eps,
                tol,
            );
            let ana = dx.data()[i] as f64;
            match num {
                Some(num) => assert!(
                    rel_err(num, ana) < tol,
                    "input grad {i}: numeric {num} analytic {ana}"
                ),
                None => skipped += 1,
            }
        }

        let mut names = Vec::new();
        layer.visit_params("", &mut |name, p| {
            if p.trainable {
                names.push((name.to_string(), p.grad.clone()));
            }
        });
        for (name, grads) in names {
            let stride = (grads.len() / 20).max(1);
            for i in (0..grads.len()).step_by(stride) {
                probed += 1;
                let num = numeric(
                    |d| {
                        let set = |layer: &mut L, delta: f32| {
                            layer.visit_params("", &mut |n, p| {
                                if n == name {
                                    p.value[i] += delta;
                                }
                            })
                        };
                        set(layer, d);
                        let v = eval(layer, x);
                        set(layer, -d);
                        v
                    },
                    eps,
                    tol,
                );
                let ana = grads[i] as f64;
                match num {
                    Some(num) => assert!(
                        rel_err(num, ana) < tol,
                        "param {name}[{i}]: numeric {num} analytic {ana}"
                    ),
                    None => skipped += 1,
                }
            }
        }
        assert!(
            skipped * 5 <= probed,
            "{skipped} of {probed} probes hit non-smooth points"
        );
    }

    fn snapshot_buffers<L: Layer>(layer: &mut L) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        layer.visit_params("", &mut |n, p| {
            if !p.trainable {
                out.push((n.to_string(), p.value.clone()));
            }
        });
        out
    }

    fn restore_buffers<L: Layer>(layer: &mut L, snap: &[(String, Vec<f32>)]) {
        layer.visit_params("", &mut |n, p| {
            if let Some((_, v)) = snap.iter().find(|(name, _)| name == n) {
                p.value.copy_from_slice(v);
            }
        });
    }
}
