use super::{take_cache, Layer, Mode, ParamVisitor};
use crate::tensor::{ShapeError, Tensor};

#[derive(Clone, Debug, Default)]
pub struct Relu {
    output: Option<Tensor>,
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ShapeError> {
        let y = x.map(|v| v.max(0.0));
        if mode.record() {
            self.output = Some(y.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let y = take_cache(&mut self.output, "relu");
        let mut dx = grad.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
            if v <= 0.0 {
                *d = 0.0;
            }
        }
        dx
    }

    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamVisitor<'_>) {}
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sigmoid {
    output: Option<Tensor>,
}

impl Layer for Sigmoid {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ShapeError> {
        let y = x.map(sigmoid);
        if mode.record() {
            self.output = Some(y.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let y = take_cache(&mut self.output, "sigmoid");
        let mut dx = grad.clone();
        for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
            *d *= s * (1.0 - s);
        }
        dx
    }

    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamVisitor<'_>) {}
}
