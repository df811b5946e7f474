use super::{GradStore, NumericsError, ParamStore, Result, Tensor};

/// RMSProp with a running mean of squared gradients.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    acc: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        RmsProp {
            lr,
            decay: 0.9,
            eps: 1e-8,
            acc: params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect(),
        }
    }

    pub fn accumulator(&self, index: usize) -> &Tensor {
        &self.acc[index]
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        for id in params.ids().collect::<Vec<_>>() {
            if !params.is_trainable(id) {
                continue;
            }
            let g = grads.get(id);
            let acc = &mut self.acc[id.0];
            let p = params.get_mut(id);
            if g.shape() != p.shape() || acc.shape() != p.shape() {
                return Err(NumericsError::ShapeMismatch(format!(
                    "rmsprop: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let (rho, lr, eps) = (self.decay, self.lr, self.eps);
            for ((pv, av), &gv) in p.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
                *av = rho * *av + (1.0 - rho) * gv * gv;
                *pv -= lr * gv / (av.sqrt() + eps);
            }
            if !p.all_finite() {
                return Err(NumericsError::NonFinite("rmsprop"));
            }
        }
        Ok(())
    }
}
