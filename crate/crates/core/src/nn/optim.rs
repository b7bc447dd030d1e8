use super::{Gradients, ModelParams, Scalar};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- mu v + (g + lambda theta)`, `theta <- theta - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per parameter slice, in [`ModelParams::param_slices`] order.
    pub buffers: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &ModelParams<T>, momentum: f64, weight_decay: f64) -> Self {
        SgdState {
            momentum,
            weight_decay,
            buffers: params.param_slices().iter().map(|s| vec![T::ZERO; s.len()]).collect(),
        }
    }
}

pub fn sgd_update<T: Scalar>(theta: &mut [T], grad: &[T], buf: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((p, &g), v) in theta.iter_mut().zip(grad).zip(buf.iter_mut()) {
        *v = mu * *v + (g + wd * *p);
        *p -= lr * *v;
    }
}

pub fn sgd_step<T: Scalar>(params: &mut ModelParams<T>, grads: &Gradients<T>, state: &mut SgdState<T>, lr: f64) {
    let (mu, wd) = (state.momentum, state.weight_decay);
    for ((p, g), v) in params
        .param_slices_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(state.buffers.iter_mut())
    {
        sgd_update(p, g, v, lr, mu, wd);
    }
}
