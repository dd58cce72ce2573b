use serde::{Deserialize, Serialize};

use super::tape::ParamGrad;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Classical momentum SGD state. Weight decay is folded into the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub velocity: Vec<Tensor>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptState {
    pub fn new<'p>(params: impl IntoIterator<Item = &'p Tensor>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptState {
            velocity: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
            lr,
            momentum,
            weight_decay,
        }
    }
}

/// One update per parameter:
///
/// ```text
/// g' = g + weight_decay * theta
/// v  = momentum * v + g'
/// theta -= lr * v
/// ```
///
/// Non-finite gradients abort the step before anything is modified.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptState) -> Result<()> {
    check_step(
        params,
        state,
        grads.iter().map(|g| (g.shape().to_vec(), g.all_finite())),
    )?;
    let (lr, mu, wd) = (state.lr, state.momentum, state.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        update_dense(p.data_mut(), v.data_mut(), g.data(), lr, mu, wd);
    }
    Ok(())
}

/// [`sgd_step`] for gradients from [`Tape::backward_factored`](super::Tape::backward_factored).
/// Rank-1 gradients are consumed row by row; the result is bit-identical to
/// `sgd_step` on the materialized gradients.
pub fn sgd_step_factored(params: &mut [Tensor], grads: &[ParamGrad], state: &mut OptState) -> Result<()> {
    check_step(params, state, grads.iter().map(|g| (g.shape(), g.all_finite())))?;
    let (lr, mu, wd) = (state.lr, state.momentum, state.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        match g {
            ParamGrad::Dense(t) => update_dense(p.data_mut(), v.data_mut(), t.data(), lr, mu, wd),
            ParamGrad::Outer { u, v: cols } => {
                let k = cols.len();
                let rows = p.data_mut().chunks_exact_mut(k).zip(v.data_mut().chunks_exact_mut(k));
                for (&ui, (prow, vrow)) in u.iter().zip(rows) {
                    if ui == 0.0 {
                        for (pv, vv) in prow.iter_mut().zip(vrow) {
                            let gd = 0.0 + wd * *pv;
                            *vv = mu * *vv + gd;
                            *pv -= lr * *vv;
                        }
                    } else {
                        for ((pv, cv), vv) in prow.iter_mut().zip(cols).zip(vrow) {
                            let gd = ui * cv + wd * *pv;
                            *vv = mu * *vv + gd;
                            *pv -= lr * *vv;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Validates shapes and finiteness before anything is modified.
fn check_step(
    params: &[Tensor],
    state: &OptState,
    grads: impl ExactSizeIterator<Item = (Vec<usize>, bool)>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "{} params, {} grads, {} velocities",
                params.len(),
                grads.len(),
                state.velocity.len()
            ),
        ));
    }
    for (i, ((p, (gshape, finite)), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.shape() != gshape.as_slice() || p.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "parameter {i}: {:?} vs grad {gshape:?} vs velocity {:?}",
                    p.shape(),
                    v.shape()
                ),
            ));
        }
        if !finite {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
        }
    }
    Ok(())
}

fn update_dense(p: &mut [f64], vel: &mut [f64], g: &[f64], lr: f64, mu: f64, wd: f64) {
    for ((pv, gv), vv) in p.iter_mut().zip(g).zip(vel) {
        let gd = gv + wd * *pv;
        *vv = mu * *vv + gd;
        *pv -= lr * *vv;
    }
}
