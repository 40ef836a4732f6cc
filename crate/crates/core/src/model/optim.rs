//! SGD with momentum and L2 weight decay over the flattened parameter vector.

use super::ModelParams;
use crate::error::{Error, Result};

/// Momentum buffer, laid out like [`ModelParams::to_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            velocity: vec![0.0; params.num_params()],
        }
    }
}

/// `v <- momentum v + g + weight_decay p`, `p <- p - lr v`, then prototype rows
/// are renormalized to unit length.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut p = params.to_flat();
    let g = grads.to_flat();
    if g.len() != p.len() || state.velocity.len() != p.len() {
        return Err(Error::Shape {
            context: "sgd_step",
            expected: format!("{} parameters", p.len()),
            got: format!("grads {}, velocity {}", g.len(), state.velocity.len()),
        });
    }
    for ((pi, gi), vi) in p.iter_mut().zip(&g).zip(state.velocity.iter_mut()) {
        *vi = momentum * *vi + gi + weight_decay * *pi;
        *pi -= lr * *vi;
    }
    params.set_flat(&p)?;
    crate::losses::normalize_rows(&mut params.prototypes)
}
