//! Momentum SGD and the learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::NetworkParams;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const INITIAL_LR: f64 = 1e-3;
pub const FINAL_LR: f64 = 1e-6;

/// Geometric decay from [`INITIAL_LR`] at epoch 0 to [`FINAL_LR`] at the last
/// epoch. Runs shorter than two epochs use [`INITIAL_LR`] throughout.
pub fn lr_schedule(epoch: usize, total_epochs: usize) -> f64 {
    lr_schedule_between(epoch, total_epochs, INITIAL_LR, FINAL_LR)
}

/// Geometric decay from `initial` at epoch 0 to `last` at the final epoch.
pub fn lr_schedule_between(epoch: usize, total_epochs: usize, initial: f64, last: f64) -> f64 {
    if total_epochs < 2 {
        return initial;
    }
    let t = epoch as f64 / (total_epochs - 1) as f64;
    initial * (last / initial).powf(t)
}

/// `v <- momentum * v + g; p <- p - lr * v` for every parameter, then clears
/// the gradients. Parameters without a gradient are treated as having a zero
/// gradient.
pub fn sgd_step(params: &mut NetworkParams, learning_rate: f64, momentum: f64) -> Result<()> {
    sgd_step_filtered(params, learning_rate, momentum, |_| true)
}

/// [`sgd_step`] restricted to parameters whose name satisfies `select`. The
/// others, and their momentum buffers, are left untouched.
pub fn sgd_step_filtered(
    params: &mut NetworkParams,
    learning_rate: f64,
    momentum: f64,
    select: impl Fn(&str) -> bool,
) -> Result<()> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate {learning_rate} must be positive"
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid(format!(
            "momentum {momentum} outside [0, 1)"
        )));
    }
    let named: Vec<_> = params
        .named_params()
        .into_iter()
        .map(|(name, p)| (name, p.clone()))
        .collect();
    let grads: Vec<Option<Vec<f64>>> = named
        .iter()
        .map(|(name, p)| if select(name) { p.grad() } else { None })
        .collect();
    for ((name, _), g) in named.iter().zip(&grads) {
        if let Some(g) = g {
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "gradient of {name}[{bad}] is {}",
                    g[bad]
                )));
            }
        }
    }
    for (((name, p), g), v) in named.iter().zip(&grads).zip(params.momentum.iter_mut()) {
        if !select(name) {
            continue;
        }
        match g {
            Some(g) => {
                for (vi, gi) in v.iter_mut().zip(g) {
                    *vi = momentum * *vi + gi;
                }
            }
            None => v.iter_mut().for_each(|vi| *vi *= momentum),
        }
        p.update_values(|vals| {
            for (x, vi) in vals.iter_mut().zip(v.iter()) {
                *x -= learning_rate * vi;
            }
        });
        p.zero_grad();
    }
    Ok(())
}
