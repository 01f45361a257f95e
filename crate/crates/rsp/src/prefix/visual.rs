//! Visual prefix updates: signed-gradient ascent with clipping, and the
//! zeroth-order symmetric-difference gradient estimator for handles without
//! gradient access.

use crate::access::{AccessLevel, ModelHandle, SelectionTask};
use crate::prefix::{PixelGrid, Prefix};
use crate::rng;

use super::driver::OptimizeError;
use super::OptimizerConfig;

/// One projected-gradient step: every pixel moves by exactly one step in
/// the ascent direction of `log P(target)` (or stays put where the gradient
/// is exactly zero), then clips to `[0, 255]`.
pub fn pgd_step(
    reference: &ModelHandle,
    x: &PixelGrid,
    task: &SelectionTask,
    target: usize,
) -> Result<PixelGrid, OptimizeError> {
    if !reference.level().allows(AccessLevel::Gradient) {
        return Err(OptimizeError::IncompatibleMode {
            mode: "pgd".into(),
            required: AccessLevel::Gradient,
            actual: reference.level(),
        });
    }
    let grad = reference.selection_grad_pixels(x, task, target)?;
    Ok(apply_sign_step(x, &grad))
}

/// `clip(x + sign(g), 0, 255)` per coordinate; `sign(0) = 0`.
pub(super) fn apply_sign_step(x: &PixelGrid, grad: &[f64]) -> PixelGrid {
    let data: Vec<u8> = x
        .data()
        .iter()
        .zip(grad)
        .map(|(&p, &g)| {
            if g > 0.0 {
                p.saturating_add(1)
            } else if g < 0.0 {
                p.saturating_sub(1)
            } else {
                p
            }
        })
        .collect();
    PixelGrid::new(x.h(), x.w(), data).expect("same shape")
}

/// Zeroth-order gradient estimate of `log P(target | x, prompt)` via
/// symmetric +-1 perturbations, querying the handle at gray-box access.
pub fn zo_gradient(
    reference: &ModelHandle,
    x: &PixelGrid,
    task: &SelectionTask,
    target: usize,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<f64>, OptimizeError> {
    if !reference.level().allows(AccessLevel::GrayBox) {
        return Err(OptimizeError::IncompatibleMode {
            mode: "zo-pgd".into(),
            required: AccessLevel::GrayBox,
            actual: reference.level(),
        });
    }
    zo_gradient_with(
        |grid| {
            reference
                .selection_log_prob(&Prefix::Pixels(grid.clone()), task, target)
                .map_err(OptimizeError::from)
        },
        x,
        cfg.pool_vlm,
        seed,
    )
}

/// Estimator core over an arbitrary log-probability function, so the
/// statistical properties can be checked against closed-form surrogates
/// without a model in the loop.
///
/// Draws `batch` sign grids `u`, forms `x1 = clip(x + u)` and
/// `x2 = clip(x - u)`, and accumulates per coordinate
/// `(log p(x1) - log p(x2)) / (x1 - x2)`; coordinates where both clips
/// collapsed to the same value contribute zero. Returns the batch mean.
pub fn zo_gradient_with<F>(
    mut log_prob: F,
    x: &PixelGrid,
    batch: usize,
    seed: u64,
) -> Result<Vec<f64>, OptimizeError>
where
    F: FnMut(&PixelGrid) -> Result<f64, OptimizeError>,
{
    use rand::Rng;
    if batch == 0 {
        return Err(OptimizeError::BadConfig("perturbation batch must be >= 1".into()));
    }
    let len = x.data().len();
    let mut acc = vec![0.0; len];
    for b in 0..batch {
        let mut srng = rng::stream(seed, "zo-sign", &[b as u64]);
        let signs: Vec<i8> = (0..len)
            .map(|_| if srng.gen::<bool>() { 1 } else { -1 })
            .collect();
        let plus: Vec<u8> = x
            .data()
            .iter()
            .zip(&signs)
            .map(|(&p, &s)| clip_add(p, s))
            .collect();
        let minus: Vec<u8> = x
            .data()
            .iter()
            .zip(&signs)
            .map(|(&p, &s)| clip_add(p, -s))
            .collect();
        let lp1 = log_prob(&PixelGrid::new(x.h(), x.w(), plus.clone()).expect("shape"))?;
        let lp2 = log_prob(&PixelGrid::new(x.h(), x.w(), minus.clone()).expect("shape"))?;
        let diff = lp1 - lp2;
        for i in 0..len {
            let denom = f64::from(plus[i]) - f64::from(minus[i]);
            if denom != 0.0 {
                acc[i] += diff / denom;
            }
        }
    }
    let inv = 1.0 / batch as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(acc)
}

fn clip_add(p: u8, s: i8) -> u8 {
    if s >= 0 {
        p.saturating_add(s as u8)
    } else {
        p.saturating_sub(s.unsigned_abs())
    }
}
