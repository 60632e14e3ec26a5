//! Central finite-difference verification of analytic gradients.
//!
//! The harness is the independent oracle for every loss in this crate: it
//! re-evaluates the loss as a black box and compares difference quotients
//! against the tape's gradients, coordinate by coordinate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::params::{GradStore, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("loss is not finite at the evaluation point")]
    NonFiniteLoss,
    #[error("non-differentiable point detected at {param}[{coord}]: one-sided slopes {fwd} vs {bwd}")]
    NonDifferentiable { param: String, coord: usize, fwd: f64, bwd: f64 },
    #[error("loss evaluation failed: {0}")]
    Eval(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdMode {
    Central,
    Forward,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Parameter name and flat coordinate of the worst error.
    pub worst: Option<(String, usize)>,
}

pub struct GradCheckConfig {
    pub step: f64,
    pub mode: FdMode,
    /// Cap on coordinates sampled per parameter; 0 means all.
    pub max_coords_per_param: usize,
    pub seed: u64,
    /// Coordinates where both the analytic and numeric values fall below
    /// this threshold are counted as passed: the difference quotient is
    /// pure cancellation noise there (structurally zero gradients, e.g. a
    /// softmax-invariant bias, land in this bucket).
    pub abs_skip_threshold: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            mode: FdMode::Central,
            max_coords_per_param: 0,
            seed: 0,
            abs_skip_threshold: 1e-9,
        }
    }
}

/// Compare `analytic` gradients of `loss_fn` against finite differences.
///
/// Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8). A sign
/// flip between the forward and backward one-sided slopes with both slopes
/// far from zero marks a kink and fails the check outright.
pub fn grad_check(
    loss_fn: &dyn Fn(&ParamStore) -> Result<f64, String>,
    params: &ParamStore,
    analytic: &GradStore,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, GradCheckError> {
    let f0 = loss_fn(params).map_err(GradCheckError::Eval)?;
    if !f0.is_finite() {
        return Err(GradCheckError::NonFiniteLoss);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut coords_checked = 0usize;

    for (id, _, value) in params.iter() {
        let n = value.len();
        let mut coords: Vec<usize> = (0..n).collect();
        if cfg.max_coords_per_param > 0 && n > cfg.max_coords_per_param {
            coords.shuffle(&mut rng);
            coords.truncate(cfg.max_coords_per_param);
        }
        for coord in coords {
            let numeric = match cfg.mode {
                FdMode::Central => {
                    let fp = eval_shifted(loss_fn, params, id, coord, cfg.step)?;
                    let fm = eval_shifted(loss_fn, params, id, coord, -cfg.step)?;
                    let fwd = (fp - f0) / cfg.step;
                    let bwd = (f0 - fm) / cfg.step;
                    if fwd.signum() != bwd.signum() && fwd.abs().min(bwd.abs()) > 1e-2 {
                        return Err(GradCheckError::NonDifferentiable {
                            param: params.name(id).to_string(),
                            coord,
                            fwd,
                            bwd,
                        });
                    }
                    (fp - fm) / (2.0 * cfg.step)
                }
                FdMode::Forward => {
                    let fp = eval_shifted(loss_fn, params, id, coord, cfg.step)?;
                    (fp - f0) / cfg.step
                }
            };
            let a = analytic.get(id).as_slice().expect("contiguous grad")[coord];
            coords_checked += 1;
            if a.abs() < cfg.abs_skip_threshold && numeric.abs() < cfg.abs_skip_threshold {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((params.name(id).to_string(), coord));
            }
        }
    }

    Ok(GradCheckReport { max_rel_err, coords_checked, worst })
}

fn eval_shifted(
    loss_fn: &dyn Fn(&ParamStore) -> Result<f64, String>,
    params: &ParamStore,
    id: ParamId,
    coord: usize,
    delta: f64,
) -> Result<f64, GradCheckError> {
    let mut shifted = params.clone();
    shifted.get_mut(id).as_slice_mut().expect("contiguous param")[coord] += delta;
    let v = loss_fn(&shifted).map_err(GradCheckError::Eval)?;
    if !v.is_finite() {
        return Err(GradCheckError::NonFiniteLoss);
    }
    Ok(v)
}
