//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the loss on a frozen tape, so it is
//! independent of every backward rule it is used to verify.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;

use super::params::{Ctx, ParamId, ParamStore, Trainable};
use super::tape::Var;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    /// Check at most this many coordinates per parameter tensor (`None` = all).
    pub max_per_param: Option<usize>,
    /// Gradients below this magnitude on both sides are compared absolutely.
    pub abs_floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_per_param: None,
            abs_floor: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < abs_floor {
        diff / abs_floor
    } else {
        diff / scale
    }
}

/// Compares tape gradients of the scalar `loss_fn` against central differences
/// for the parameters in `ids`.
pub fn gradcheck<F, R>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    loss_fn: F,
    config: &GradcheckConfig,
    rng: &mut R,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let grads = {
        let mut ctx = Ctx::new(store, Trainable::Only(ids.to_vec()));
        let loss = loss_fn(&mut ctx)?;
        ctx.param_grads(loss)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut ctx = Ctx::frozen(store);
        let loss = loss_fn(&mut ctx)?;
        Ok(ctx.value(loss).item())
    };
    let mut report = GradcheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for &id in ids {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match config.max_per_param {
            Some(k) if k < n => {
                let mut c = sample(rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[c]);
            let orig = store.get(id).data()[c];
            store.get_mut(id).data_mut()[c] = orig + config.step;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[c] = orig - config.step;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            let rel = relative_error(analytic, numeric, config.abs_floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((store.name(id).to_string(), c, analytic, numeric));
            }
        }
    }
    Ok(report)
}

