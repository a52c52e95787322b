//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Grads, ParamStore};

/// Denominator floor of the relative error, so coordinates whose gradient is
/// essentially zero are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub n_samples: usize,
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            n_samples: 200,
            step: 1e-5,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checks: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.rel_error < self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordCheck> {
        self.checks.iter().filter(move |c| c.rel_error >= self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    /// The `n` coordinates with the largest relative error.
    pub fn worst(&self, n: usize) -> Vec<&CoordCheck> {
        let mut v: Vec<_> = self.checks.iter().collect();
        v.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        v.truncate(n);
        v
    }

    pub fn params_covered(&self) -> std::collections::BTreeSet<&str> {
        self.checks.iter().map(|c| c.param.as_str()).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `loss` at
/// `n_samples` coordinates. Samples cycle through the parameter tensors so
/// every tensor is covered; within a tensor, half of the picks favour
/// coordinates with a non-zero analytic gradient.
pub fn grad_check<F>(mut loss: F, params: &ParamStore, analytic: &Grads, cfg: GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let ids: Vec<_> = params.ids().collect();
    let mut checks = Vec::with_capacity(cfg.n_samples);
    for s in 0..cfg.n_samples {
        let id = ids[s % ids.len()];
        let g = analytic.get(id);
        let nonzero: Vec<usize> = g
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        let index = if !nonzero.is_empty() && rng.gen_bool(0.5) {
            nonzero[rng.gen_range(0..nonzero.len())]
        } else {
            rng.gen_range(0..g.len())
        };
        let orig = work.get(id).data()[index];
        work.get_mut(id).data_mut()[index] = orig + cfg.step;
        let up = loss(&work);
        work.get_mut(id).data_mut()[index] = orig - cfg.step;
        let down = loss(&work);
        work.get_mut(id).data_mut()[index] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        checks.push(CoordCheck {
            param: params.name(id).to_string(),
            index,
            analytic: g[index],
            numeric,
            rel_error: relative_error(g[index], numeric),
        });
    }
    GradCheckReport { tol: cfg.tol, checks }
}
