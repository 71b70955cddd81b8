//! Nelder-Mead simplex maximizer with random restarts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexConfig {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Edge length of the initial simplex along each coordinate.
    pub initial_step: f64,
    pub max_iters: usize,
    /// Stop once the spread of objective values across the simplex is at
    /// most this.
    pub f_tol: f64,
    /// Extra runs started from random perturbations of the incumbent.
    pub restarts: usize,
}

impl Default for SimplexConfig {
    fn default() -> Self {
        Self {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            initial_step: 0.01,
            max_iters: 500,
            f_tol: 1e-8,
            restarts: 3,
        }
    }
}

impl SimplexConfig {
    pub fn validate(&self) -> Result<()> {
        let coeffs = [
            ("reflection", self.reflection),
            ("expansion", self.expansion),
            ("contraction", self.contraction),
            ("shrink", self.shrink),
            ("initial_step", self.initial_step),
        ];
        for (name, v) in coeffs {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.expansion <= self.reflection {
            return Err(Error::Config("expansion must exceed reflection".into()));
        }
        if self.contraction >= 1.0 || self.shrink >= 1.0 {
            return Err(Error::Config(
                "contraction and shrink must be below 1".into(),
            ));
        }
        if !(self.f_tol >= 0.0) {
            return Err(Error::Config("f_tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub argmax: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Cost seen by the minimizer: the negated objective, with NaN and -inf
/// mapped to +inf so that failed evaluations always lose comparisons.
fn cost(value: f64) -> f64 {
    if value.is_nan() {
        f64::INFINITY
    } else {
        -value
    }
}

struct Run {
    best: Vec<f64>,
    cost: f64,
    iterations: usize,
    converged: bool,
}

fn nelder_mead<F>(objective: &mut F, start: &[f64], cfg: &SimplexConfig) -> Result<Run>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = start.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(start.to_vec());
    for i in 0..n {
        let mut v = start.to_vec();
        v[i] += cfg.initial_step;
        simplex.push(v);
    }
    let mut costs: Vec<f64> = simplex.iter().map(|v| cost(objective(v))).collect();
    if costs.iter().all(|c| *c == f64::INFINITY) {
        return Err(Error::Unfittable);
    }

    let mut order: Vec<usize> = (0..=n).collect();
    let mut iterations = 0;
    let mut converged = false;
    let mut centroid = vec![0.0; n];
    let at = |base: &[f64], dir_from: &[f64], coef: f64| -> Vec<f64> {
        // base + coef * (base - dir_from)
        base.iter()
            .zip(dir_from)
            .map(|(b, d)| b + coef * (b - d))
            .collect()
    };

    while iterations < cfg.max_iters {
        order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]));
        let best = order[0];
        let worst = order[n];
        let second = order[n - 1];
        let spread = costs[worst] - costs[best];
        if spread.is_finite() && spread <= cfg.f_tol {
            converged = true;
            break;
        }
        iterations += 1;

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &i in &order[..n] {
            for (c, x) in centroid.iter_mut().zip(&simplex[i]) {
                *c += x;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= n as f64);

        let reflected = at(&centroid, &simplex[worst], cfg.reflection);
        let c_r = cost(objective(&reflected));

        if c_r < costs[best] {
            let expanded: Vec<f64> = centroid
                .iter()
                .zip(&reflected)
                .map(|(c, r)| c + cfg.expansion * (r - c))
                .collect();
            let c_e = cost(objective(&expanded));
            if c_e < c_r {
                simplex[worst] = expanded;
                costs[worst] = c_e;
            } else {
                simplex[worst] = reflected;
                costs[worst] = c_r;
            }
            continue;
        }
        if c_r < costs[second] {
            simplex[worst] = reflected;
            costs[worst] = c_r;
            continue;
        }

        let (contracted, accept) = if c_r < costs[worst] {
            let x: Vec<f64> = centroid
                .iter()
                .zip(&reflected)
                .map(|(c, r)| c + cfg.contraction * (r - c))
                .collect();
            let c_c = cost(objective(&x));
            ((x, c_c), c_c <= c_r)
        } else {
            let x: Vec<f64> = centroid
                .iter()
                .zip(&simplex[worst])
                .map(|(c, w)| c + cfg.contraction * (w - c))
                .collect();
            let c_c = cost(objective(&x));
            ((x, c_c), c_c < costs[worst])
        };
        if accept {
            simplex[worst] = contracted.0;
            costs[worst] = contracted.1;
            continue;
        }

        let anchor = simplex[best].clone();
        for &i in &order[1..] {
            for (x, a) in simplex[i].iter_mut().zip(&anchor) {
                *x = a + cfg.shrink * (*x - a);
            }
            costs[i] = cost(objective(&simplex[i]));
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| costs[a].total_cmp(&costs[b]))
        .expect("simplex is non-empty");
    Ok(Run {
        best: simplex[best].clone(),
        cost: costs[best],
        iterations,
        converged,
    })
}

/// Maximizes `objective` from `start`.
///
/// The objective may return `-inf` (or NaN) for points where it cannot be
/// evaluated. After the first run, `config.restarts` further runs start
/// from uniform perturbations of the incumbent within
/// `+-5 * initial_step` per coordinate, drawn from `rng`; the best point
/// over all runs is returned.
pub fn maximize<F, R>(
    mut objective: F,
    start: &[f64],
    config: &SimplexConfig,
    rng: &mut R,
) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    config.validate()?;
    if start.is_empty() {
        return Err(Error::InvalidArgument("empty start point".into()));
    }
    let mut incumbent = nelder_mead(&mut objective, start, config)?;
    let mut iterations = incumbent.iterations;
    let radius = 5.0 * config.initial_step;

    for _ in 0..config.restarts {
        let from: Vec<f64> = incumbent
            .best
            .iter()
            .map(|x| x + rng.gen_range(-radius..=radius))
            .collect();
        let run = match nelder_mead(&mut objective, &from, config) {
            Ok(run) => run,
            Err(Error::Unfittable) => continue,
            Err(e) => return Err(e),
        };
        iterations += run.iterations;
        if run.cost < incumbent.cost {
            incumbent = run;
        }
    }

    if !incumbent.cost.is_finite() {
        return Err(Error::Unfittable);
    }
    Ok(OptimResult {
        argmax: incumbent.best,
        value: -incumbent.cost,
        iterations,
        converged: incumbent.converged,
    })
}
