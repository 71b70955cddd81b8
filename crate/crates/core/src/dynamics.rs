//! Bilinear net-flow compartment model and its fixed-step RK4 integrator.
//!
//! For `K` compartments holding percentages `A_1..A_K`, the rate of change is
//!
//! ```text
//! A_i'(t) = sum_{j != i} gamma[j][i] * A_j(t) * A_i(t)
//! ```
//!
//! with `gamma` antisymmetric, so a positive `gamma[i][j]` moves population
//! from compartment `i` to compartment `j`. Antisymmetry makes the total
//! conserved; for `K = 3` this is the three-attitude model with free rates
//! `(gamma12, gamma13, gamma23)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default internal RK4 step, in years.
pub const DEFAULT_RK_STEP: f64 = 0.005;

/// Compartments below this value (percent) are reported as divergence.
pub const NEGATIVITY_FLOOR: f64 = -1e-6;

const SUM_TOLERANCE: f64 = 1e-9;

/// Population split across compartments at one instant, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompartmentState {
    pub time: f64,
    pub values: Vec<f64>,
}

impl CompartmentState {
    /// Builds a state after checking non-negativity and the 100 % total.
    pub fn new(time: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "state needs at least 2 compartments, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "compartment value {v} is negative or not finite"
            )));
        }
        let total: f64 = values.iter().sum();
        if (total - 100.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "compartments sum to {total}, expected 100"
            )));
        }
        Ok(Self { time, values })
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Antisymmetric matrix of net transfer rates, in 1/(percent * year).
///
/// Only the strict upper triangle is stored conceptually; the full row-major
/// matrix is kept so the derivative loop can index it directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    k: usize,
    gamma: Vec<f64>,
}

impl GammaParams {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            gamma: vec![0.0; k * k],
        }
    }

    /// Number of free rates for `k` compartments.
    pub fn free_len(k: usize) -> usize {
        k * (k - 1) / 2
    }

    /// Builds the matrix from the strict upper triangle, read row by row
    /// (`gamma12, gamma13, ..., gamma1K, gamma23, ...`).
    pub fn from_upper(k: usize, upper: &[f64]) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("need k >= 2, got {k}")));
        }
        if upper.len() != Self::free_len(k) {
            return Err(Error::InvalidArgument(format!(
                "expected {} free rates for k = {k}, got {}",
                Self::free_len(k),
                upper.len()
            )));
        }
        let mut gamma = vec![0.0; k * k];
        let mut it = upper.iter();
        for i in 0..k {
            for j in (i + 1)..k {
                let g = *it.next().expect("length checked above");
                gamma[i * k + j] = g;
                gamma[j * k + i] = -g;
            }
        }
        Ok(Self { k, gamma })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Net rate from compartment `i` to compartment `j`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.gamma[i * self.k + j]
    }

    pub fn upper(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::free_len(self.k));
        for i in 0..self.k {
            for j in (i + 1)..self.k {
                out.push(self.get(i, j));
            }
        }
        out
    }
}

/// Model states sampled on an increasing time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: Vec<f64>,
    pub states: Vec<CompartmentState>,
}

impl Trajectory {
    /// Values of compartment `c` along the grid.
    pub fn series(&self, c: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.values[c]).collect()
    }

    /// `K x len(grid)` matrix, one row per compartment.
    pub fn by_compartment(&self) -> Vec<Vec<f64>> {
        let k = self.states.first().map_or(0, CompartmentState::k);
        (0..k).map(|c| self.series(c)).collect()
    }
}

fn derivative_into(values: &[f64], params: &GammaParams, out: &mut [f64]) {
    let k = params.k;
    for i in 0..k {
        let mut acc = 0.0;
        for j in 0..k {
            if j != i {
                acc += params.gamma[j * k + i] * values[j];
            }
        }
        out[i] = acc * values[i];
    }
}

/// Instantaneous rates of change (percent per year) at `state`.
pub fn derivative(state: &CompartmentState, params: &GammaParams) -> Result<Vec<f64>> {
    if state.k() != params.k {
        return Err(Error::InvalidArgument(format!(
            "state has {} compartments but params have {}",
            state.k(),
            params.k
        )));
    }
    let mut out = vec![0.0; params.k];
    derivative_into(&state.values, params, &mut out);
    Ok(out)
}

/// Fixed-step classical RK4 integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integrator {
    pub step: f64,
}

impl Default for Integrator {
    fn default() -> Self {
        Self {
            step: DEFAULT_RK_STEP,
        }
    }
}

struct Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Scratch {
    fn new(k: usize) -> Self {
        Self {
            k1: vec![0.0; k],
            k2: vec![0.0; k],
            k3: vec![0.0; k],
            k4: vec![0.0; k],
            tmp: vec![0.0; k],
        }
    }
}

impl Integrator {
    pub fn new(step: f64) -> Result<Self> {
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "integration step must be positive, got {step}"
            )));
        }
        Ok(Self { step })
    }

    fn rk4_step(&self, y: &mut [f64], h: f64, params: &GammaParams, s: &mut Scratch) {
        let n = y.len();
        derivative_into(y, params, &mut s.k1);
        for i in 0..n {
            s.tmp[i] = y[i] + 0.5 * h * s.k1[i];
        }
        derivative_into(&s.tmp, params, &mut s.k2);
        for i in 0..n {
            s.tmp[i] = y[i] + 0.5 * h * s.k2[i];
        }
        derivative_into(&s.tmp, params, &mut s.k3);
        for i in 0..n {
            s.tmp[i] = y[i] + h * s.k3[i];
        }
        derivative_into(&s.tmp, params, &mut s.k4);
        for i in 0..n {
            y[i] += h / 6.0 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
        }
    }

    /// Integrates from `initial` and reports the state at every grid point.
    ///
    /// Steps of `self.step` are taken until less than one step remains before
    /// the next grid point; the last sub-step is shortened to land on it.
    pub fn integrate(
        &self,
        initial: &CompartmentState,
        params: &GammaParams,
        grid: &[f64],
    ) -> Result<Trajectory> {
        if initial.k() != params.k {
            return Err(Error::InvalidArgument(format!(
                "state has {} compartments but params have {}",
                initial.k(),
                params.k
            )));
        }
        let Some(&t0) = grid.first() else {
            return Err(Error::InvalidArgument("empty time grid".into()));
        };
        if t0 != initial.time {
            return Err(Error::InvalidArgument(format!(
                "grid starts at {t0} but initial state is at {}",
                initial.time
            )));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(
                "time grid must be strictly increasing".into(),
            ));
        }

        if params.k == 3 {
            return self.integrate_three(initial, params, grid);
        }

        let mut scratch = Scratch::new(params.k);
        let mut y = initial.values.clone();
        let mut t = t0;
        let mut states = Vec::with_capacity(grid.len());
        states.push(initial.clone());

        for &target in &grid[1..] {
            loop {
                let remaining = target - t;
                let h = if remaining > self.step * (1.0 + 1e-9) {
                    self.step
                } else {
                    remaining
                };
                self.rk4_step(&mut y, h, params, &mut scratch);
                if h == remaining {
                    t = target;
                } else {
                    t += h;
                }
                if let Some(v) = y.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Divergence {
                        time: t,
                        reason: format!("non-finite compartment value {v}"),
                    });
                }
                if let Some(v) = y.iter().find(|v| **v < NEGATIVITY_FLOOR) {
                    return Err(Error::Divergence {
                        time: t,
                        reason: format!("compartment dropped to {v}"),
                    });
                }
                if t == target {
                    break;
                }
            }
            states.push(CompartmentState {
                time: target,
                values: y.clone(),
            });
        }

        Ok(Trajectory {
            grid: grid.to_vec(),
            states,
        })
    }
}

impl Integrator {
    /// Unrolled path for three compartments; same arithmetic as the generic
    /// loop, term for term.
    fn integrate_three(
        &self,
        initial: &CompartmentState,
        params: &GammaParams,
        grid: &[f64],
    ) -> Result<Trajectory> {
        let g = &params.gamma;
        // Column weights: d_i = A_i * sum_j gamma[j][i] A_j.
        let (g10, g20) = (g[3], g[6]);
        let (g01, g21) = (g[1], g[7]);
        let (g02, g12) = (g[2], g[5]);
        let f = |y: [f64; 3]| -> [f64; 3] {
            [
                (g10 * y[1] + g20 * y[2]) * y[0],
                (g01 * y[0] + g21 * y[2]) * y[1],
                (g02 * y[0] + g12 * y[1]) * y[2],
            ]
        };
        let mut y = [initial.values[0], initial.values[1], initial.values[2]];
        let mut t = grid[0];
        let mut states = Vec::with_capacity(grid.len());
        states.push(initial.clone());

        for &target in &grid[1..] {
            loop {
                let remaining = target - t;
                let h = if remaining > self.step * (1.0 + 1e-9) {
                    self.step
                } else {
                    remaining
                };
                let k1 = f(y);
                let k2 = f([
                    y[0] + 0.5 * h * k1[0],
                    y[1] + 0.5 * h * k1[1],
                    y[2] + 0.5 * h * k1[2],
                ]);
                let k3 = f([
                    y[0] + 0.5 * h * k2[0],
                    y[1] + 0.5 * h * k2[1],
                    y[2] + 0.5 * h * k2[2],
                ]);
                let k4 = f([y[0] + h * k3[0], y[1] + h * k3[1], y[2] + h * k3[2]]);
                for i in 0..3 {
                    y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                if h == remaining {
                    t = target;
                } else {
                    t += h;
                }
                let low = y[0].min(y[1]).min(y[2]);
                if !(y[0].is_finite() && y[1].is_finite() && y[2].is_finite()) {
                    return Err(Error::Divergence {
                        time: t,
                        reason: "non-finite compartment value".into(),
                    });
                }
                if low < NEGATIVITY_FLOOR {
                    return Err(Error::Divergence {
                        time: t,
                        reason: format!("compartment dropped to {low}"),
                    });
                }
                if t == target {
                    break;
                }
            }
            states.push(CompartmentState {
                time: target,
                values: y.to_vec(),
            });
        }
        Ok(Trajectory {
            grid: grid.to_vec(),
            states,
        })
    }

    /// Generic-K path, exposed for cross-checking the unrolled one.
    #[cfg(test)]
    fn integrate_generic(
        &self,
        initial: &CompartmentState,
        params: &GammaParams,
        grid: &[f64],
    ) -> Result<Trajectory> {
        let mut scratch = Scratch::new(params.k);
        let mut y = initial.values.clone();
        let mut t = grid[0];
        let mut states = vec![initial.clone()];
        for &target in &grid[1..] {
            while t < target {
                let remaining = target - t;
                let h = if remaining > self.step * (1.0 + 1e-9) {
                    self.step
                } else {
                    remaining
                };
                self.rk4_step(&mut y, h, params, &mut scratch);
                t = if h == remaining { target } else { t + h };
            }
            states.push(CompartmentState {
                time: target,
                values: y.clone(),
            });
        }
        Ok(Trajectory {
            grid: grid.to_vec(),
            states,
        })
    }
}

/// Integrates with the default step.
pub fn integrate(
    initial: &CompartmentState,
    params: &GammaParams,
    grid: &[f64],
) -> Result<Trajectory> {
    Integrator::default().integrate(initial, params, grid)
}
