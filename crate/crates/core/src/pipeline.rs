//! End-to-end calibration: data percentile vectors, the resample-and-fit
//! ensemble, prefix-size selection of the model confidence band, the band
//! itself on a fine grid, and forward prediction.

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{CompartmentState, GammaParams, Integrator, DEFAULT_RK_STEP};
use crate::error::{Error, Result};
use crate::optimize::{maximize, SimplexConfig};
use crate::rng::{derive_stream, Domain};
use crate::stats::{
    chi_square_pvalue, chi_square_statistic, multinomial_counts, quantile_sorted, QuantileSeries,
    SurveySet,
};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_REPLICATES: usize = 10_000;
pub const DEFAULT_QUANTILE_DRAWS: usize = 100_000;
pub const DEFAULT_GRID_STEP: f64 = 0.05;
pub const MIN_REPLICATES: usize = 100;
pub const MIN_QUANTILE_DRAWS: usize = 1_000;

/// Percentile levels of the 95 % intervals.
pub const LOWER_LEVEL: f64 = 0.025;
pub const UPPER_LEVEL: f64 = 0.975;

/// Initial condition used for each fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IcMode {
    /// The resampled first-survey percentages of that replicate.
    #[default]
    Sampled,
    /// The published first-survey percentages.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Fits with a p-value below this are rejected.
    pub alpha: f64,
    pub rk_step: f64,
    pub ic_mode: IcMode,
    pub simplex: SimplexConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            rk_step: DEFAULT_RK_STEP,
            ic_mode: IcMode::Sampled,
            simplex: SimplexConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.rk_step.is_finite() && self.rk_step > 0.0) {
            return Err(Error::Config(format!(
                "rk step must be positive, got {}",
                self.rk_step
            )));
        }
        self.simplex.validate()
    }
}

/// One fitted parameter vector with its goodness of fit and cached model
/// output at the survey dates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub replicate: u64,
    pub gamma: GammaParams,
    /// Initial condition (percent) at the first survey date.
    pub initial: Vec<f64>,
    /// Smallest per-category p-value.
    pub p_value: f64,
    pub category_pvalues: Vec<f64>,
    /// `K x J` model percentages at the survey dates.
    pub trajectory_at_surveys: Vec<Vec<f64>>,
}

/// Accepted fits, best p-value first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitEnsemble {
    pub accepted: Vec<FitResult>,
    pub total_attempted: usize,
    pub unfittable: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSelection {
    pub k: usize,
    pub m_k: f64,
    /// Lower then upper p-value for each category in turn.
    pub per_pair_pvalues: Vec<f64>,
}

/// Per-category 2.5 / 97.5 percentile envelope over a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub grid: Vec<f64>,
    /// `K x len(grid)`.
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonPoint {
    pub date: NaiveDate,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionCell {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub date: NaiveDate,
    pub t: f64,
    /// One cell per category.
    pub cells: Vec<PredictionCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTable {
    pub categories: Vec<String>,
    pub rows: Vec<PredictionRow>,
}

fn percentile_pair(sorted: &[f64]) -> (f64, f64) {
    (
        quantile_sorted(sorted, LOWER_LEVEL),
        quantile_sorted(sorted, UPPER_LEVEL),
    )
}

/// 2.5 / 97.5 percentiles of resampled survey percentages, per category.
pub fn data_quantiles(surveys: &SurveySet, draws: usize, seed: u64) -> Result<Vec<QuantileSeries>> {
    surveys.validate()?;
    if draws < MIN_QUANTILE_DRAWS {
        return Err(Error::Config(format!(
            "quantile draws must be >= {MIN_QUANTILE_DRAWS}, got {draws}"
        )));
    }
    let k = surveys.k();
    let per_survey: Vec<Vec<(f64, f64)>> = surveys
        .records
        .par_iter()
        .enumerate()
        .map(|(j, rec)| {
            let mut rng = derive_stream(seed, Domain::DataQuantiles, j as u64, 0);
            let mut columns = vec![Vec::with_capacity(draws); k];
            let n = rec.n as f64;
            for _ in 0..draws {
                let counts = multinomial_counts(rec.n, &rec.theta, &mut rng);
                for (col, c) in columns.iter_mut().zip(counts) {
                    col.push(c as f64 * 100.0 / n);
                }
            }
            columns
                .into_iter()
                .map(|mut col| {
                    col.sort_by(f64::total_cmp);
                    percentile_pair(&col)
                })
                .collect()
        })
        .collect();

    Ok((0..k)
        .map(|c| QuantileSeries {
            category: surveys.categories[c].clone(),
            lower: per_survey.iter().map(|s| s[c].0).collect(),
            upper: per_survey.iter().map(|s| s[c].1).collect(),
        })
        .collect())
}

/// Resampled survey percentages for one replicate, `K x J`.
pub fn sample_dataset(surveys: &SurveySet, replicate: u64, master_seed: u64) -> Vec<Vec<f64>> {
    let k = surveys.k();
    let mut data = vec![Vec::with_capacity(surveys.len()); k];
    for (j, rec) in surveys.records.iter().enumerate() {
        let mut rng = derive_stream(master_seed, Domain::ReplicateSample, j as u64, replicate);
        let counts = multinomial_counts(rec.n, &rec.theta, &mut rng);
        let n = rec.n as f64;
        for (row, c) in data.iter_mut().zip(counts) {
            row.push(c as f64 * 100.0 / n);
        }
    }
    data
}

/// Chi-square statistic of each category's data row against the model row.
pub fn category_statistics(data: &[Vec<f64>], model: &[Vec<f64>]) -> Result<Vec<f64>> {
    data.iter()
        .zip(model)
        .map(|(o, e)| chi_square_statistic(o, e))
        .collect()
}

/// Per-category p-values of `data` against `model`; the goodness of fit of
/// a parameter vector is the smallest of them.
pub fn category_pvalues(data: &[Vec<f64>], model: &[Vec<f64>]) -> Result<Vec<f64>> {
    let stats = category_statistics(data, model)?;
    let dof = dof_for(data.first().map_or(0, Vec::len))?;
    Ok(stats
        .into_iter()
        .map(|s| chi_square_pvalue(s, dof))
        .collect())
}

/// Smallest per-category p-value of `data` against `model`.
pub fn min_pvalue(data: &[Vec<f64>], model: &[Vec<f64>]) -> Result<f64> {
    Ok(category_pvalues(data, model)?
        .into_iter()
        .fold(1.0, f64::min))
}

fn dof_for(len: usize) -> Result<u32> {
    if len < 2 {
        return Err(Error::InvalidArgument(
            "goodness of fit needs at least 2 survey dates".into(),
        ));
    }
    Ok((len - 1) as u32)
}

fn model_rows(
    integrator: &Integrator,
    initial: &CompartmentState,
    gamma: &GammaParams,
    grid: &[f64],
) -> Result<Vec<Vec<f64>>> {
    Ok(integrator.integrate(initial, gamma, grid)?.by_compartment())
}

/// Fits the model to an explicit `K x J` dataset on the survey grid.
///
/// Returns `None` when no parameter vector yields a finite objective.
pub fn fit_dataset(
    data: &[Vec<f64>],
    grid: &[f64],
    initial: Vec<f64>,
    replicate: u64,
    master_seed: u64,
    config: &PipelineConfig,
) -> Result<Option<FitResult>> {
    config.validate()?;
    let k = data.len();
    dof_for(grid.len())?;
    let integrator = Integrator::new(config.rk_step)?;
    let ic = match CompartmentState::new(grid[0], initial) {
        Ok(ic) => ic,
        Err(_) => return Ok(None),
    };

    // All categories share the same dof, so the smallest p-value belongs to
    // the largest statistic; maximizing -max(stat) follows the same simplex
    // path without the plateau where p-values round to 1.
    let objective = |x: &[f64]| -> f64 {
        let Ok(gamma) = GammaParams::from_upper(k, x) else {
            return f64::NEG_INFINITY;
        };
        model_rows(&integrator, &ic, &gamma, grid)
            .and_then(|model| category_statistics(data, &model))
            .map_or(f64::NEG_INFINITY, |s| -s.into_iter().fold(0.0, f64::max))
    };

    let mut rng = derive_stream(master_seed, Domain::OptimizerRestart, replicate, 0);
    let start = vec![0.0; GammaParams::free_len(k)];
    let best = match maximize(objective, &start, &config.simplex, &mut rng) {
        Ok(r) => r,
        Err(Error::Unfittable) => return Ok(None),
        Err(e) => return Err(e),
    };

    let gamma = GammaParams::from_upper(k, &best.argmax)?;
    let model = model_rows(&integrator, &ic, &gamma, grid)?;
    let category_pvalues = category_pvalues(data, &model)?;
    let p_value = category_pvalues.iter().cloned().fold(1.0, f64::min);
    Ok(Some(FitResult {
        replicate,
        gamma,
        initial: ic.values,
        p_value,
        category_pvalues,
        trajectory_at_surveys: model,
    }))
}

/// Resamples every survey for `replicate` and fits the model to the result.
pub fn fit_one(
    surveys: &SurveySet,
    replicate: u64,
    master_seed: u64,
    config: &PipelineConfig,
) -> Result<Option<FitResult>> {
    surveys.validate()?;
    let data = sample_dataset(surveys, replicate, master_seed);
    let initial = match config.ic_mode {
        IcMode::Sampled => data.iter().map(|row| row[0]).collect(),
        IcMode::Mean => surveys.records[0].percentages(),
    };
    fit_dataset(
        &data,
        &surveys.times(),
        initial,
        replicate,
        master_seed,
        config,
    )
}

/// Keeps fits with p-value at least `alpha`, sorted by p-value with the
/// highest first. Ties keep their input order.
pub fn accept_and_sort(fits: Vec<FitResult>, alpha: f64) -> Vec<FitResult> {
    let mut accepted: Vec<FitResult> = fits.into_iter().filter(|f| f.p_value >= alpha).collect();
    accepted.sort_by(|a, b| b.p_value.total_cmp(&a.p_value));
    accepted
}

/// Runs `replicates` independent fits, keeps those with p-value at least
/// `alpha`, and sorts them by p-value, highest first.
///
/// Fits run on the current rayon pool; results are gathered by replicate
/// index, so the ensemble does not depend on the number of workers.
pub fn run_ensemble(
    surveys: &SurveySet,
    replicates: usize,
    master_seed: u64,
    config: &PipelineConfig,
) -> Result<FitEnsemble> {
    if replicates < MIN_REPLICATES {
        return Err(Error::Config(format!(
            "replicates must be >= {MIN_REPLICATES}, got {replicates}"
        )));
    }
    config.validate()?;
    surveys.validate()?;

    let outcomes: Vec<Option<FitResult>> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| fit_one(surveys, i, master_seed, config))
        .collect::<Result<_>>()?;

    let unfittable = outcomes.iter().filter(|o| o.is_none()).count();
    let accepted = accept_and_sort(outcomes.into_iter().flatten().collect(), config.alpha);
    if accepted.len() < 2 {
        return Err(Error::InsufficientEnsemble {
            accepted: accepted.len(),
        });
    }
    Ok(FitEnsemble {
        accepted,
        total_attempted: replicates,
        unfittable,
        master_seed,
    })
}

fn check_quantiles(ensemble: &FitEnsemble, quantiles: &[QuantileSeries]) -> Result<usize> {
    let first = ensemble
        .accepted
        .first()
        .ok_or(Error::InsufficientEnsemble { accepted: 0 })?;
    let k = first.trajectory_at_surveys.len();
    if quantiles.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{} quantile series for {k} categories",
            quantiles.len()
        )));
    }
    let dates = first.trajectory_at_surveys[0].len();
    if quantiles
        .iter()
        .any(|q| q.lower.len() != dates || q.upper.len() != dates)
    {
        return Err(Error::InvalidArgument(
            "quantile series length differs from the number of survey dates".into(),
        ));
    }
    Ok(dates)
}

/// p-values of each data quantile vector (observed) against the matching
/// band vector (expected), ordered lower then upper per category. A
/// degenerate band vector scores 0.
pub fn pair_pvalues(data: &[QuantileSeries], band: &[QuantileSeries]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * data.len());
    for (q, b) in data.iter().zip(band) {
        for (obs, exp) in [(&q.lower, &b.lower), (&q.upper, &b.upper)] {
            let p = match (chi_square_statistic(obs, exp), dof_for(obs.len())) {
                (Ok(s), Ok(dof)) => chi_square_pvalue(s, dof),
                _ => 0.0,
            };
            out.push(p);
        }
    }
    out
}

/// Percentile band at the survey dates over the first `k` accepted fits.
pub fn band_at_surveys(
    ensemble: &FitEnsemble,
    categories: &[String],
    k: usize,
) -> Result<Vec<QuantileSeries>> {
    if k == 0 || k > ensemble.accepted.len() {
        return Err(Error::InvalidArgument(format!(
            "prefix size {k} outside 1..={}",
            ensemble.accepted.len()
        )));
    }
    let fits = &ensemble.accepted[..k];
    let dates = fits[0].trajectory_at_surveys[0].len();
    Ok(categories
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let (lower, upper) = (0..dates)
                .map(|j| {
                    let mut v: Vec<f64> =
                        fits.iter().map(|f| f.trajectory_at_surveys[c][j]).collect();
                    v.sort_by(f64::total_cmp);
                    percentile_pair(&v)
                })
                .unzip();
            QuantileSeries {
                category: name.clone(),
                lower,
                upper,
            }
        })
        .collect())
}

/// `m_k` for every prefix size `k = 2..=M`; entry `i` holds `m_{i+2}`.
///
/// Sorted columns are grown one fit at a time instead of re-sorting each
/// prefix.
pub fn band_scan(ensemble: &FitEnsemble, quantiles: &[QuantileSeries]) -> Result<Vec<f64>> {
    let dates = check_quantiles(ensemble, quantiles)?;
    let m = ensemble.accepted.len();
    let mut columns: Vec<Vec<Vec<f64>>> = vec![vec![Vec::with_capacity(m); dates]; quantiles.len()];
    let mut band: Vec<QuantileSeries> = quantiles
        .iter()
        .map(|q| QuantileSeries {
            category: q.category.clone(),
            lower: vec![0.0; dates],
            upper: vec![0.0; dates],
        })
        .collect();
    let mut scan = Vec::with_capacity(m.saturating_sub(1));

    for (idx, fit) in ensemble.accepted.iter().enumerate() {
        for (c, cols) in columns.iter_mut().enumerate() {
            for (j, col) in cols.iter_mut().enumerate() {
                let v = fit.trajectory_at_surveys[c][j];
                let pos = col.partition_point(|x| x.total_cmp(&v).is_le());
                col.insert(pos, v);
            }
        }
        if idx == 0 {
            continue;
        }
        for (cols, b) in columns.iter().zip(band.iter_mut()) {
            for (j, col) in cols.iter().enumerate() {
                let (lo, hi) = percentile_pair(col);
                b.lower[j] = lo;
                b.upper[j] = hi;
            }
        }
        let m_k = pair_pvalues(quantiles, &band)
            .into_iter()
            .fold(1.0, f64::min);
        scan.push(m_k);
    }
    Ok(scan)
}

/// Chooses the prefix size whose band best matches the data quantiles: the
/// smallest `k` maximizing the minimum of the pairwise p-values.
pub fn select_band(ensemble: &FitEnsemble, quantiles: &[QuantileSeries]) -> Result<BandSelection> {
    if ensemble.accepted.len() < 2 {
        return Err(Error::InsufficientEnsemble {
            accepted: ensemble.accepted.len(),
        });
    }
    let scan = band_scan(ensemble, quantiles)?;
    let mut best = 0;
    for (i, &m) in scan.iter().enumerate() {
        if m > scan[best] {
            best = i;
        }
    }
    let k = best + 2;
    let categories: Vec<String> = quantiles.iter().map(|q| q.category.clone()).collect();
    let band = band_at_surveys(ensemble, &categories, k)?;
    Ok(BandSelection {
        k,
        m_k: scan[best],
        per_pair_pvalues: pair_pvalues(quantiles, &band),
    })
}

/// Evenly spaced grid from `start` to `end` that always ends exactly at
/// `end`.
pub fn fine_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Config(format!(
            "grid step must be positive, got {step}"
        )));
    }
    if !(end > start) {
        return Err(Error::InvalidArgument(format!(
            "grid end {end} must come after start {start}"
        )));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|i| start + i as f64 * step).collect();
    let last = grid.len() - 1;
    if last > 0 && (end - grid[last]).abs() <= 1e-9 * step {
        grid[last] = end;
    } else {
        grid.push(end);
    }
    Ok(grid)
}

/// Model outputs of `fits` on `grid`, indexed `[fit][category][point]`.
fn ensemble_outputs(
    fits: &[FitResult],
    grid: &[f64],
    integrator: &Integrator,
) -> Result<Vec<Vec<Vec<f64>>>> {
    fits.par_iter()
        .map(|f| {
            let ic = CompartmentState {
                time: grid[0],
                values: f.initial.clone(),
            };
            model_rows(integrator, &ic, &f.gamma, grid)
        })
        .collect()
}

fn summarize<T>(
    outputs: &[Vec<Vec<f64>>],
    grid_len: usize,
    each: impl Fn(&[f64]) -> T,
) -> Vec<Vec<T>> {
    let k = outputs[0].len();
    (0..k)
        .map(|c| {
            (0..grid_len)
                .map(|g| {
                    let mut v: Vec<f64> = outputs.iter().map(|o| o[c][g]).collect();
                    v.sort_by(f64::total_cmp);
                    each(&v)
                })
                .collect()
        })
        .collect()
}

fn selected<'a>(ensemble: &'a FitEnsemble, selection: &BandSelection) -> Result<&'a [FitResult]> {
    if selection.k < 1 || selection.k > ensemble.accepted.len() {
        return Err(Error::InvalidArgument(format!(
            "selected k = {} but the ensemble holds {} fits",
            selection.k,
            ensemble.accepted.len()
        )));
    }
    Ok(&ensemble.accepted[..selection.k])
}

/// Percentile band of the selected fits on `grid`, which must start at the
/// first survey time.
pub fn band_on_grid(
    ensemble: &FitEnsemble,
    selection: &BandSelection,
    grid: &[f64],
    rk_step: f64,
) -> Result<ConfidenceBand> {
    let fits = selected(ensemble, selection)?;
    let outputs = ensemble_outputs(fits, grid, &Integrator::new(rk_step)?)?;
    let pairs = summarize(&outputs, grid.len(), percentile_pair);
    Ok(ConfidenceBand {
        grid: grid.to_vec(),
        lower: pairs
            .iter()
            .map(|row| row.iter().map(|p| p.0).collect())
            .collect(),
        upper: pairs
            .iter()
            .map(|row| row.iter().map(|p| p.1).collect())
            .collect(),
    })
}

/// The 95 % model confidence band from the first to the last survey on a
/// grid of spacing `grid_step`.
pub fn estimation_band(
    ensemble: &FitEnsemble,
    selection: &BandSelection,
    surveys: &SurveySet,
    grid_step: f64,
    rk_step: f64,
) -> Result<ConfidenceBand> {
    surveys.validate()?;
    let times = surveys.times();
    let grid = fine_grid(times[0], times[times.len() - 1], grid_step)?;
    band_on_grid(ensemble, selection, &grid, rk_step)
}

/// Ensemble mean and 95 % interval of the selected fits at each horizon
/// point.
pub fn predict(
    ensemble: &FitEnsemble,
    selection: &BandSelection,
    surveys: &SurveySet,
    horizon: &[HorizonPoint],
    rk_step: f64,
) -> Result<PredictionTable> {
    surveys.validate()?;
    let fits = selected(ensemble, selection)?;
    let table = PredictionTable {
        categories: surveys.categories.clone(),
        rows: Vec::new(),
    };
    if horizon.is_empty() {
        return Ok(table);
    }
    let times = surveys.times();
    let last = times[times.len() - 1];
    if horizon[0].t <= last {
        return Err(Error::InvalidArgument(format!(
            "horizon starts at t = {} but the last survey is at t = {last}",
            horizon[0].t
        )));
    }
    let mut grid = vec![times[0]];
    grid.extend(horizon.iter().map(|h| h.t));
    let outputs = ensemble_outputs(fits, &grid, &Integrator::new(rk_step)?)?;
    let cells = summarize(&outputs, grid.len(), |v| {
        let (ci_low, ci_high) = percentile_pair(v);
        PredictionCell {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            ci_low,
            ci_high,
        }
    });
    let rows = horizon
        .iter()
        .enumerate()
        .map(|(h, point)| PredictionRow {
            date: point.date,
            t: point.t,
            cells: cells.iter().map(|row| row[h + 1]).collect(),
        })
        .collect();
    Ok(PredictionTable { rows, ..table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::bundled_surveys;
    use crate::stats::SurveyRecord;
    use rand::Rng;
    use std::sync::OnceLock;

    const TRUE_GAMMA: [f64; 3] = [0.002, -0.004, 0.003];
    const START: [f64; 3] = [3.0, 90.0, 7.0];

    /// Survey series whose proportions are exactly the model output.
    fn noiseless_surveys(upper: &[f64]) -> SurveySet {
        let real = bundled_surveys();
        let times = real.times();
        let gamma = GammaParams::from_upper(3, upper).unwrap();
        let ic = CompartmentState::new(0.0, START.to_vec()).unwrap();
        let traj = crate::dynamics::integrate(&ic, &gamma, &times).unwrap();
        let records = real
            .records
            .iter()
            .zip(&traj.states)
            .map(|(r, s)| {
                let total: f64 = s.values.iter().sum();
                let theta = s.values.iter().map(|v| v / total).collect();
                SurveyRecord::new(r.date, r.t, r.n, theta).unwrap()
            })
            .collect();
        SurveySet {
            categories: real.categories.clone(),
            records,
        }
    }

    fn noiseless_data(set: &SurveySet) -> Vec<Vec<f64>> {
        (0..set.k())
            .map(|c| set.records.iter().map(|r| r.theta[c] * 100.0).collect())
            .collect()
    }

    /// Hand-built ensemble with random rates around zero; p-values descend.
    fn synthetic_ensemble(size: usize, seed: u64) -> (SurveySet, FitEnsemble) {
        let surveys = bundled_surveys();
        let times = surveys.times();
        let initial = surveys.records[0].percentages();
        let mut rng = derive_stream(seed, Domain::OptimizerRestart, 99, 0);
        let accepted = (0..size)
            .map(|i| {
                let upper: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.003..0.003)).collect();
                let gamma = GammaParams::from_upper(3, &upper).unwrap();
                let ic = CompartmentState::new(0.0, initial.clone()).unwrap();
                let traj = crate::dynamics::integrate(&ic, &gamma, &times).unwrap();
                FitResult {
                    replicate: i as u64,
                    gamma,
                    initial: initial.clone(),
                    p_value: 1.0 - i as f64 / (2 * size) as f64,
                    category_pvalues: vec![1.0; 3],
                    trajectory_at_surveys: traj.by_compartment(),
                }
            })
            .collect();
        let ensemble = FitEnsemble {
            accepted,
            total_attempted: size,
            unfittable: 0,
            master_seed: seed,
        };
        (surveys, ensemble)
    }

    fn small_run() -> &'static (SurveySet, FitEnsemble) {
        static RUN: OnceLock<(SurveySet, FitEnsemble)> = OnceLock::new();
        RUN.get_or_init(|| {
            let surveys = bundled_surveys();
            let ensemble = run_ensemble(&surveys, 100, 7, &PipelineConfig::default()).unwrap();
            (surveys, ensemble)
        })
    }

    fn assert_conserved(rows: &[Vec<f64>]) {
        for j in 0..rows[0].len() {
            let total: f64 = rows.iter().map(|r| r[j]).sum();
            assert!((total - 100.0).abs() < 1e-9, "sum {total} at point {j}");
        }
    }

    #[test]
    fn noiseless_data_recovers_rates() {
        let set = noiseless_surveys(&TRUE_GAMMA);
        let data = noiseless_data(&set);
        let fit = fit_dataset(
            &data,
            &set.times(),
            START.to_vec(),
            0,
            1,
            &PipelineConfig::default(),
        )
        .unwrap()
        .unwrap();
        for (got, want) in fit.gamma.upper().iter().zip(TRUE_GAMMA) {
            assert!(((got - want) / want).abs() < 0.1, "{got} vs {want}");
        }
        assert!(fit.p_value > 0.99);
        assert_conserved(&fit.trajectory_at_surveys);
    }

    #[test]
    fn noiseless_ensemble_accepts_everything() {
        let set = noiseless_surveys(&TRUE_GAMMA);
        let ensemble = run_ensemble(&set, 100, 3, &PipelineConfig::default()).unwrap();
        assert_eq!(ensemble.accepted.len(), 100);
        assert_eq!(ensemble.unfittable, 0);
    }

    #[test]
    fn fit_is_deterministic() {
        let surveys = bundled_surveys();
        let cfg = PipelineConfig::default();
        let a = fit_one(&surveys, 5, 11, &cfg).unwrap().unwrap();
        let b = fit_one(&surveys, 5, 11, &cfg).unwrap().unwrap();
        assert_eq!(a, b);
        let c = fit_one(&surveys, 6, 11, &cfg).unwrap().unwrap();
        assert_ne!(a.gamma, c.gamma);
    }

    #[test]
    fn ensemble_sorted_and_conserved() {
        let (_, ensemble) = small_run();
        assert!(ensemble
            .accepted
            .windows(2)
            .all(|w| w[0].p_value >= w[1].p_value));
        assert!(ensemble.accepted.iter().all(|f| f.p_value >= DEFAULT_ALPHA));
        for f in &ensemble.accepted {
            assert_conserved(&f.trajectory_at_surveys);
        }
    }

    #[test]
    fn ordering_survives_monotone_transform() {
        // Sorting by the negated largest statistic gives the same prefix as
        // sorting by the smallest p-value.
        let (surveys, ensemble) = small_run();
        let by_stat: Vec<(u64, f64)> = ensemble
            .accepted
            .iter()
            .map(|f| {
                let data = sample_dataset(surveys, f.replicate, ensemble.master_seed);
                let stats = category_statistics(&data, &f.trajectory_at_surveys).unwrap();
                (f.replicate, -stats.into_iter().fold(0.0, f64::max))
            })
            .collect();
        let mut resorted = by_stat.clone();
        resorted.sort_by(|a, b| b.1.total_cmp(&a.1));
        let original: Vec<u64> = by_stat.iter().map(|x| x.0).collect();
        let transformed: Vec<u64> = resorted.iter().map(|x| x.0).collect();
        assert_eq!(original, transformed);
    }

    #[test]
    fn accept_and_sort_is_stable() {
        let (_, ens) = synthetic_ensemble(4, 1);
        let mut fits = ens.accepted.clone();
        fits[0].p_value = 0.5;
        fits[1].p_value = 0.01;
        fits[2].p_value = 0.5;
        fits[3].p_value = 0.9;
        let out = accept_and_sort(fits, 0.05);
        let order: Vec<u64> = out.iter().map(|f| f.replicate).collect();
        assert_eq!(order, vec![3, 0, 2]);
    }

    #[test]
    fn too_few_replicates_rejected() {
        let surveys = bundled_surveys();
        let err = run_ensemble(&surveys, 99, 1, &PipelineConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn band_scan_matches_brute_force() {
        let (surveys, ensemble) = synthetic_ensemble(40, 2);
        let quantiles = data_quantiles(&surveys, 2000, 2).unwrap();
        let scan = band_scan(&ensemble, &quantiles).unwrap();
        let times = surveys.times();
        let integrator = Integrator::new(crate::dynamics::DEFAULT_RK_STEP).unwrap();
        for k in 2..=ensemble.accepted.len() {
            // re-integrate every member, no cached trajectories
            let outputs: Vec<Vec<Vec<f64>>> = ensemble.accepted[..k]
                .iter()
                .map(|f| {
                    let ic = CompartmentState::new(times[0], f.initial.clone()).unwrap();
                    integrator
                        .integrate(&ic, &f.gamma, &times)
                        .unwrap()
                        .by_compartment()
                })
                .collect();
            let band: Vec<QuantileSeries> = (0..3)
                .map(|c| {
                    let (lower, upper) = (0..times.len())
                        .map(|j| {
                            let mut v: Vec<f64> = outputs.iter().map(|o| o[c][j]).collect();
                            v.sort_by(f64::total_cmp);
                            (quantile_sorted(&v, 0.025), quantile_sorted(&v, 0.975))
                        })
                        .unzip();
                    QuantileSeries {
                        category: surveys.categories[c].clone(),
                        lower,
                        upper,
                    }
                })
                .collect();
            let m_k = pair_pvalues(&quantiles, &band)
                .into_iter()
                .fold(1.0, f64::min);
            assert!((m_k - scan[k - 2]).abs() < 1e-12, "k = {k}");
        }
    }

    #[test]
    fn identical_pair_selects_two() {
        let (surveys, mut ensemble) = synthetic_ensemble(2, 3);
        ensemble.accepted[1] = FitResult {
            replicate: 1,
            ..ensemble.accepted[0].clone()
        };
        let quantiles = data_quantiles(&surveys, 2000, 3).unwrap();
        let sel = select_band(&ensemble, &quantiles).unwrap();
        assert_eq!(sel.k, 2);
        let band = band_at_surveys(&ensemble, &surveys.categories, 2).unwrap();
        for (c, b) in band.iter().enumerate() {
            assert_eq!(b.lower, ensemble.accepted[0].trajectory_at_surveys[c]);
            assert_eq!(b.upper, ensemble.accepted[0].trajectory_at_surveys[c]);
        }
    }

    #[test]
    fn select_band_takes_first_maximum() {
        let (surveys, ensemble) = synthetic_ensemble(30, 4);
        let quantiles = data_quantiles(&surveys, 2000, 4).unwrap();
        let scan = band_scan(&ensemble, &quantiles).unwrap();
        let sel = select_band(&ensemble, &quantiles).unwrap();
        let best = scan.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(sel.m_k, best);
        assert_eq!(scan.iter().position(|&m| m == best).unwrap() + 2, sel.k);
        assert_eq!(
            sel.per_pair_pvalues.iter().cloned().fold(1.0, f64::min),
            sel.m_k
        );
    }

    #[test]
    fn degenerate_band_scores_zero() {
        let q = vec![QuantileSeries {
            category: "a".into(),
            lower: vec![1.0, 2.0],
            upper: vec![2.0, 3.0],
        }];
        let b = vec![QuantileSeries {
            category: "a".into(),
            lower: vec![0.0, 2.0],
            upper: vec![2.0, 3.0],
        }];
        assert_eq!(pair_pvalues(&q, &b), vec![0.0, 1.0]);
    }

    #[test]
    fn fine_grid_band_matches_survey_band() {
        let (surveys, ensemble) = synthetic_ensemble(25, 5);
        let quantiles = data_quantiles(&surveys, 2000, 5).unwrap();
        let sel = select_band(&ensemble, &quantiles).unwrap();
        let band = estimation_band(&ensemble, &sel, &surveys, DEFAULT_GRID_STEP, 0.005).unwrap();
        let at_surveys = band_at_surveys(&ensemble, &surveys.categories, sel.k).unwrap();
        let last = band.grid.len() - 1;
        assert_eq!(band.grid[0], 0.0);
        assert_eq!(band.grid[last], 7.5);
        assert_eq!(band.grid.len(), 151);
        for (c, s) in at_surveys.iter().enumerate() {
            for (g, j) in [(0, 0), (last, 15), (10, 1), (100, 10)] {
                assert!((band.lower[c][g] - s.lower[j]).abs() < 1e-9);
                assert!((band.upper[c][g] - s.upper[j]).abs() < 1e-9);
            }
            for g in 0..band.grid.len() {
                assert!(band.lower[c][g] <= band.upper[c][g]);
                assert!(band.lower[c][g] >= 0.0 && band.upper[c][g] <= 100.0);
            }
        }
    }

    #[test]
    fn prediction_mean_within_member_range() {
        let (surveys, ensemble) = synthetic_ensemble(20, 6);
        let sel = BandSelection {
            k: 12,
            m_k: 0.0,
            per_pair_pvalues: vec![],
        };
        let horizon = crate::io::half_year_horizon(&surveys, 8);
        let table = predict(&ensemble, &sel, &surveys, &horizon, 0.005).unwrap();
        assert_eq!(table.rows.len(), 8);
        let grid = [0.0, 8.0, 11.5];
        let integ = Integrator::new(0.005).unwrap();
        let outputs: Vec<Vec<Vec<f64>>> = ensemble.accepted[..12]
            .iter()
            .map(|f| {
                let ic = CompartmentState::new(0.0, f.initial.clone()).unwrap();
                integ
                    .integrate(&ic, &f.gamma, &grid)
                    .unwrap()
                    .by_compartment()
            })
            .collect();
        for (row, g) in [(0, 1), (7, 2)] {
            let r = &table.rows[row];
            assert_eq!(r.t, grid[g]);
            for c in 0..3 {
                let vals: Vec<f64> = outputs.iter().map(|o| o[c][g]).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let cell = r.cells[c];
                assert!(lo <= cell.mean && cell.mean <= hi);
                assert!(lo <= cell.ci_low && cell.ci_low <= cell.ci_high && cell.ci_high <= hi);
            }
            let means: f64 = r.cells.iter().map(|c| c.mean).sum();
            assert!((means - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_horizon_gives_empty_table() {
        let (surveys, ensemble) = synthetic_ensemble(3, 7);
        let sel = BandSelection {
            k: 3,
            m_k: 0.0,
            per_pair_pvalues: vec![],
        };
        let table = predict(&ensemble, &sel, &surveys, &[], 0.005).unwrap();
        assert!(table.rows.is_empty());
        assert_eq!(table.categories, surveys.categories);
        let past = [HorizonPoint {
            date: surveys.records[15].date,
            t: 7.5,
        }];
        assert!(predict(&ensemble, &sel, &surveys, &past, 0.005).is_err());
    }

    #[test]
    fn identical_surveys_give_matching_quantiles() {
        let real = bundled_surveys();
        let rec = &real.records[8];
        let second =
            SurveyRecord::new(real.records[9].date, 0.5, rec.n, rec.theta.clone()).unwrap();
        let set = SurveySet {
            categories: real.categories.clone(),
            records: vec![
                SurveyRecord {
                    t: 0.0,
                    ..rec.clone()
                },
                second,
            ],
        };
        let q = data_quantiles(&set, 20_000, 9).unwrap();
        for (c, s) in q.iter().enumerate() {
            let p = rec.theta[c];
            let sigma = 100.0 * (p * (1.0 - p) / rec.n as f64).sqrt();
            assert!((s.lower[0] - s.lower[1]).abs() <= 3.0 * sigma);
            assert!((s.upper[0] - s.upper[1]).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn degenerate_survey_quantiles() {
        let real = bundled_surveys();
        let set = SurveySet {
            categories: real.categories.clone(),
            records: vec![
                SurveyRecord::new(real.records[0].date, 0.0, 1200, vec![1.0, 0.0, 0.0]).unwrap(),
            ],
        };
        let q = data_quantiles(&set, 1000, 1).unwrap();
        assert_eq!((q[0].lower[0], q[0].upper[0]), (100.0, 100.0));
        assert_eq!((q[1].lower[0], q[2].upper[0]), (0.0, 0.0));
    }

    #[test]
    fn fine_grid_shape() {
        assert_eq!(
            fine_grid(0.0, 1.0, 0.3).unwrap(),
            vec![0.0, 0.3, 0.6, 0.8999999999999999, 1.0]
        );
        assert_eq!(fine_grid(0.0, 7.5, 0.05).unwrap().len(), 151);
        assert!(fine_grid(1.0, 1.0, 0.05).is_err());
        assert!(fine_grid(0.0, 1.0, 0.0).is_err());
    }
}
