//! `mcb` command line: `estimate` builds the model confidence band,
//! `predict` extends it past the last survey.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::io::{self, DataFormat, EnsembleSummary, ResultBundle, ResultFormat, RunSettings};
use crate::optimize::SimplexConfig;
use crate::pipeline::{self, HorizonPoint, IcMode, PipelineConfig};
use crate::stats::SurveySet;

pub const EXIT_PARSE: i32 = 2;
pub const EXIT_INSUFFICIENT: i32 = 3;
pub const EXIT_IO: i32 = 4;

const BUNDLED_INPUT: &str = "<bundled euskobarometro>";

#[derive(Debug, Parser)]
#[command(
    name = "mcb",
    version,
    about = "Survey-driven model confidence bands and predictions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Resample, fit, select the band and write the estimation bundle.
    Estimate(RunArgs),
    /// Predict past the last survey, fitting first unless `--from` is given.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum IcModeArg {
    Sampled,
    Mean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Survey file; the bundled Euskobarometro series when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Input format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long, default_value_t = pipeline::DEFAULT_REPLICATES)]
    replicates: usize,
    /// Multinomial draws per survey for the data percentiles.
    #[arg(long, default_value_t = pipeline::DEFAULT_QUANTILE_DRAWS)]
    draws: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = pipeline::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = pipeline::DEFAULT_GRID_STEP)]
    grid_step: f64,
    #[arg(long, default_value_t = crate::dynamics::DEFAULT_RK_STEP)]
    rk_step: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "sampled")]
    ic_mode: IcModeArg,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    run: RunArgs,
    /// `+N` half-years after the last survey, or comma-separated ISO dates.
    #[arg(long, default_value = "+8", allow_hyphen_values = true)]
    horizon: String,
    /// Reuse the selected fits of an earlier `estimate` bundle.
    #[arg(long)]
    from: Option<PathBuf>,
}

/// Run configuration with the defaults of the published procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub format: Option<DataFormat>,
    pub replicates: usize,
    pub quantile_draws: usize,
    pub seed: u64,
    pub alpha: f64,
    pub grid_step: f64,
    pub rk_step: f64,
    pub out: PathBuf,
    pub ic_mode: IcMode,
    pub jobs: Option<usize>,
    pub simplex: SimplexConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            format: None,
            replicates: pipeline::DEFAULT_REPLICATES,
            quantile_draws: pipeline::DEFAULT_QUANTILE_DRAWS,
            seed: 1,
            alpha: pipeline::DEFAULT_ALPHA,
            grid_step: pipeline::DEFAULT_GRID_STEP,
            rk_step: crate::dynamics::DEFAULT_RK_STEP,
            out: PathBuf::from("out"),
            ic_mode: IcMode::Sampled,
            jobs: None,
            simplex: SimplexConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < pipeline::MIN_REPLICATES {
            return Err(Error::Config(format!(
                "replicates ≥ {} required, got {}",
                pipeline::MIN_REPLICATES,
                self.replicates
            )));
        }
        if self.quantile_draws < pipeline::MIN_QUANTILE_DRAWS {
            return Err(Error::Config(format!(
                "draws ≥ {} required, got {}",
                pipeline::MIN_QUANTILE_DRAWS,
                self.quantile_draws
            )));
        }
        if !(self.grid_step.is_finite() && self.grid_step > 0.0) {
            return Err(Error::Config(format!(
                "grid step must be positive, got {}",
                self.grid_step
            )));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.pipeline().validate()
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            alpha: self.alpha,
            rk_step: self.rk_step,
            ic_mode: self.ic_mode,
            simplex: self.simplex.clone(),
        }
    }

    fn input_label(&self) -> String {
        self.input
            .as_ref()
            .map_or_else(|| BUNDLED_INPUT.to_string(), |p| p.display().to_string())
    }

    pub fn load_surveys(&self) -> Result<SurveySet> {
        match &self.input {
            None => Ok(io::bundled_surveys()),
            Some(path) => {
                let format = self.format.unwrap_or_else(|| DataFormat::from_path(path));
                io::load_surveys(path, format)
            }
        }
    }

    fn settings(&self) -> RunSettings {
        RunSettings {
            input: self.input_label(),
            replicates: self.replicates,
            quantile_draws: self.quantile_draws,
            alpha: self.alpha,
            grid_step: self.grid_step,
            rk_step: self.rk_step,
            ic_mode: self.ic_mode,
            simplex: self.simplex.clone(),
        }
    }
}

impl From<RunArgs> for RunConfig {
    fn from(a: RunArgs) -> Self {
        RunConfig {
            input: a.input,
            format: a.format.map(|f| match f {
                FormatArg::Csv => DataFormat::Csv,
                FormatArg::Json => DataFormat::Json,
            }),
            replicates: a.replicates,
            quantile_draws: a.draws,
            seed: a.seed,
            alpha: a.alpha,
            grid_step: a.grid_step,
            rk_step: a.rk_step,
            out: a.out,
            ic_mode: match a.ic_mode {
                IcModeArg::Sampled => IcMode::Sampled,
                IcModeArg::Mean => IcMode::Mean,
            },
            jobs: a.jobs,
            simplex: SimplexConfig::default(),
        }
    }
}

/// Full estimation: data percentiles, fit ensemble, band selection and the
/// band on the fine grid.
pub fn estimate(surveys: &SurveySet, config: &RunConfig) -> Result<ResultBundle> {
    config.validate()?;
    surveys.validate()?;
    let quantiles = pipeline::data_quantiles(surveys, config.quantile_draws, config.seed)?;
    let ensemble =
        pipeline::run_ensemble(surveys, config.replicates, config.seed, &config.pipeline())?;
    let selection = pipeline::select_band(&ensemble, &quantiles)?;
    let band = pipeline::estimation_band(
        &ensemble,
        &selection,
        surveys,
        config.grid_step,
        config.rk_step,
    )?;
    Ok(ResultBundle {
        format_version: io::BUNDLE_FORMAT_VERSION,
        config: config.settings(),
        master_seed: config.seed,
        categories: surveys.categories.clone(),
        survey_dates: surveys.records.iter().map(|r| r.date).collect(),
        survey_times: surveys.times(),
        data_quantiles: quantiles,
        summary: EnsembleSummary {
            total_attempted: ensemble.total_attempted,
            accepted: ensemble.accepted.len(),
            unfittable: ensemble.unfittable,
            k: selection.k,
            m_k: selection.m_k,
            per_pair_pvalues: selection.per_pair_pvalues.clone(),
        },
        selected_fits: ensemble.accepted[..selection.k].to_vec(),
        estimation_band: band,
        prediction: None,
        prediction_band: None,
    })
}

/// Parses `+N` (half-years after the last survey) or a comma-separated
/// list of ISO dates.
pub fn parse_horizon(spec: &str, surveys: &SurveySet) -> Result<Vec<HorizonPoint>> {
    let spec = spec.trim();
    let points = if let Some(n) = spec.strip_prefix('+') {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Config(format!("bad horizon `{spec}`")))?;
        io::half_year_horizon(surveys, n)
    } else {
        let dates = spec
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                NaiveDate::parse_from_str(s, "%Y-%m-%d")
                    .map_err(|e| Error::Config(format!("bad horizon date `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if dates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("horizon dates must increase".into()));
        }
        io::horizon_from_dates(surveys, &dates)
    };
    if points.is_empty() {
        return Err(Error::Config("empty horizon".into()));
    }
    Ok(points)
}

/// Adds the prediction table and the band extended through the horizon.
pub fn add_prediction(
    bundle: &mut ResultBundle,
    surveys: &SurveySet,
    horizon: &[HorizonPoint],
) -> Result<()> {
    if horizon.is_empty() {
        return Err(Error::Config("empty horizon".into()));
    }
    let (ensemble, selection) = bundle.selected_ensemble();
    let rk_step = bundle.config.rk_step;
    let table = pipeline::predict(&ensemble, &selection, surveys, horizon, rk_step)?;
    let t0 = surveys.times()[0];
    let t_end = horizon[horizon.len() - 1].t;
    let grid = pipeline::fine_grid(t0, t_end, bundle.config.grid_step)?;
    bundle.prediction_band = Some(pipeline::band_on_grid(
        &ensemble, &selection, &grid, rk_step,
    )?);
    bundle.prediction = Some(table);
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_estimate_outputs(bundle: &ResultBundle, surveys: &SurveySet, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    io::write_results(bundle, &out.join("bundle.json"), ResultFormat::Json)?;
    io::write_text(
        &out.join("band.csv"),
        &io::band_to_csv(&bundle.estimation_band, &bundle.categories),
    )?;
    io::render_band_svg(
        &bundle.estimation_band,
        &bundle.data_quantiles,
        surveys,
        out,
        "band",
    )?;
    Ok(())
}

fn check_bundle_matches(bundle: &ResultBundle, surveys: &SurveySet) -> Result<()> {
    let dates: Vec<NaiveDate> = surveys.records.iter().map(|r| r.date).collect();
    if bundle.categories != surveys.categories || bundle.survey_dates != dates {
        return Err(Error::Config(
            "bundle was produced from a different survey series".into(),
        ));
    }
    if bundle.selected_fits.is_empty() {
        return Err(Error::InsufficientEnsemble { accepted: 0 });
    }
    Ok(())
}

fn print_summary(bundle: &ResultBundle) {
    let s = &bundle.summary;
    println!(
        "k = {}, m_k = {:.6}, accepted = {} / {}",
        s.k, s.m_k, s.accepted, s.total_attempted
    );
}

fn cmd_estimate(config: RunConfig) -> Result<()> {
    config.validate()?;
    let surveys = config.load_surveys()?;
    let bundle = estimate(&surveys, &config)?;
    write_estimate_outputs(&bundle, &surveys, &config.out)?;
    print_summary(&bundle);
    Ok(())
}

fn cmd_predict(config: RunConfig, horizon: &str, from: Option<&Path>) -> Result<()> {
    config.validate()?;
    let surveys = config.load_surveys()?;
    let horizon = parse_horizon(horizon, &surveys)?;
    let mut bundle = match from {
        Some(path) => {
            let b = io::load_results(path)?;
            check_bundle_matches(&b, &surveys)?;
            b
        }
        None => estimate(&surveys, &config)?,
    };
    add_prediction(&mut bundle, &surveys, &horizon)?;

    let out = &config.out;
    write_estimate_outputs(&bundle, &surveys, out)?;
    io::write_results(&bundle, &out.join("prediction.csv"), ResultFormat::Csv)?;
    if let Some(band) = &bundle.prediction_band {
        io::render_band_svg(band, &bundle.data_quantiles, &surveys, out, "prediction")?;
    }
    print_summary(&bundle);
    if let Some(table) = &bundle.prediction {
        for row in &table.rows {
            let cells: Vec<String> = row
                .cells
                .iter()
                .map(|c| format!("{:6.2} [{:6.2}, {:6.2}]", c.mean, c.ci_low, c.ci_high))
                .collect();
            println!("{}  {}", row.date.format("%b %Y"), cells.join("  "));
        }
    }
    Ok(())
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse { .. } | Error::Config(_) | Error::InvalidArgument(_) | Error::Serde(_) => {
            EXIT_PARSE
        }
        Error::InsufficientEnsemble { .. } => EXIT_INSUFFICIENT,
        Error::Io { .. } => EXIT_IO,
        _ => 1,
    }
}

fn with_jobs<T>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    match jobs {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?
            .install(f),
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Estimate(args) => {
            let config = RunConfig::from(args);
            let jobs = config.jobs;
            with_jobs(jobs, move || cmd_estimate(config))
        }
        Command::Predict(args) => {
            let config = RunConfig::from(args.run);
            let jobs = config.jobs;
            let horizon = args.horizon;
            let from = args.from;
            with_jobs(jobs, move || cmd_predict(config, &horizon, from.as_deref()))
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
