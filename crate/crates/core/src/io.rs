//! Survey ingestion, result bundles and band plots.
//!
//! Survey CSV layout: a header `date,sample_size,<cat1>,...,<catK>`, then one
//! row per survey with an ISO-8601 date, the number of interviews and the
//! category percentages. Each percentage may carry up to 0.5 of rounding, so
//! a row must add up to 100 within `0.5 * K`; rows are renormalized on load.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Months, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::SimplexConfig;
use crate::pipeline::{
    BandSelection, ConfidenceBand, FitEnsemble, FitResult, HorizonPoint, IcMode, PredictionTable,
};
use crate::stats::{QuantileSeries, SurveyRecord, SurveySet};

/// Rounding allowance per category percentage; a row total may deviate
/// from 100 by this much times the number of categories.
pub const PERCENT_SUM_TOLERANCE: f64 = 0.5;

/// The sixteen semiannual Basque surveys, May 2005 to Nov 2012.
pub const EUSKOBAROMETRO_CSV: &str = include_str!("../data/euskobarometro.csv");

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Json,
}

impl DataFormat {
    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => DataFormat::Json,
            _ => DataFormat::Csv,
        }
    }
}

/// Years from `first` to `date`.
///
/// Dates sharing the day of month are a whole number of months apart and
/// map to `months / 12`, so semiannual surveys land on multiples of 0.5.
/// Anything else uses a 365.25-day year.
pub fn years_between(first: NaiveDate, date: NaiveDate) -> f64 {
    if first.day() == date.day() {
        let months = (date.year() - first.year()) * 12 + date.month() as i32 - first.month() as i32;
        months as f64 / 12.0
    } else {
        (date - first).num_days() as f64 / 365.25
    }
}

fn build_record(
    row: usize,
    date: NaiveDate,
    first: Option<NaiveDate>,
    n: u64,
    percents: &[f64],
) -> Result<SurveyRecord> {
    if n == 0 {
        return Err(Error::parse(row, "sample_size", "must be at least 1"));
    }
    let total: f64 = percents.iter().sum();
    let allowed = PERCENT_SUM_TOLERANCE * percents.len() as f64;
    if (total - 100.0).abs() > allowed {
        return Err(Error::parse(
            row,
            "percentages",
            format!("sum to {total}, expected 100 +- {allowed}"),
        ));
    }
    let theta = percents.iter().map(|p| p / total).collect();
    let t = first.map_or(0.0, |f| years_between(f, date));
    SurveyRecord::new(date, t, n, theta)
        .map_err(|e| Error::parse(row, "percentages", e.to_string()))
}

fn parse_percent(row: usize, field: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| Error::parse(row, field, format!("`{raw}` is not a number")))?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::parse(
            row,
            field,
            format!("`{raw}` must be a non-negative number"),
        ));
    }
    Ok(v)
}

fn parse_date(row: usize, raw: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(raw.trim(), "%Y-%m-%d")
        .map_err(|e| Error::parse(row, "date", format!("`{raw}`: {e}")))
}

fn check_order(row: usize, prev: Option<NaiveDate>, date: NaiveDate) -> Result<()> {
    match prev {
        Some(p) if date <= p => Err(Error::parse(
            row,
            "date",
            format!("{date} does not come after {p}"),
        )),
        _ => Ok(()),
    }
}

/// Reads a survey CSV. Rows are numbered from 1 after the header.
pub fn parse_surveys_csv<R: Read>(reader: R) -> Result<SurveySet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(0, "header", e.to_string()))?
        .clone();
    for (i, want) in ["date", "sample_size"].iter().enumerate() {
        match header.get(i) {
            Some(h) if h == *want => {}
            other => {
                return Err(Error::parse(
                    0,
                    *want,
                    format!("expected column `{want}`, found {other:?}"),
                ))
            }
        }
    }
    let categories: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    if categories.len() < 2 {
        return Err(Error::parse(
            0,
            "header",
            "need at least two category columns",
        ));
    }

    let mut records: Vec<SurveyRecord> = Vec::new();
    for (i, result) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = result.map_err(|e| Error::parse(row, "record", e.to_string()))?;
        let field = |idx: usize, name: &str| -> Result<String> {
            rec.get(idx)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .ok_or_else(|| Error::parse(row, name, "missing value"))
        };
        let date = parse_date(row, &field(0, "date")?)?;
        let n_raw = field(1, "sample_size")?;
        let n: u64 = n_raw.parse().map_err(|_| {
            Error::parse(row, "sample_size", format!("`{n_raw}` is not an integer"))
        })?;
        let mut percents = Vec::with_capacity(categories.len());
        for (c, name) in categories.iter().enumerate() {
            percents.push(parse_percent(row, name, &field(c + 2, name)?)?);
        }
        check_order(row, records.last().map(|r| r.date), date)?;
        let first = records.first().map(|r| r.date);
        records.push(build_record(row, date, first, n, &percents)?);
    }
    Ok(SurveySet {
        categories,
        records,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SurveyFileJson {
    categories: Vec<String>,
    surveys: Vec<SurveyRowJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SurveyRowJson {
    date: String,
    sample_size: u64,
    percentages: Vec<f64>,
}

/// Reads the JSON mirror of the survey CSV:
/// `{"categories": [...], "surveys": [{"date", "sample_size", "percentages"}]}`.
pub fn parse_surveys_json<R: Read>(reader: R) -> Result<SurveySet> {
    let file: SurveyFileJson = serde_json::from_reader(reader)
        .map_err(|e| Error::parse(e.line(), "json", e.to_string()))?;
    if file.categories.len() < 2 {
        return Err(Error::parse(
            0,
            "categories",
            "need at least two categories",
        ));
    }
    let mut records: Vec<SurveyRecord> = Vec::new();
    for (i, row) in file.surveys.iter().enumerate() {
        let r = i + 1;
        if row.percentages.len() != file.categories.len() {
            return Err(Error::parse(
                r,
                "percentages",
                format!(
                    "{} values for {} categories",
                    row.percentages.len(),
                    file.categories.len()
                ),
            ));
        }
        for (v, name) in row.percentages.iter().zip(&file.categories) {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::parse(r, name, format!("{v} must be non-negative")));
            }
        }
        let date = parse_date(r, &row.date)?;
        check_order(r, records.last().map(|x| x.date), date)?;
        let first = records.first().map(|x| x.date);
        records.push(build_record(
            r,
            date,
            first,
            row.sample_size,
            &row.percentages,
        )?);
    }
    Ok(SurveySet {
        categories: file.categories,
        records,
    })
}

pub fn load_surveys(path: &Path, format: DataFormat) -> Result<SurveySet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        DataFormat::Csv => parse_surveys_csv(file),
        DataFormat::Json => parse_surveys_json(file),
    }
}

/// The bundled Euskobarometro series.
pub fn bundled_surveys() -> SurveySet {
    parse_surveys_csv(EUSKOBAROMETRO_CSV.as_bytes()).expect("bundled survey data is valid")
}

/// Renders surveys back to the CSV input layout.
pub fn surveys_to_csv(set: &SurveySet) -> String {
    let mut out = String::from("date,sample_size");
    for c in &set.categories {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for r in &set.records {
        let _ = write!(out, "{},{}", r.date.format("%Y-%m-%d"), r.n);
        for p in r.percentages() {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
    }
    out
}

pub fn surveys_to_json(set: &SurveySet) -> Result<String> {
    let file = SurveyFileJson {
        categories: set.categories.clone(),
        surveys: set
            .records
            .iter()
            .map(|r| SurveyRowJson {
                date: r.date.format("%Y-%m-%d").to_string(),
                sample_size: r.n,
                percentages: r.percentages(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Horizon of `half_years` semiannual points after the last survey.
pub fn half_year_horizon(surveys: &SurveySet, half_years: usize) -> Vec<HorizonPoint> {
    let (Some(first), Some(last)) = (surveys.records.first(), surveys.records.last()) else {
        return Vec::new();
    };
    (1..=half_years)
        .filter_map(|i| last.date.checked_add_months(Months::new(6 * i as u32)))
        .map(|date| HorizonPoint {
            date,
            t: years_between(first.date, date),
        })
        .collect()
}

/// Horizon points for explicit dates.
pub fn horizon_from_dates(surveys: &SurveySet, dates: &[NaiveDate]) -> Vec<HorizonPoint> {
    let Some(first) = surveys.records.first() else {
        return Vec::new();
    };
    dates
        .iter()
        .map(|&date| HorizonPoint {
            date,
            t: years_between(first.date, date),
        })
        .collect()
}

/// Settings echoed into every result bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub input: String,
    pub replicates: usize,
    pub quantile_draws: usize,
    pub alpha: f64,
    pub grid_step: f64,
    pub rk_step: f64,
    pub ic_mode: IcMode,
    pub simplex: SimplexConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub total_attempted: usize,
    pub accepted: usize,
    pub unfittable: usize,
    pub k: usize,
    pub m_k: f64,
    pub per_pair_pvalues: Vec<f64>,
}

/// Everything a run produces, in a form that reloads bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub format_version: u32,
    pub config: RunSettings,
    pub master_seed: u64,
    pub categories: Vec<String>,
    pub survey_dates: Vec<NaiveDate>,
    pub survey_times: Vec<f64>,
    pub data_quantiles: Vec<QuantileSeries>,
    pub summary: EnsembleSummary,
    /// The first `k` accepted fits, best first.
    pub selected_fits: Vec<FitResult>,
    pub estimation_band: ConfidenceBand,
    #[serde(default)]
    pub prediction: Option<PredictionTable>,
    #[serde(default)]
    pub prediction_band: Option<ConfidenceBand>,
}

impl ResultBundle {
    /// Ensemble restricted to the selected fits plus the matching selection,
    /// enough to extend the band or predict without refitting.
    pub fn selected_ensemble(&self) -> (FitEnsemble, BandSelection) {
        let ensemble = FitEnsemble {
            accepted: self.selected_fits.clone(),
            total_attempted: self.summary.total_attempted,
            unfittable: self.summary.unfittable,
            master_seed: self.master_seed,
        };
        let selection = BandSelection {
            k: self.selected_fits.len(),
            m_k: self.summary.m_k,
            per_pair_pvalues: self.summary.per_pair_pvalues.clone(),
        };
        (ensemble, selection)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResultFormat {
    /// Full bundle.
    Json,
    /// Prediction table, `date,category,mean,ci_low,ci_high`.
    Csv,
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub const PREDICTION_CSV_HEADER: &str = "date,category,mean,ci_low,ci_high";

pub fn prediction_to_csv(table: &PredictionTable) -> String {
    let mut out = String::from(PREDICTION_CSV_HEADER);
    out.push('\n');
    for row in &table.rows {
        for (name, cell) in table.categories.iter().zip(&row.cells) {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                row.date.format("%Y-%m-%d"),
                name,
                fmt_f64(cell.mean),
                fmt_f64(cell.ci_low),
                fmt_f64(cell.ci_high)
            );
        }
    }
    out
}

pub const BAND_CSV_HEADER: &str = "t,category,lower,upper";

pub fn band_to_csv(band: &ConfidenceBand, categories: &[String]) -> String {
    let mut out = String::from(BAND_CSV_HEADER);
    out.push('\n');
    for (g, t) in band.grid.iter().enumerate() {
        for (c, name) in categories.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                fmt_f64(*t),
                name,
                fmt_f64(band.lower[c][g]),
                fmt_f64(band.upper[c][g])
            );
        }
    }
    out
}

pub fn bundle_to_json(bundle: &ResultBundle) -> Result<String> {
    let mut s = serde_json::to_string_pretty(bundle)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_results(bundle: &ResultBundle, path: &Path, format: ResultFormat) -> Result<()> {
    let text = match format {
        ResultFormat::Json => bundle_to_json(bundle)?,
        ResultFormat::Csv => {
            let empty = PredictionTable {
                categories: bundle.categories.clone(),
                rows: Vec::new(),
            };
            prediction_to_csv(bundle.prediction.as_ref().unwrap_or(&empty))
        }
    };
    write_text(path, &text)
}

pub fn load_results(path: &Path) -> Result<ResultBundle> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Data plotted in one band panel.
#[derive(Debug, Clone)]
pub struct BandPanel<'a> {
    pub title: &'a str,
    pub first_date: NaiveDate,
    pub survey_times: &'a [f64],
    pub survey_means: &'a [f64],
    pub ci_low: &'a [f64],
    pub ci_high: &'a [f64],
    pub grid: &'a [f64],
    pub band_low: &'a [f64],
    pub band_high: &'a [f64],
}

const SVG_W: f64 = 720.0;
const SVG_H: f64 = 420.0;
const PAD_L: f64 = 60.0;
const PAD_R: f64 = 20.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 50.0;

/// Axis range covering `[lo, hi]` with round tick spacing (1, 2 or 5 times
/// a power of ten), clamped to percentages.
pub fn nice_range(lo: f64, hi: f64) -> (f64, f64, f64) {
    let span = (hi - lo).max(1e-6);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = mag
        * if norm <= 1.0 {
            1.0
        } else if norm <= 2.0 {
            2.0
        } else if norm <= 5.0 {
            5.0
        } else {
            10.0
        };
    let lo = ((lo / step).floor() * step).max(0.0);
    let hi = ((hi / step).ceil() * step).min(100.0);
    (lo, hi, step)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// One SVG panel: data 95 % intervals as error bars with the survey means,
/// and the model band as two polylines. Output bytes depend only on the
/// inputs.
pub fn band_svg(panel: &BandPanel<'_>) -> String {
    let all = panel
        .ci_low
        .iter()
        .chain(panel.ci_high)
        .chain(panel.survey_means)
        .chain(panel.band_low)
        .chain(panel.band_high)
        .copied();
    let (ymin, ymax) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let (y0, y1, ystep) = nice_range(ymin, ymax);
    let x_end = panel
        .grid
        .last()
        .copied()
        .into_iter()
        .chain(panel.survey_times.last().copied())
        .fold(0.0, f64::max);
    let x0 = panel.survey_times.first().copied().unwrap_or(0.0);
    let x1 = if x_end > x0 { x_end } else { x0 + 1.0 };

    let plot_w = SVG_W - PAD_L - PAD_R;
    let plot_h = SVG_H - PAD_T - PAD_B;
    let sx = |t: f64| PAD_L + (t - x0) / (x1 - x0) * plot_w;
    let sy = |v: f64| PAD_T + (y1 - v) / (y1 - y0) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        SVG_W / 2.0,
        escape(panel.title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{PAD_L:.2}" y="{PAD_T:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="black"/>"#
    );

    let n_y = ((y1 - y0) / ystep).round() as usize;
    for i in 0..=n_y {
        let v = y0 + i as f64 * ystep;
        let y = sy(v);
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            PAD_L,
            PAD_L + plot_w
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            PAD_L - 6.0,
            y + 4.0,
            format_tick(v, ystep)
        );
    }
    let years = (x1 - x0).floor() as i64;
    for i in 0..=years {
        let t = x0 + i as f64;
        let x = sx(t);
        let label = panel
            .first_date
            .checked_add_months(Months::new(12 * i as u32))
            .map(|d| d.format("%b %Y").to_string())
            .unwrap_or_default();
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            PAD_T + plot_h,
            PAD_T + plot_h + 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#,
            PAD_T + plot_h + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" transform="rotate(-90 16 {:.2})" text-anchor="middle">percent</text>"#,
        PAD_T + plot_h / 2.0,
        PAD_T + plot_h / 2.0
    );

    for (i, &t) in panel.survey_times.iter().enumerate() {
        let x = sx(t);
        let (ylo, yhi) = (sy(panel.ci_low[i]), sy(panel.ci_high[i]));
        let _ = writeln!(
            s,
            r#"<g stroke="black"><line x1="{x:.2}" y1="{ylo:.2}" x2="{x:.2}" y2="{yhi:.2}"/><line x1="{:.2}" y1="{ylo:.2}" x2="{:.2}" y2="{ylo:.2}"/><line x1="{:.2}" y1="{yhi:.2}" x2="{:.2}" y2="{yhi:.2}"/></g>"#,
            x - 4.0,
            x + 4.0,
            x - 4.0,
            x + 4.0
        );
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{:.2}" r="2.5" fill="black"/>"#,
            sy(panel.survey_means[i])
        );
    }

    for line in [panel.band_low, panel.band_high] {
        let pts: Vec<String> = panel
            .grid
            .iter()
            .zip(line)
            .map(|(&t, &v)| format!("{:.2},{:.2}", sx(t), sy(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="red" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64, step: f64) -> String {
    if step >= 1.0 {
        format!("{v:.0}")
    } else {
        let digits = (-step.log10().floor()) as usize;
        format!("{v:.digits$}")
    }
}

/// Writes one band SVG per category into `out_dir` as
/// `<prefix>_<category>.svg` and returns the paths.
pub fn render_band_svg(
    band: &ConfidenceBand,
    quantiles: &[QuantileSeries],
    surveys: &SurveySet,
    out_dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    let first = surveys
        .records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no surveys to plot".into()))?;
    let times = surveys.times();
    let mut paths = Vec::with_capacity(quantiles.len());
    for (c, q) in quantiles.iter().enumerate() {
        let means: Vec<f64> = surveys.records.iter().map(|r| 100.0 * r.theta[c]).collect();
        let panel = BandPanel {
            title: &q.category,
            first_date: first.date,
            survey_times: &times,
            survey_means: &means,
            ci_low: &q.lower,
            ci_high: &q.upper,
            grid: &band.grid,
            band_low: &band.lower[c],
            band_high: &band.upper[c],
        };
        let slug: String = q
            .category
            .chars()
            .map(|ch| {
                if ch.is_ascii_alphanumeric() {
                    ch.to_ascii_lowercase()
                } else {
                    '_'
                }
            })
            .collect();
        let path = out_dir.join(format!("{prefix}_{slug}.svg"));
        write_text(&path, &band_svg(&panel))?;
        paths.push(path);
    }
    Ok(paths)
}
