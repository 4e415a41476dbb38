//! Error statistics, kernel density curves, reciprocity gaps and report
//! files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::PathProfileTensor;

pub const KDE_POINTS: usize = 512;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("{predictions} predictions for {measurements} measurements")]
    LengthMismatch { predictions: usize, measurements: usize },
    #[error("kernel density needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("samples have zero spread; automatic bandwidth is undefined")]
    DegenerateBandwidth,
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("pair {index}: {message}")]
    Unpaired { index: usize, message: String },
    #[error("prediction failed: {0}")]
    Predictor(String),
    #[error("i/o error at {path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn check_lengths(predictions: &[f64], measurements: &[f64]) -> Result<(), EvalError> {
    if predictions.len() != measurements.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            measurements: measurements.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// `prediction - measurement` per sample.
pub fn errors(predictions: &[f64], measurements: &[f64]) -> Result<Vec<f64>, EvalError> {
    check_lengths(predictions, measurements)?;
    Ok(predictions.iter().zip(measurements).map(|(p, m)| p - m).collect())
}

pub fn rmse(predictions: &[f64], measurements: &[f64]) -> Result<f64, EvalError> {
    check_lengths(predictions, measurements)?;
    let sum: f64 = predictions
        .iter()
        .zip(measurements)
        .map(|(p, m)| (p - m) * (p - m))
        .sum();
    Ok((sum / predictions.len() as f64).sqrt())
}

pub fn mean(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Population standard deviation (divides by `n`).
pub fn population_sd(values: &[f64]) -> Result<f64, EvalError> {
    let m = mean(values)?;
    Ok((values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt())
}

/// Sample standard deviation (divides by `n - 1`); 0 for a single value.
pub fn sample_sd(values: &[f64]) -> Result<f64, EvalError> {
    let m = mean(values)?;
    if values.len() < 2 {
        return Ok(0.0);
    }
    Ok((values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt())
}

/// Silverman's rule, `1.06 * sd * n^(-1/5)` with the sample SD.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64, EvalError> {
    if samples.len() < 2 {
        return Err(EvalError::TooFewSamples(samples.len()));
    }
    let sd = sample_sd(samples)?;
    if !(sd > 0.0) {
        return Err(EvalError::DegenerateBandwidth);
    }
    Ok(1.06 * sd * (samples.len() as f64).powf(-0.2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

impl KdeCurve {
    /// Trapezoid rule over the grid.
    pub fn integral(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| (x[1] - x[0]) * (d[0] + d[1]) / 2.0)
            .sum()
    }
}

/// Gaussian kernel density on [`KDE_POINTS`] evenly spaced points spanning
/// `[min - 3h, max + 3h]`. `bandwidth = None` selects Silverman's rule.
pub fn kde(samples: &[f64], bandwidth: Option<f64>) -> Result<KdeCurve, EvalError> {
    if samples.len() < 2 {
        return Err(EvalError::TooFewSamples(samples.len()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(EvalError::InvalidBandwidth(h)),
        None => silverman_bandwidth(samples)?,
    };
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (KDE_POINTS - 1) as f64;
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let x: Vec<f64> = (0..KDE_POINTS).map(|k| lo + step * k as f64).collect();
    let density = x
        .iter()
        .map(|&xv| {
            norm * samples
                .iter()
                .map(|&s| {
                    let u = (xv - s) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(KdeCurve {
        bandwidth: h,
        x,
        density,
    })
}

/// Anything that maps a profile to a path loss prediction in dB.
pub trait Predictor {
    fn predict_batch(&self, profiles: &[&PathProfileTensor]) -> Result<Vec<f64>, EvalError>;
}

impl Predictor for crate::nn::ModelParams {
    fn predict_batch(&self, profiles: &[&PathProfileTensor]) -> Result<Vec<f64>, EvalError> {
        self.predict(profiles).map_err(|e| EvalError::Predictor(e.to_string()))
    }
}

impl<F: Fn(&PathProfileTensor) -> f64> Predictor for F {
    fn predict_batch(&self, profiles: &[&PathProfileTensor]) -> Result<Vec<f64>, EvalError> {
        Ok(profiles.iter().map(|p| self(p)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub gaps: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

/// `prediction(first) - prediction(second)` per pair. Each pair must be one
/// link seen from both ends: the second link is the first with Tx and Rx
/// exchanged. Labels are ignored.
pub fn reciprocity_gap<P: Predictor + ?Sized>(
    model: &P,
    pairs: &[(&PathProfileTensor, &PathProfileTensor)],
) -> Result<GapSummary, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    for (index, (a, b)) in pairs.iter().enumerate() {
        let unpaired = |message: &str| EvalError::Unpaired {
            index,
            message: message.to_string(),
        };
        let s = b.link.swapped();
        let same_geometry = s.tx_x == a.link.tx_x
            && s.tx_y == a.link.tx_y
            && s.rx_x == a.link.rx_x
            && s.rx_y == a.link.rx_y
            && s.tx_height_agl == a.link.tx_height_agl
            && s.rx_height_agl == a.link.rx_height_agl
            && s.frequency == a.link.frequency;
        if !same_geometry {
            return Err(unpaired("second profile is not the first link reversed"));
        }
        if a.orientation == b.orientation {
            return Err(unpaired("both profiles carry the same orientation"));
        }
    }
    let first: Vec<&PathProfileTensor> = pairs.iter().map(|p| p.0).collect();
    let second: Vec<&PathProfileTensor> = pairs.iter().map(|p| p.1).collect();
    let pa = model.predict_batch(&first)?;
    let pb = model.predict_batch(&second)?;
    let gaps: Vec<f64> = pa.iter().zip(&pb).map(|(a, b)| a - b).collect();
    Ok(GapSummary {
        mean: mean(&gaps)?,
        sd: population_sd(&gaps)?,
        gaps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    /// Prediction minus measurement, dB.
    pub errors: Vec<f64>,
    pub rmse: f64,
    pub mean_error: f64,
    /// Population SD of the errors.
    pub sd_error: f64,
    pub kde: Option<KdeCurve>,
    pub gaps: Option<GapSummary>,
}

impl EvalReport {
    pub fn from_errors(label: impl Into<String>, errors: Vec<f64>) -> Result<Self, EvalError> {
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len().max(1) as f64).sqrt();
        Ok(Self {
            label: label.into(),
            mean_error: mean(&errors)?,
            sd_error: population_sd(&errors)?,
            rmse,
            kde: None,
            gaps: None,
            errors,
        })
    }

    pub fn new(label: impl Into<String>, predictions: &[f64], measurements: &[f64]) -> Result<Self, EvalError> {
        Self::from_errors(label, errors(predictions, measurements)?)
    }

    /// Adds a Silverman-bandwidth density curve of the errors.
    pub fn with_kde(mut self) -> Result<Self, EvalError> {
        self.kde = Some(kde(&self.errors, None)?);
        Ok(self)
    }
}

/// One row of a summary table: per-`n` (mean, SD) of a metric across
/// repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub cells: Vec<(f64, f64)>,
}

/// Table shaped like the RMSE tables: holdout rows then a `Mean` row, one
/// (mean, SD) column pair per augmentation count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub test_set: String,
    pub n_values: Vec<usize>,
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    /// `values[holdout][n]` holds the per-repeat metric. Cell SD is the
    /// sample SD across repeats; the `Mean` row averages the holdout means
    /// and the holdout SDs.
    pub fn build(
        test_set: &str,
        n_values: &[usize],
        values: &BTreeMap<String, Vec<Vec<f64>>>,
    ) -> Result<Self, EvalError> {
        let mut rows = Vec::new();
        for (holdout, per_n) in values {
            if per_n.len() != n_values.len() {
                return Err(EvalError::LengthMismatch {
                    predictions: per_n.len(),
                    measurements: n_values.len(),
                });
            }
            let cells = per_n
                .iter()
                .map(|v| Ok((mean(v)?, sample_sd(v)?)))
                .collect::<Result<Vec<_>, EvalError>>()?;
            rows.push(SummaryRow {
                label: holdout.clone(),
                cells,
            });
        }
        if rows.is_empty() {
            return Err(EvalError::Empty);
        }
        let mean_row = (0..n_values.len())
            .map(|k| {
                let m: Vec<f64> = rows.iter().map(|r| r.cells[k].0).collect();
                let s: Vec<f64> = rows.iter().map(|r| r.cells[k].1).collect();
                Ok((mean(&m)?, mean(&s)?))
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        rows.push(SummaryRow {
            label: "Mean".into(),
            cells: mean_row,
        });
        Ok(Self {
            test_set: test_set.into(),
            n_values: n_values.to_vec(),
            rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("holdout");
        for n in &self.n_values {
            s.push_str(&format!(",n{n}_mean,n{n}_sd"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.label);
            for (m, sd) in &r.cells {
                s.push_str(&format!(",{m},{sd}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Published figures, kept for side-by-side reading only. They come from
/// measured drive tests at full scale and are not expected to be reproduced
/// by synthetic desk-scale runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperReference {
    pub note: String,
    /// Mean RMSE (dB) without augmentation per test set.
    pub original_model_rmse: BTreeMap<String, f64>,
    /// Mean RMSE (dB) per test set for n = 0, 500, 3000.
    pub augmented_rmse: BTreeMap<String, [f64; 3]>,
    /// Reciprocity gap mean and SD (dB) for n = 0, 500, 3000.
    pub gap_mean: [f64; 3],
    pub gap_sd: [f64; 3],
}

impl Default for PaperReference {
    fn default() -> Self {
        let m = |v: &[(&str, f64)]| v.iter().map(|(k, x)| (k.to_string(), *x)).collect();
        let a = |v: &[(&str, [f64; 3])]| v.iter().map(|(k, x)| (k.to_string(), *x)).collect();
        Self {
            note: "published full-scale values from measured data; not reproducible here".into(),
            original_model_rmse: m(&[("BS-to-UE", 7.35), ("UE-to-BS", 16.20), ("BS-to-BS", 7.33)]),
            augmented_rmse: a(&[
                ("BS-to-UE", [7.35, 7.32, 7.36]),
                ("UE-to-BS", [16.20, 7.76, 7.42]),
                ("BS-to-BS", [7.33, 7.16, 7.09]),
            ]),
            gap_mean: [12.50, -0.05, -0.02],
            gap_sd: [9.48, 4.74, 3.90],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema_version: u32,
    /// Free-form configuration record (experiment, profile and model config).
    pub configs: serde_json::Value,
    pub bandwidth_rule: String,
    pub tables: Vec<SummaryTable>,
    /// Pooled error reports keyed by curve name, e.g. `identity_n0`.
    pub reports: BTreeMap<String, EvalReport>,
    pub paper_reference: PaperReference,
}

impl ReportBundle {
    pub fn new(configs: serde_json::Value, tables: Vec<SummaryTable>, reports: BTreeMap<String, EvalReport>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            configs,
            bandwidth_rule: "silverman: 1.06 * sample_sd * n^(-1/5)".into(),
            tables,
            reports,
            paper_reference: PaperReference::default(),
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

pub fn kde_csv(curve: &KdeCurve) -> String {
    let mut s = String::from("x_db,density\n");
    for (x, d) in curve.x.iter().zip(&curve.density) {
        s.push_str(&format!("{x},{d}\n"));
    }
    s
}

/// Writes `report.json`, `summary_<set>.csv` for each table and
/// `kde_<name>.csv` for each report carrying a curve. Returns the paths in
/// the order written.
pub fn emit_report(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir).map_err(|e| EvalError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut written = Vec::new();
    let json = serde_json::to_vec_pretty(bundle).map_err(|e| EvalError::Io {
        path: dir.join("report.json"),
        message: e.to_string(),
    })?;
    let p = dir.join("report.json");
    write_file(&p, &json)?;
    written.push(p);
    for t in &bundle.tables {
        let p = dir.join(format!("summary_{}.csv", t.test_set));
        write_file(&p, t.to_csv().as_bytes())?;
        written.push(p);
    }
    for (name, r) in &bundle.reports {
        if let Some(curve) = &r.kde {
            let p = dir.join(format!("kde_{name}.csv"));
            write_file(&p, kde_csv(curve).as_bytes())?;
            written.push(p);
        }
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<ReportBundle, EvalError> {
    let bytes = fs::read(path).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let r = rmse(&[100.0, 110.0, 95.0], &[100.0, 100.0, 100.0]).unwrap();
        assert!((r - (125.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r - 6.455).abs() < 1e-3);
        assert!(matches!(rmse(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(rmse(&[1.0], &[]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn report_fields_are_consistent() {
        let r = EvalReport::new("t", &[101.0, 97.0, 110.0, 100.0], &[100.0; 4]).unwrap();
        let ms = r.errors.iter().map(|e| e * e).sum::<f64>() / 4.0;
        assert!((r.rmse * r.rmse - ms).abs() < 1e-9);
        assert!(r.rmse >= r.mean_error.abs());
        assert!((r.rmse * r.rmse - (r.mean_error * r.mean_error + r.sd_error * r.sd_error)).abs() < 1e-9);
    }

    #[test]
    fn kde_is_symmetric_and_normalised() {
        let c = kde(&[-1.0, 1.0], Some(1.0)).unwrap();
        assert_eq!(c.x.len(), KDE_POINTS);
        for k in 0..KDE_POINTS {
            assert!((c.density[k] - c.density[KDE_POINTS - 1 - k]).abs() < 1e-12);
        }
        // mass of two unit Gaussians at -1 and 1 inside [-4, 4]
        assert!((c.integral() - 0.998_650).abs() < 1e-5);
        assert!(c.density.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn kde_of_a_realistic_sample_integrates_to_one() {
        // deterministic roughly normal sample: sums of uniform sequences
        let samples: Vec<f64> = (0..500)
            .map(|k| {
                (0..6)
                    .map(|j| ((k * 7919 + j * 104_729) % 1000) as f64 / 1000.0)
                    .sum::<f64>()
                    * 4.0
                    - 12.0
            })
            .collect();
        let c = kde(&samples, None).unwrap();
        assert!((c.integral() - 1.0).abs() < 1e-3, "{}", c.integral());
    }

    #[test]
    fn kde_errors() {
        assert!(matches!(kde(&[1.0], None), Err(EvalError::TooFewSamples(1))));
        assert!(matches!(
            kde(&[2.0, 2.0, 2.0], None),
            Err(EvalError::DegenerateBandwidth)
        ));
        assert!(matches!(
            kde(&[1.0, 2.0], Some(0.0)),
            Err(EvalError::InvalidBandwidth(_))
        ));
        assert!(kde(&[2.0, 2.0], Some(0.5)).is_ok());
    }

    #[test]
    fn summary_table_has_mean_row() {
        let mut v = BTreeMap::new();
        v.insert("A".to_string(), vec![vec![1.0, 3.0], vec![2.0, 2.0]]);
        v.insert("B".to_string(), vec![vec![5.0, 5.0], vec![4.0, 6.0]]);
        let t = SummaryTable::build("identity", &[0, 80], &v).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[2].label, "Mean");
        assert_eq!(t.rows[2].cells[0].0, 3.5);
        assert!((t.rows[0].cells[0].1 - 2f64.sqrt()).abs() < 1e-12);
        let csv = t.to_csv();
        assert!(csv.starts_with("holdout,n0_mean,n0_sd,n80_mean,n80_sd\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
