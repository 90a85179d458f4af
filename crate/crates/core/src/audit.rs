//! Residual diagnostics and red-flag detection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapley::ShapMatrix;
use crate::util::{argsort_desc, mean, quantile_sorted, std_pop};

pub const HISTOGRAM_BINS: usize = 20;
pub const MIN_RESIDUAL_SAMPLES: usize = 10;
pub const TOP_CONTRIBUTIONS: usize = 5;

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Invalid("MAE of zero samples".into()));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `HISTOGRAM_BINS + 1` equal-width edges over `[min, max]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    fn new(values: &[f64]) -> Self {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / HISTOGRAM_BINS as f64;
        let edges = (0..=HISTOGRAM_BINS)
            .map(|k| if k == HISTOGRAM_BINS { hi } else { lo + k as f64 * width })
            .collect();
        let mut counts = vec![0; HISTOGRAM_BINS];
        for &v in values {
            // a degenerate range puts everything into the first bin
            let bin = if width > 0.0 {
                (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1)
            } else {
                0
            };
            counts[bin] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    /// `pred - truth`, in sample order.
    pub residuals: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub histogram: Histogram,
    /// `(truth, pred)` pairs.
    pub scatter: Vec<(f64, f64)>,
    pub pred_sd: f64,
    pub truth_sd: f64,
    pub sd_ratio: f64,
    pub truth_q10: f64,
    pub truth_q90: f64,
    /// Fraction of predictions inside `[truth_q10, truth_q90]`.
    pub central_coverage: f64,
}

pub fn residual_summary(pred: &[f64], truth: &[f64]) -> Result<ResidualSummary> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    let n = pred.len();
    if n < MIN_RESIDUAL_SAMPLES {
        return Err(Error::Invalid(format!(
            "residual summary needs at least {MIN_RESIDUAL_SAMPLES} samples, got {n}"
        )));
    }
    let residuals: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let mut sorted = residuals.clone();
    sorted.sort_by(f64::total_cmp);
    let mut truth_sorted = truth.to_vec();
    truth_sorted.sort_by(f64::total_cmp);
    let truth_q10 = quantile_sorted(&truth_sorted, 0.1);
    let truth_q90 = quantile_sorted(&truth_sorted, 0.9);
    let inside = pred.iter().filter(|&&p| p >= truth_q10 && p <= truth_q90).count();

    let pred_sd = std_pop(pred);
    let truth_sd = std_pop(truth);
    let sd_ratio = if truth_sd > 0.0 {
        pred_sd / truth_sd
    } else if pred_sd == 0.0 {
        1.0
    } else {
        f64::MAX
    };

    Ok(ResidualSummary {
        mean: mean(&residuals),
        sd: std_pop(&residuals),
        q25: quantile_sorted(&sorted, 0.25),
        q50: quantile_sorted(&sorted, 0.5),
        q75: quantile_sorted(&sorted, 0.75),
        histogram: Histogram::new(&residuals),
        scatter: truth.iter().cloned().zip(pred.iter().cloned()).collect(),
        residuals,
        pred_sd,
        truth_sd,
        sd_ratio,
        truth_q10,
        truth_q90,
        central_coverage: inside as f64 / n as f64,
    })
}

impl ResidualSummary {
    /// Long-format CSV: `scatter`, `histogram` and `quantile` sections.
    pub fn write_csv(&self, path: impl AsRef<Path>, sample_ids: &[usize]) -> Result<()> {
        let path = path.as_ref();
        let err = |e: csv::Error| Error::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["section", "key", "a", "b", "c"]).map_err(err)?;
        for ((id, (t, p)), r) in sample_ids.iter().zip(&self.scatter).zip(&self.residuals) {
            w.write_record([
                "scatter".into(),
                id.to_string(),
                t.to_string(),
                p.to_string(),
                r.to_string(),
            ])
            .map_err(err)?;
        }
        for (k, c) in self.histogram.counts.iter().enumerate() {
            w.write_record([
                "histogram".into(),
                k.to_string(),
                self.histogram.edges[k].to_string(),
                self.histogram.edges[k + 1].to_string(),
                c.to_string(),
            ])
            .map_err(err)?;
        }
        for (name, v) in [
            ("q25", self.q25),
            ("q50", self.q50),
            ("q75", self.q75),
            ("mean", self.mean),
            ("sd", self.sd),
        ] {
            w.write_record(["quantile", name, &v.to_string(), "", ""])
                .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Range collapse needs `pred_sd / truth_sd` below this.
    pub sd_ratio: f64,
    /// ...and central coverage above this.
    pub coverage: f64,
    /// Importance mass the concentrated subset must carry.
    pub mass: f64,
    /// Subset size limit as a fraction of all features.
    pub feature_fraction: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            sd_ratio: 0.5,
            coverage: 0.9,
            mass: 0.5,
            feature_fraction: 0.01,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sd_ratio", self.sd_ratio),
            ("coverage", self.coverage),
            ("mass", self.mass),
            ("feature_fraction", self.feature_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("threshold {name} = {v} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RedFlag {
    RangeCollapse,
    ConcentratedImportance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeEvidence {
    pub sd_ratio: f64,
    pub central_coverage: f64,
    pub sd_ratio_threshold: f64,
    pub coverage_threshold: f64,
    pub raised: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationEvidence {
    /// Smallest number of features carrying the mass threshold.
    pub subset_size: usize,
    pub n_features: usize,
    pub total_importance: f64,
    pub mass_threshold: f64,
    pub feature_fraction: f64,
    /// `feature_fraction * n_features`.
    pub size_cutoff: f64,
    pub raised: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedFlagReport {
    pub flags: Vec<RedFlag>,
    pub range: RangeEvidence,
    pub concentration: ConcentrationEvidence,
}

impl RedFlagReport {
    pub fn has(&self, flag: RedFlag) -> bool {
        self.flags.contains(&flag)
    }
}

/// Smallest number of top features whose importance reaches `mass` of the
/// total. Zero for an all-zero vector.
pub fn concentration_subset_size(imp: &[f64], mass: f64) -> usize {
    let total: f64 = imp.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (n, i) in argsort_desc(imp).into_iter().enumerate() {
        acc += imp[i];
        if acc >= mass * total {
            return n + 1;
        }
    }
    imp.len()
}

pub fn detect_red_flags(rs: &ResidualSummary, imp: &[f64], thresholds: &Thresholds) -> Result<RedFlagReport> {
    thresholds.validate()?;
    if imp.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::Invalid("importances must be finite and non-negative".into()));
    }
    let range_raised = rs.sd_ratio < thresholds.sd_ratio && rs.central_coverage > thresholds.coverage;
    let range = RangeEvidence {
        sd_ratio: rs.sd_ratio,
        central_coverage: rs.central_coverage,
        sd_ratio_threshold: thresholds.sd_ratio,
        coverage_threshold: thresholds.coverage,
        raised: range_raised,
    };

    let total: f64 = imp.iter().sum();
    let size_cutoff = thresholds.feature_fraction * imp.len() as f64;
    let subset_size = concentration_subset_size(imp, thresholds.mass);
    let (conc_raised, note) = if total > 0.0 {
        (subset_size as f64 <= size_cutoff, None)
    } else {
        (
            false,
            Some("total importance is zero; concentration not assessed".to_string()),
        )
    };
    let concentration = ConcentrationEvidence {
        subset_size,
        n_features: imp.len(),
        total_importance: total,
        mass_threshold: thresholds.mass,
        feature_fraction: thresholds.feature_fraction,
        size_cutoff,
        raised: conc_raised,
        note,
    };

    let mut flags = Vec::new();
    if range_raised {
        flags.push(RedFlag::RangeCollapse);
    }
    if conc_raised {
        flags.push(RedFlag::ConcentratedImportance);
    }
    Ok(RedFlagReport {
        flags,
        range,
        concentration,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    Overestimation,
    Underestimation,
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub feature_id: usize,
    pub shap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeCase {
    pub kind: CaseKind,
    pub sample_id: usize,
    pub residual: f64,
    /// Up to five features by `|φ|`, descending, ties to the lower id.
    pub top_features: Vec<Contribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeCases {
    pub overestimation: Vec<ExtremeCase>,
    pub underestimation: Vec<ExtremeCase>,
    pub best: Vec<ExtremeCase>,
}

/// The `n_cases` largest positive residuals, largest negative residuals and
/// smallest `|residual|`s, each with its top contributions. Cases are picked
/// in that order from the samples not yet taken, so the lists are disjoint.
pub fn explain_extremes(sm: &ShapMatrix, pred: &[f64], truth: &[f64], n_cases: usize) -> Result<ExtremeCases> {
    let n = sm.n_samples();
    if pred.len() != n || truth.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: pred.len().min(truth.len()),
        });
    }
    if n_cases == 0 || 3 * n_cases > n {
        return Err(Error::Invalid(format!(
            "need 1 <= n_cases and 3 * n_cases <= {n}, got n_cases = {n_cases}"
        )));
    }
    let residual: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let mut taken = vec![false; n];
    let case = |j: usize, kind: CaseKind| {
        let row = sm.row(j);
        let mags: Vec<f64> = row.iter().map(|v| v.abs()).collect();
        ExtremeCase {
            kind,
            sample_id: sm.sample_ids[j],
            residual: residual[j],
            top_features: argsort_desc(&mags)
                .into_iter()
                .take(TOP_CONTRIBUTIONS)
                .map(|i| Contribution {
                    feature_id: i,
                    shap: row[i],
                })
                .collect(),
        }
    };
    let mut pick = |score: Vec<f64>, kind: CaseKind| -> Vec<ExtremeCase> {
        let chosen: Vec<usize> = argsort_desc(&score)
            .into_iter()
            .filter(|&j| !taken[j])
            .take(n_cases)
            .collect();
        for &j in &chosen {
            taken[j] = true;
        }
        chosen.into_iter().map(|j| case(j, kind)).collect()
    };
    let overestimation = pick(residual.clone(), CaseKind::Overestimation);
    let underestimation = pick(residual.iter().map(|r| -r).collect(), CaseKind::Underestimation);
    let best = pick(residual.iter().map(|r| -r.abs()).collect(), CaseKind::Best);
    Ok(ExtremeCases {
        overestimation,
        underestimation,
        best,
    })
}
