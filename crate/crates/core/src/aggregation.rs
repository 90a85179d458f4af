//! Global importance, group attribution and band x transformation
//! aggregation of a [`ShapMatrix`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSchema, Provenance, TransformationGroup};
use crate::shapley::ShapMatrix;

/// `imp(i) = Σ_j |φ_i(x_j)|` (a sum over samples, not a mean).
pub fn global_importance(sm: &ShapMatrix) -> Vec<f64> {
    let mut imp = vec![0.0; sm.n_features()];
    for row in sm.rows() {
        for (acc, v) in imp.iter_mut().zip(row) {
            *acc += v.abs();
        }
    }
    imp
}

/// Named, pairwise disjoint feature sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMap {
    names: Vec<String>,
    members: Vec<Vec<usize>>,
    n_features: usize,
    coverage: bool,
}

impl GroupMap {
    pub fn new(groups: Vec<(String, Vec<usize>)>, n_features: usize) -> Result<Self> {
        let mut owner: Vec<Option<usize>> = vec![None; n_features];
        let mut names = Vec::with_capacity(groups.len());
        let mut members = Vec::with_capacity(groups.len());
        for (g, (name, ids)) in groups.into_iter().enumerate() {
            for &i in &ids {
                let slot = owner.get_mut(i).ok_or_else(|| {
                    Error::Invalid(format!("group {name:?}: feature {i} outside schema of {n_features}"))
                })?;
                if let Some(prev) = *slot {
                    return Err(Error::Invalid(format!(
                        "feature {i} belongs to both {:?} and {name:?}",
                        names[prev]
                    )));
                }
                *slot = Some(g);
            }
            names.push(name);
            members.push(ids);
        }
        let coverage = owner.iter().all(Option::is_some);
        Ok(GroupMap {
            names,
            members,
            n_features,
            coverage,
        })
    }

    /// One group per transformation present in the schema.
    pub fn by_transformation(schema: &FeatureSchema) -> Self {
        let groups = schema
            .groups()
            .into_iter()
            .map(|g| (g.name().to_string(), schema.group_ids(g)))
            .collect();
        GroupMap::new(groups, schema.len()).expect("schema groups are disjoint")
    }

    /// One group per band (`b:<index>`) plus `nonspectral` when present.
    pub fn by_band(schema: &FeatureSchema) -> Self {
        let mut bands: Vec<Vec<usize>> = vec![Vec::new(); schema.axis.n_bands];
        let mut other = Vec::new();
        for (i, e) in schema.entries.iter().enumerate() {
            match e.provenance {
                Provenance::Band(b) => bands[b].push(i),
                Provenance::Nonspectral => other.push(i),
            }
        }
        let mut groups: Vec<(String, Vec<usize>)> = bands
            .into_iter()
            .enumerate()
            .map(|(b, ids)| (format!("b:{b}"), ids))
            .collect();
        if !other.is_empty() {
            groups.push(("nonspectral".to_string(), other));
        }
        GroupMap::new(groups, schema.len()).expect("band groups are disjoint")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn members(&self, g: usize) -> &[usize] {
        &self.members[g]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// True iff the groups together contain every feature id.
    pub fn coverage(&self) -> bool {
        self.coverage
    }
}

/// `φ_F(x) = Σ_{i∈F} φ_i(x)` for every group `F`.
pub fn group_attribution(phi: &[f64], gm: &GroupMap) -> Result<Vec<f64>> {
    if phi.len() != gm.n_features {
        return Err(Error::Dimension {
            expected: gm.n_features,
            got: phi.len(),
        });
    }
    Ok(gm.members.iter().map(|ids| ids.iter().map(|&i| phi[i]).sum()).collect())
}

/// How per-feature attributions are folded into a group score per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupStatistic {
    /// `|Σ_{i∈F} φ_i|`, the magnitude of the group attribution.
    #[default]
    AbsOfSum,
    /// `Σ_{i∈F} |φ_i|`, the summed feature importances.
    SumOfAbs,
}

/// Per transformation group, the group score summed over samples.
pub fn transformation_importance(
    sm: &ShapMatrix,
    schema: &FeatureSchema,
    statistic: GroupStatistic,
) -> Result<Vec<(TransformationGroup, f64)>> {
    sm.check_schema(schema)?;
    Ok(schema
        .groups()
        .into_iter()
        .map(|g| {
            let ids = schema.group_ids(g);
            let total = sm
                .rows()
                .map(|row| match statistic {
                    GroupStatistic::AbsOfSum => ids.iter().map(|&i| row[i]).sum::<f64>().abs(),
                    GroupStatistic::SumOfAbs => ids.iter().map(|&i| row[i].abs()).sum::<f64>(),
                })
                .sum();
            (g, total)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonspectralCell {
    pub group: String,
    pub value: f64,
}

/// Mean `|φ|` per (transformation group, wavelength bin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandGroupMatrix {
    /// Spectral transformation groups, one row each.
    pub rows: Vec<String>,
    /// Bin labels `"<lo>-<hi>"` in nm.
    pub cols: Vec<String>,
    /// `n_bins + 1` edges partitioning `[lambda_min, lambda_max]`.
    pub bin_edges: Vec<f64>,
    pub cells: Vec<Vec<f64>>,
    /// True where no feature of the row group falls in the bin.
    pub empty: Vec<Vec<bool>>,
    /// Groups without band provenance, one value each.
    pub nonspectral: Vec<NonspectralCell>,
    pub statistic: String,
}

pub fn band_transformation_matrix(sm: &ShapMatrix, schema: &FeatureSchema, n_bins: usize) -> Result<BandGroupMatrix> {
    sm.check_schema(schema)?;
    if n_bins == 0 {
        return Err(Error::Invalid("n_bins must be at least 1".into()));
    }
    let axis = schema.axis;
    let width = (axis.lambda_max_nm - axis.lambda_min_nm) / n_bins as f64;
    let bin_edges: Vec<f64> = (0..=n_bins)
        .map(|k| {
            if k == n_bins {
                axis.lambda_max_nm
            } else {
                axis.lambda_min_nm + k as f64 * width
            }
        })
        .collect();
    let cols = bin_edges
        .windows(2)
        .map(|w| format!("{:.1}-{:.1}", w[0], w[1]))
        .collect();
    // band i sits at fraction i / (n_bands - 1) of the axis
    let bin_of = |band: usize| (band * n_bins / (axis.n_bands - 1)).min(n_bins - 1);

    let abs_mean = |ids: &[usize]| -> f64 {
        let total: f64 = sm
            .rows()
            .map(|row| ids.iter().map(|&i| row[i].abs()).sum::<f64>())
            .sum();
        total / (ids.len() * sm.n_samples()) as f64
    };

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let mut empty = Vec::new();
    let mut nonspectral = Vec::new();
    for g in schema.groups() {
        let ids = schema.group_ids(g);
        let mut per_bin: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
        let mut other = Vec::new();
        for &i in &ids {
            match schema.entries[i].provenance {
                Provenance::Band(b) => per_bin[bin_of(b)].push(i),
                Provenance::Nonspectral => other.push(i),
            }
        }
        if !other.is_empty() {
            nonspectral.push(NonspectralCell {
                group: g.name().to_string(),
                value: if sm.n_samples() == 0 { 0.0 } else { abs_mean(&other) },
            });
        }
        if per_bin.iter().all(Vec::is_empty) {
            continue;
        }
        rows.push(g.name().to_string());
        empty.push(per_bin.iter().map(Vec::is_empty).collect());
        cells.push(
            per_bin
                .iter()
                .map(|ids| {
                    if ids.is_empty() || sm.n_samples() == 0 {
                        0.0
                    } else {
                        abs_mean(ids)
                    }
                })
                .collect(),
        );
    }
    Ok(BandGroupMatrix {
        rows,
        cols,
        bin_edges,
        cells,
        empty,
        nonspectral,
        statistic: "mean_abs_shap".to_string(),
    })
}

fn csv_err(path: &Path, e: impl ToString) -> Error {
    Error::format(path, e.to_string())
}

/// `importance.csv`: one row per feature with provenance and `imp(i)`.
pub fn write_importance_csv(path: impl AsRef<Path>, schema: &FeatureSchema, imp: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["feature_id", "header", "group", "band", "wavelength_nm", "importance"])
        .map_err(|e| csv_err(path, e))?;
    for (i, (e, v)) in schema.entries.iter().zip(imp).enumerate() {
        let (band, wl) = match e.provenance {
            Provenance::Band(b) => (b.to_string(), schema.axis.wavelength_of(b)?.to_string()),
            Provenance::Nonspectral => ("NA".to_string(), "NA".to_string()),
        };
        w.write_record([
            i.to_string(),
            e.header(),
            e.group.name().to_string(),
            band,
            wl,
            v.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `groups.csv`: both group statistics per transformation group.
pub fn write_groups_csv(
    path: impl AsRef<Path>,
    abs_of_sum: &[(TransformationGroup, f64)],
    sum_of_abs: &[(TransformationGroup, f64)],
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["group", "spatial", "abs_of_sum", "sum_of_abs"])
        .map_err(|e| csv_err(path, e))?;
    for ((g, a), (_, s)) in abs_of_sum.iter().zip(sum_of_abs) {
        w.write_record([
            g.name().to_string(),
            g.is_spatial().to_string(),
            a.to_string(),
            s.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `heatmap.csv` (group x bin, with a trailing `nonspectral` column) and
/// a `heatmap.json` sidecar next to it.
pub fn write_heatmap(path: impl AsRef<Path>, m: &BandGroupMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["group".to_string()];
    header.extend(m.cols.iter().cloned());
    header.push("nonspectral".to_string());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (name, row) in m.rows.iter().zip(&m.cells) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        rec.push(String::new());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    for cell in &m.nonspectral {
        let mut rec = vec![cell.group.clone()];
        rec.extend(std::iter::repeat_n(String::new(), m.cols.len()));
        rec.push(cell.value.to_string());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = path.with_extension("json");
    let json = serde_json::to_string_pretty(m).expect("heatmap serializes");
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}
