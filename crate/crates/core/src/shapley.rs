//! Exact Shapley attributions for [`Forest`] under the path-dependent
//! (cover-weighted) value function.
//!
//! Two routes compute the same quantity: [`brute_shap`] enumerates every
//! coalition of the features the forest actually splits on, and
//! [`tree_shap`] runs the polynomial-time path algorithm over each tree.
//! Forest attributions are the mean of per-tree attributions.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::global_importance;
use crate::error::{Error, Result};
use crate::features::{FeatureSchema, FeatureTable};
use crate::forest::{Forest, Tree, TreeNode};
use crate::util::{argsort_desc, average_ranks};

/// Largest number of used features the subset enumeration accepts.
pub const ORACLE_MAX_FEATURES: usize = 20;

/// Relative tolerance on `base + Σφ = prediction`.
pub const ADDITIVITY_TOL: f64 = 1e-6;

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Shapley values by direct enumeration of all coalitions of the used
/// features `U`. Features outside `U` get exactly zero.
pub fn brute_shap(forest: &Forest, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != forest.n_features {
        return Err(Error::Dimension {
            expected: forest.n_features,
            got: x.len(),
        });
    }
    let used = forest.used_features();
    let p = used.len();
    if p > ORACLE_MAX_FEATURES {
        return Err(Error::OracleIntractable {
            used: p,
            limit: ORACLE_MAX_FEATURES,
        });
    }
    let mut phi = vec![0.0; forest.n_features];
    if p == 0 {
        return Ok(phi);
    }
    let mut slot = vec![usize::MAX; forest.n_features];
    for (k, &f) in used.iter().enumerate() {
        slot[f] = k;
    }

    let n_subsets = 1usize << p;
    let n_trees = forest.trees.len() as f64;
    let value: Vec<f64> = (0..n_subsets)
        .map(|mask| {
            let fixed = |f: usize| slot[f] != usize::MAX && mask & (1 << slot[f]) != 0;
            forest
                .trees
                .iter()
                .map(|t| t.eval_conditional_by(x, &fixed))
                .sum::<f64>()
                / n_trees
        })
        .collect();

    // |S|! (p - |S| - 1)! / p!, evaluated in log space
    let ln_p = ln_factorial(p);
    let weight: Vec<f64> = (0..p)
        .map(|s| (ln_factorial(s) + ln_factorial(p - s - 1) - ln_p).exp())
        .collect();

    for (k, &feature) in used.iter().enumerate() {
        let bit = 1usize << k;
        let mut total = 0.0;
        for mask in (0..n_subsets).filter(|m| m & bit == 0) {
            let s = mask.count_ones() as usize;
            total += weight[s] * (value[mask | bit] - value[mask]);
        }
        phi[feature] = total;
    }
    Ok(phi)
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: usize,
    zero_fraction: f64,
    one_fraction: f64,
    weight: f64,
}

fn extend_path(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: usize) {
    let depth = path.len();
    path.push(PathElement {
        feature,
        zero_fraction,
        one_fraction,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let denom = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].weight += one_fraction * path[i].weight * (i + 1) as f64 / denom;
        path[i].weight = zero_fraction * path[i].weight * (depth - i) as f64 / denom;
    }
}

fn unwind_path(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let PathElement {
        zero_fraction,
        one_fraction,
        ..
    } = path[index];
    let denom = (depth + 1) as f64;
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one_fraction != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * denom / ((i + 1) as f64 * one_fraction);
            next = tmp - path[i].weight * zero_fraction * (depth - i) as f64 / denom;
        } else {
            path[i].weight = path[i].weight * denom / (zero_fraction * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

/// Total weight of the path with element `index` removed.
fn unwound_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let PathElement {
        zero_fraction,
        one_fraction,
        ..
    } = path[index];
    let denom = (depth + 1) as f64;
    let mut total = 0.0;
    if one_fraction != 0.0 {
        let mut next = path[depth].weight;
        for i in (0..depth).rev() {
            let tmp = next * denom / ((i + 1) as f64 * one_fraction);
            total += tmp;
            next = path[i].weight - tmp * zero_fraction * (depth - i) as f64 / denom;
        }
    } else {
        for i in (0..depth).rev() {
            total += path[i].weight * denom / (zero_fraction * (depth - i) as f64);
        }
    }
    total
}

const ROOT_FEATURE: usize = usize::MAX;

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &Tree,
    x: &[f64],
    phi: &mut [f64],
    node: usize,
    mut path: Vec<PathElement>,
    zero_fraction: f64,
    one_fraction: f64,
    feature: usize,
) {
    extend_path(&mut path, zero_fraction, one_fraction, feature);
    match tree.nodes[node] {
        TreeNode::Leaf { value, .. } => {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let el = path[i];
                phi[el.feature] += w * (el.one_fraction - el.zero_fraction) * value;
            }
        }
        TreeNode::Internal {
            feature: split,
            threshold,
            left,
            right,
            cover,
        } => {
            let (hot, cold) = if x[split] < threshold {
                (left, right)
            } else {
                (right, left)
            };
            let mut incoming_zero = 1.0;
            let mut incoming_one = 1.0;
            if let Some(k) = (1..path.len()).find(|&k| path[k].feature == split) {
                incoming_zero = path[k].zero_fraction;
                incoming_one = path[k].one_fraction;
                unwind_path(&mut path, k);
            }
            let hot_fraction = tree.nodes[hot].cover() / cover;
            let cold_fraction = tree.nodes[cold].cover() / cover;
            recurse(
                tree,
                x,
                phi,
                hot,
                path.clone(),
                hot_fraction * incoming_zero,
                incoming_one,
                split,
            );
            recurse(tree, x, phi, cold, path, cold_fraction * incoming_zero, 0.0, split);
        }
    }
}

/// Adds the Shapley values of one tree at `x` into `phi`.
pub fn tree_shap_single(tree: &Tree, x: &[f64], phi: &mut [f64]) {
    let path = Vec::with_capacity(tree.depth() + 2);
    recurse(tree, x, phi, 0, path, 1.0, 1.0, ROOT_FEATURE);
}

/// Polynomial-time exact Shapley values of the forest at `x`.
pub fn tree_shap(forest: &Forest, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != forest.n_features {
        return Err(Error::Dimension {
            expected: forest.n_features,
            got: x.len(),
        });
    }
    Ok(tree_shap_unchecked(forest, x))
}

fn tree_shap_unchecked(forest: &Forest, x: &[f64]) -> Vec<f64> {
    let mut phi = vec![0.0; forest.n_features];
    for tree in &forest.trees {
        tree_shap_single(tree, x, &mut phi);
    }
    let n = forest.trees.len() as f64;
    for v in &mut phi {
        *v /= n;
    }
    phi
}

/// Per-sample, per-feature attributions sharing one base value.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapMatrix {
    pub base_value: f64,
    pub sample_ids: Vec<usize>,
    pub schema_fingerprint: String,
    n_features: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ShapSidecar {
    base_value: f64,
    schema_fingerprint: String,
    n_samples: usize,
    n_features: usize,
}

impl ShapMatrix {
    pub fn new(
        base_value: f64,
        sample_ids: Vec<usize>,
        schema_fingerprint: impl Into<String>,
        n_features: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != sample_ids.len() * n_features {
            return Err(Error::Dimension {
                expected: sample_ids.len() * n_features,
                got: values.len(),
            });
        }
        Ok(ShapMatrix {
            base_value,
            sample_ids,
            schema_fingerprint: schema_fingerprint.into(),
            n_features,
            values,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.n_features..(j + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_features.max(1))
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows().map(|r| r[i]).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Multiplies every attribution by `c` (base value untouched).
    pub fn scaled(&self, c: f64) -> ShapMatrix {
        ShapMatrix {
            values: self.values.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    pub(crate) fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        let got = schema.fingerprint();
        if got != self.schema_fingerprint {
            return Err(Error::Fingerprint {
                expected: self.schema_fingerprint.clone(),
                got,
            });
        }
        Ok(())
    }

    pub(crate) fn check_table(&self, table: &FeatureTable) -> Result<()> {
        self.check_schema(&table.schema)?;
        if table.sample_ids != self.sample_ids {
            return Err(Error::Invalid(
                "feature table and Shapley matrix cover different samples".into(),
            ));
        }
        Ok(())
    }

    /// Writes `<path>` (CSV, header from `schema`) and `<path>.json` sidecar.
    pub fn write(&self, path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<()> {
        let path = path.as_ref();
        self.check_schema(schema)?;
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut header = vec!["sample_id".to_string()];
        header.extend(schema.headers());
        w.write_record(&header)
            .map_err(|e| Error::format(path, e.to_string()))?;
        for (id, row) in self.sample_ids.iter().zip(self.rows()) {
            let mut rec = vec![id.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let sidecar = ShapSidecar {
            base_value: self.base_value,
            schema_fingerprint: self.schema_fingerprint.clone(),
            n_samples: self.n_samples(),
            n_features: self.n_features,
        };
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<ShapMatrix> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: ShapSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let width = r.headers().map_err(|e| Error::format(path, e.to_string()))?.len();
        if width != sidecar.n_features + 1 {
            return Err(Error::format(path, "column count disagrees with sidecar"));
        }
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let bad = |s: &str| Error::format(path, format!("unparsable value {s:?}"));
            ids.push(rec[0].parse::<usize>().map_err(|_| bad(&rec[0]))?);
            for field in rec.iter().skip(1) {
                values.push(field.parse::<f64>().map_err(|_| bad(field))?);
            }
        }
        if ids.len() != sidecar.n_samples {
            return Err(Error::format(path, "row count disagrees with sidecar"));
        }
        ShapMatrix::new(
            sidecar.base_value,
            ids,
            sidecar.schema_fingerprint,
            sidecar.n_features,
            values,
        )
        .map_err(|e| Error::format(path, e.to_string()))
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Explains every row of `table`; row order follows the table.
///
/// Fails with [`Error::Internal`] if any row violates local accuracy.
pub fn explain_dataset(forest: &Forest, table: &FeatureTable) -> Result<ShapMatrix> {
    forest.check_table(table)?;
    let base = forest.expected_value();
    let rows: Vec<Vec<f64>> = (0..table.n_samples())
        .into_par_iter()
        .map(|j| tree_shap_unchecked(forest, table.row(j)))
        .collect();
    for (j, phi) in rows.iter().enumerate() {
        let pred = forest.predict_unchecked(table.row(j));
        let total = base + phi.iter().sum::<f64>();
        if (total - pred).abs() > ADDITIVITY_TOL * pred.abs().max(1.0) {
            return Err(Error::Internal(format!(
                "additivity failed for sample {}: base + sum(phi) = {total}, prediction = {pred}",
                table.sample_ids[j]
            )));
        }
    }
    ShapMatrix::new(
        base,
        table.sample_ids.clone(),
        table.schema.fingerprint(),
        table.n_features(),
        rows.concat(),
    )
}

/// `(feature value, φ)` pairs for one feature, in sample order.
pub fn dependency_data(sm: &ShapMatrix, table: &FeatureTable, feature_id: usize) -> Result<Vec<(f64, f64)>> {
    sm.check_table(table)?;
    if feature_id >= sm.n_features() {
        return Err(Error::Invalid(format!(
            "feature id {feature_id} outside schema of {}",
            sm.n_features()
        )));
    }
    Ok(table
        .rows()
        .zip(sm.rows())
        .map(|(x, phi)| (x[feature_id], phi[feature_id]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeeswarmPoint {
    pub sample_id: usize,
    /// Average rank of the feature value divided by `n - 1`.
    pub percentile: f64,
    pub shap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeeswarmBlock {
    pub feature_id: usize,
    pub importance: f64,
    pub points: Vec<BeeswarmPoint>,
}

/// The `top_m` most important features (descending, ties by lower id),
/// each with per-sample value percentiles and attributions.
pub fn beeswarm_data(sm: &ShapMatrix, table: &FeatureTable, top_m: usize) -> Result<Vec<BeeswarmBlock>> {
    sm.check_table(table)?;
    if top_m == 0 || top_m > sm.n_features() {
        return Err(Error::Invalid(format!(
            "top_m {top_m} outside [1, {}]",
            sm.n_features()
        )));
    }
    let imp = global_importance(sm);
    let n = sm.n_samples();
    Ok(argsort_desc(&imp)
        .into_iter()
        .take(top_m)
        .map(|f| {
            let ranks = average_ranks(&table.column(f));
            let points = (0..n)
                .map(|j| BeeswarmPoint {
                    sample_id: sm.sample_ids[j],
                    percentile: if n > 1 { ranks[j] / (n - 1) as f64 } else { 0.5 },
                    shap: sm.row(j)[f],
                })
                .collect();
            BeeswarmBlock {
                feature_id: f,
                importance: imp[f],
                points,
            }
        })
        .collect())
}
