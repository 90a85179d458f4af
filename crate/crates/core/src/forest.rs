//! Regression random forest: CART trees grown by variance reduction on
//! bootstrap samples with per-split feature subsampling.
//!
//! Every node records its cover (number of bootstrapped training rows that
//! reached it). Covers define the path-dependent conditional expectation
//! used by the Shapley engine.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Target;
use crate::error::{Error, Result};
use crate::features::FeatureTable;

pub const FOREST_VERSION: &str = "v1";

/// Offset between the per-target seeds derived from one master seed.
pub const TARGET_SEED_STRIDE: u64 = 1_000;

/// Seed of the forest for `target` under `master`.
pub fn target_seed(master: u64, target: Target) -> u64 {
    master.wrapping_add(TARGET_SEED_STRIDE * (target.index() as u64 + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        cover: f64,
    },
    Leaf {
        value: f64,
        cover: f64,
    },
}

impl TreeNode {
    pub fn cover(&self) -> f64 {
        match *self {
            TreeNode::Internal { cover, .. } | TreeNode::Leaf { cover, .. } => cover,
        }
    }
}

/// Array-encoded binary tree, root at index 0. `x[feature] < threshold`
/// goes left, everything else (ties included) goes right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(value: f64, cover: f64) -> Self {
        Tree {
            nodes: vec![TreeNode::Leaf { value, cover }],
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value, .. } => return value,
                TreeNode::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    /// Path-dependent conditional expectation `v_S(x)` for this tree.
    ///
    /// Splits on a feature in `fixed` follow `x`; all other splits are
    /// marginalized by cover-weighted averaging of both children.
    pub fn eval_conditional(&self, x: &[f64], fixed: &[bool]) -> f64 {
        self.eval_conditional_by(x, &|f| fixed.get(f).copied().unwrap_or(false))
    }

    pub(crate) fn eval_conditional_by(&self, x: &[f64], fixed: &dyn Fn(usize) -> bool) -> f64 {
        fn go(tree: &Tree, i: usize, x: &[f64], fixed: &dyn Fn(usize) -> bool) -> f64 {
            match tree.nodes[i] {
                TreeNode::Leaf { value, .. } => value,
                TreeNode::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                    cover,
                } => {
                    if fixed(feature) {
                        go(tree, if x[feature] < threshold { left } else { right }, x, fixed)
                    } else {
                        let cl = tree.nodes[left].cover();
                        let cr = tree.nodes[right].cover();
                        (cl * go(tree, left, x, fixed) + cr * go(tree, right, x, fixed)) / cover
                    }
                }
            }
        }
        go(self, 0, x, fixed)
    }

    /// Cover-weighted mean of the leaves, i.e. `v_∅`.
    pub fn expected_value(&self) -> f64 {
        self.eval_conditional_by(&[], &|_| false)
    }

    pub fn depth(&self) -> usize {
        fn go(tree: &Tree, i: usize) -> usize {
            match tree.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Internal { left, right, .. } => 1 + go(tree, left).max(go(tree, right)),
            }
        }
        go(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    /// Ascending, deduplicated features split on anywhere in the tree.
    pub fn used_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Internal { feature, .. } => Some(*feature),
                TreeNode::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Checks the binary-tree shape, feature bounds and cover sums.
    pub fn validate(&self, n_features: usize) -> std::result::Result<(), String> {
        if self.nodes.is_empty() {
            return Err("empty tree".into());
        }
        let mut seen = vec![false; self.nodes.len()];
        seen[0] = true;
        for (i, node) in self.nodes.iter().enumerate() {
            let cover = node.cover();
            if !(cover.is_finite() && cover > 0.0) {
                return Err(format!("node {i}: cover must be positive"));
            }
            match *node {
                TreeNode::Leaf { value, .. } => {
                    if !value.is_finite() {
                        return Err(format!("node {i}: non-finite leaf value"));
                    }
                }
                TreeNode::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                    cover,
                } => {
                    if feature >= n_features {
                        return Err(format!("node {i}: feature {feature} outside schema of {n_features}"));
                    }
                    if !threshold.is_finite() {
                        return Err(format!("node {i}: non-finite threshold"));
                    }
                    for child in [left, right] {
                        if child <= i || child >= self.nodes.len() || seen[child] {
                            return Err(format!("node {i}: invalid child index {child}"));
                        }
                        seen[child] = true;
                    }
                    let sum = self.nodes[left].cover() + self.nodes[right].cover();
                    if (sum - cover).abs() > 1e-9 * cover {
                        return Err(format!("node {i}: cover invariant violated ({sum} != {cover})"));
                    }
                }
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(format!("node {orphan} is unreachable"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Fraction of features considered at each split, in (0, 1].
    pub features_per_split: f64,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 200,
            max_depth: 12,
            min_samples_leaf: 2,
            features_per_split: 0.33,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("n_trees must be at least 1".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Config("min_samples_leaf must be at least 1".into()));
        }
        if !(self.features_per_split > 0.0 && self.features_per_split <= 1.0) {
            return Err(Error::Config(format!(
                "features_per_split {} outside (0, 1]",
                self.features_per_split
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ForestParams { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<Tree>,
    /// Mean of the training targets.
    pub baseline: f64,
    pub params: ForestParams,
    pub target: Target,
    pub n_features: usize,
    pub schema_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct ForestFile {
    version: String,
    target: Target,
    baseline: f64,
    n_features: usize,
    schema_fingerprint: String,
    params: ForestParams,
    trees: Vec<Tree>,
}

struct Grower<'a> {
    table: &'a FeatureTable,
    y: &'a [f64],
    /// `y` in fixed point; split scores use exact integer sums.
    yq: &'a [i64],
    params: &'a ForestParams,
    n_candidates: usize,
    nodes: Vec<TreeNode>,
}

struct Split {
    feature: usize,
    threshold: f64,
    reduction: f64,
    /// Distance between the two values straddling the threshold.
    gap: f64,
}

/// Scales `y` by a power of two so that `max |y|` maps to about `2^52` and
/// rounds. Sums of the result are exact, which makes a split's score a
/// function of the partition alone, independent of summation order.
fn quantize(y: &[f64]) -> Vec<i64> {
    let m = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m == 0.0 {
        return vec![0; y.len()];
    }
    let k = (52 - m.log2().ceil() as i32).clamp(-1000, 1000);
    let scale = 2f64.powi(k);
    y.iter().map(|v| (v * scale).round() as i64).collect()
}

impl Grower<'_> {
    fn grow(&mut self, rows: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        let cover = rows.len() as f64;
        let value = rows.iter().map(|&r| self.y[r]).sum::<f64>() / cover;
        self.nodes.push(TreeNode::Leaf { value, cover });

        if depth >= self.params.max_depth || rows.len() < 2 * self.params.min_samples_leaf {
            return id;
        }
        let first = self.y[rows[0]];
        if rows.iter().all(|&r| self.y[r] == first) {
            return id;
        }
        let Some(split) = self.best_split(&rows, rng) else {
            return id;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&r| self.table.row(r)[split.feature] < split.threshold);
        let left = self.grow(left_rows, depth + 1, rng);
        let right = self.grow(right_rows, depth + 1, rng);
        self.nodes[id] = TreeNode::Internal {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
            cover,
        };
        id
    }

    fn best_split(&self, rows: &[usize], rng: &mut ChaCha8Rng) -> Option<Split> {
        let n_features = self.table.n_features();
        let mut candidates = sample(rng, n_features, self.n_candidates).into_vec();
        candidates.sort_unstable();

        let n = rows.len();
        let min_leaf = self.params.min_samples_leaf;
        let total: i128 = rows.iter().map(|&r| self.yq[r] as i128).sum();
        let mut best: Option<Split> = None;
        let mut pairs: Vec<(f64, i64)> = Vec::with_capacity(n);
        for feature in candidates {
            pairs.clear();
            pairs.extend(rows.iter().map(|&r| (self.table.row(r)[feature], self.yq[r])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_sum: i128 = 0;
            for i in 1..n {
                left_sum += pairs[i - 1].1 as i128;
                if i < min_leaf || n - i < min_leaf || pairs[i - 1].0 == pairs[i].0 {
                    continue;
                }
                let (nl, nr) = (i as i128, (n - i) as i128);
                // between-group sum of squares, equal to the SSE reduction:
                // (SL*nr - SR*nl)^2 / (n*nl*nr)
                let d = (left_sum * nr - (total - left_sum) * nl) as f64;
                let reduction = d * d / (n as i128 * nl * nr) as f64;
                let (lo, hi) = (pairs[i - 1].0, pairs[i].0);
                let gap = hi - lo;
                // exact ties go to the wider margin, then to the lower feature id
                let better = match &best {
                    None => reduction > 0.0,
                    Some(b) => reduction > b.reduction || (reduction == b.reduction && gap > b.gap),
                };
                if better {
                    let mid = lo + (hi - lo) / 2.0;
                    best = Some(Split {
                        feature,
                        threshold: if mid > lo { mid } else { hi },
                        reduction,
                        gap,
                    });
                }
            }
        }
        best
    }
}

fn grow_tree(table: &FeatureTable, y: &[f64], yq: &[i64], params: &ForestParams, tree_index: usize) -> Tree {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(tree_index as u64);
    let n = y.len();
    let rows: Vec<usize> = if params.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let n_features = table.n_features();
    let n_candidates = ((params.features_per_split * n_features as f64).ceil() as usize).clamp(1, n_features);
    let mut grower = Grower {
        table,
        y,
        yq,
        params,
        n_candidates,
        nodes: Vec::new(),
    };
    grower.grow(rows, 0, &mut rng);
    Tree { nodes: grower.nodes }
}

impl Forest {
    /// Fits one forest. Deterministic in `params.seed`; tree `t` draws from
    /// ChaCha stream `t`, so results do not depend on thread scheduling.
    pub fn fit(table: &FeatureTable, y: &[f64], target: Target, params: &ForestParams) -> Result<Forest> {
        params.validate()?;
        if table.n_samples() == 0 || table.n_features() == 0 {
            return Err(Error::Invalid("cannot fit on an empty feature table".into()));
        }
        if y.len() != table.n_samples() {
            return Err(Error::Dimension {
                expected: table.n_samples(),
                got: y.len(),
            });
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite target at row {i}")));
        }
        let yq = quantize(y);
        let trees: Vec<Tree> = (0..params.n_trees)
            .into_par_iter()
            .map(|t| grow_tree(table, y, &yq, params, t))
            .collect();
        Ok(Forest {
            trees,
            baseline: y.iter().sum::<f64>() / y.len() as f64,
            params: params.clone(),
            target,
            n_features: table.n_features(),
            schema_fingerprint: table.schema.fingerprint(),
        })
    }

    /// Wraps hand-built trees; validates every tree.
    pub fn from_trees(
        trees: Vec<Tree>,
        n_features: usize,
        target: Target,
        schema_fingerprint: impl Into<String>,
    ) -> Result<Forest> {
        let forest = Forest {
            trees,
            baseline: 0.0,
            params: ForestParams::default(),
            target,
            n_features,
            schema_fingerprint: schema_fingerprint.into(),
        };
        forest.validate().map_err(Error::Invalid)?;
        Ok(forest)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.trees.is_empty() {
            return Err("forest has no trees".into());
        }
        for (t, tree) in self.trees.iter().enumerate() {
            tree.validate(self.n_features).map_err(|e| format!("tree {t}: {e}"))?;
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::Dimension {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_table(&self, table: &FeatureTable) -> Result<()> {
        let got = table.schema.fingerprint();
        if got != self.schema_fingerprint {
            return Err(Error::Fingerprint {
                expected: self.schema_fingerprint.clone(),
                got,
            });
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_table(&self, table: &FeatureTable) -> Result<Vec<f64>> {
        self.check_table(table)?;
        Ok(table.rows().map(|r| self.predict_unchecked(r)).collect())
    }

    /// Forest-level `v_S(x)`: mean of the per-tree conditional expectations.
    pub fn eval_conditional(&self, x: &[f64], fixed: &[bool]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.trees.iter().map(|t| t.eval_conditional(x, fixed)).sum::<f64>() / self.trees.len() as f64)
    }

    /// `v_∅`, the expected prediction under the tree covers.
    pub fn expected_value(&self) -> f64 {
        self.trees.iter().map(Tree::expected_value).sum::<f64>() / self.trees.len() as f64
    }

    pub fn used_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.trees.iter().flat_map(Tree::used_features).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub fn max_depth(&self) -> usize {
        self.trees.iter().map(Tree::depth).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        let file = ForestFile {
            version: FOREST_VERSION.to_string(),
            target: self.target,
            baseline: self.baseline,
            n_features: self.n_features,
            schema_fingerprint: self.schema_fingerprint.clone(),
            params: self.params.clone(),
            trees: self.trees.clone(),
        };
        serde_json::to_string(&file).expect("forest serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Forest, String> {
        let file: ForestFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.version != FOREST_VERSION {
            return Err(format!("unsupported forest version {:?}", file.version));
        }
        let forest = Forest {
            trees: file.trees,
            baseline: file.baseline,
            params: file.params,
            target: file.target,
            n_features: file.n_features,
            schema_fingerprint: file.schema_fingerprint,
        };
        forest.validate()?;
        Ok(forest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Forest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Forest::from_json(&text).map_err(|reason| Error::format(path, reason))
    }
}
