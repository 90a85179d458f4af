//! Importance-guided feature selection with retraining.
//!
//! A full forest is fitted (or supplied) on the train split, explained on
//! the train split, and ranked by global importance. Each pruned model is
//! refitted on the top-k columns with a shifted seed and both models are
//! scored by MAE on the test split. Test targets never influence selection.

use serde::{Deserialize, Serialize};

use crate::aggregation::global_importance;
use crate::audit::mae;
use crate::data::{Dataset, Split, Target};
use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::forest::{Forest, ForestParams};
use crate::shapley::explain_dataset;
use crate::util::{argsort_desc, fingerprint};

/// Seed shift between the full model and every refit.
pub const REFIT_SEED_OFFSET: u64 = 7_919;

/// Candidate feature counts tried by [`minimal_k`].
pub const LADDER: [usize; 8] = [1, 2, 3, 5, 8, 13, 21, 34];

/// The `k` largest importances, descending; ties go to the lower id.
pub fn select_top_k(imp: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > imp.len() {
        return Err(Error::Invalid(format!("k = {k} outside [1, {}]", imp.len())));
    }
    let mut order = argsort_desc(imp);
    order.truncate(k);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub target: Target,
    pub selected_ids: Vec<usize>,
    pub k: usize,
    pub n_features_full: usize,
    pub baseline_mae: f64,
    pub pruned_mae: f64,
    /// `pruned_mae / baseline_mae`.
    pub ratio: f64,
    pub fit_seed: u64,
    pub refit_seed: u64,
    /// SHA-256 of the train-split importance vector the selection used.
    pub selection_hash: String,
}

impl PruneResult {
    /// Relative MAE change in percent, e.g. `3.1` for a 3.1% increase.
    pub fn delta_percent(&self) -> f64 {
        (self.ratio - 1.0) * 100.0
    }
}

/// Formats a percent change the way comparison tables print it: `+3%`,
/// `0%`, `-2%` (rounded to whole percent).
pub fn format_delta(percent: f64) -> String {
    let r = percent.round();
    if r > 0.0 {
        format!("+{r:.0}%")
    } else if r < 0.0 {
        format!("-{:.0}%", -r)
    } else {
        "0%".to_string()
    }
}

fn ratio(pruned: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        if pruned == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        pruned / baseline
    }
}

/// Everything a pruning experiment needs, computed once per target.
#[derive(Debug, Clone)]
pub struct PruneSession {
    pub target: Target,
    pub full: Forest,
    /// Global importance on the train split.
    pub importance: Vec<f64>,
    pub baseline_mae: f64,
    train: FeatureTable,
    y_train: Vec<f64>,
    test: FeatureTable,
    y_test: Vec<f64>,
    selection_hash: String,
}

fn split_table(
    ds: &Dataset,
    table: &FeatureTable,
    target: Target,
) -> Result<(FeatureTable, Vec<f64>, FeatureTable, Vec<f64>)> {
    if table.n_samples() != ds.len() {
        return Err(Error::Dimension {
            expected: ds.len(),
            got: table.n_samples(),
        });
    }
    let train_idx = ds.indices(Split::Train);
    let test_idx = ds.indices(Split::Test);
    if test_idx.is_empty() {
        return Err(Error::Invalid("test split is empty".into()));
    }
    if train_idx.is_empty() {
        return Err(Error::Invalid("train split is empty".into()));
    }
    let train = table.select_samples(&train_idx)?;
    let test = table.select_samples(&test_idx)?;
    Ok((
        train,
        ds.target_values(target, &train_idx),
        test,
        ds.target_values(target, &test_idx),
    ))
}

impl PruneSession {
    /// Fits the full forest on the train split with `params` and explains it.
    pub fn fit(ds: &Dataset, table: &FeatureTable, target: Target, params: &ForestParams) -> Result<Self> {
        let (train, y_train, _, _) = split_table(ds, table, target)?;
        let full = Forest::fit(&train, &y_train, target, params)?;
        Self::from_forest(full, ds, table)
    }

    /// Uses an already fitted full forest; its importances are recomputed on
    /// the train split.
    pub fn from_forest(full: Forest, ds: &Dataset, table: &FeatureTable) -> Result<Self> {
        let (train, _, _, _) = split_table(ds, table, full.target)?;
        let importance = global_importance(&explain_dataset(&full, &train)?);
        Self::from_importance(full, importance, ds, table)
    }

    /// Uses a fitted full forest and precomputed train-split importances.
    pub fn from_importance(full: Forest, importance: Vec<f64>, ds: &Dataset, table: &FeatureTable) -> Result<Self> {
        let target = full.target;
        let (train, y_train, test, y_test) = split_table(ds, table, target)?;
        full.check_table(&test)?;
        if importance.len() != full.n_features {
            return Err(Error::Dimension {
                expected: full.n_features,
                got: importance.len(),
            });
        }
        let baseline_mae = mae(&full.predict_table(&test)?, &y_test)?;
        let bytes: Vec<u8> = importance.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok(PruneSession {
            target,
            full,
            selection_hash: fingerprint(&bytes),
            importance,
            baseline_mae,
            train,
            y_train,
            test,
            y_test,
        })
    }

    pub fn n_features(&self) -> usize {
        self.full.n_features
    }

    /// Refits on the top-`k` train-importance features and scores on test.
    pub fn evaluate(&self, k: usize) -> Result<PruneResult> {
        let selected = select_top_k(&self.importance, k)?;
        let train = self.train.project(&selected)?;
        let test = self.test.project(&selected)?;
        let fit_seed = self.full.params.seed;
        let refit_seed = fit_seed.wrapping_add(REFIT_SEED_OFFSET);
        let pruned = Forest::fit(
            &train,
            &self.y_train,
            self.target,
            &self.full.params.with_seed(refit_seed),
        )?;
        let pruned_mae = mae(&pruned.predict_table(&test)?, &self.y_test)?;
        Ok(PruneResult {
            target: self.target,
            selected_ids: selected,
            k,
            n_features_full: self.n_features(),
            baseline_mae: self.baseline_mae,
            pruned_mae,
            ratio: ratio(pruned_mae, self.baseline_mae),
            fit_seed,
            refit_seed,
            selection_hash: self.selection_hash.clone(),
        })
    }

    /// Walks `ladder` (capped at the feature count) and stops at the first
    /// `k` whose ratio is within `1 + tol`.
    pub fn minimal_k(&self, tol: f64, ladder: &[usize]) -> Result<MinimalK> {
        if tol.is_nan() || tol <= 0.0 {
            return Err(Error::Invalid(format!("tolerance {tol} must be positive")));
        }
        let mut evaluated = Vec::new();
        let mut chosen = None;
        let mut ks: Vec<usize> = ladder.iter().map(|&k| k.min(self.n_features())).collect();
        ks.dedup();
        for k in ks {
            let result = self.evaluate(k)?;
            let pass = result.ratio <= 1.0 + tol;
            evaluated.push(result);
            if pass {
                chosen = Some(evaluated.len() - 1);
                break;
            }
        }
        Ok(MinimalK {
            target: self.target,
            tol,
            k: chosen.map(|i| evaluated[i].k),
            chosen,
            evaluated,
        })
    }
}

/// Outcome of a ladder search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalK {
    pub target: Target,
    pub tol: f64,
    /// Smallest passing ladder point, `None` if none passed.
    pub k: Option<usize>,
    /// Index into `evaluated` of the passing result.
    pub chosen: Option<usize>,
    /// Every ladder point tried, in ladder order.
    pub evaluated: Vec<PruneResult>,
}

impl MinimalK {
    pub fn chosen_result(&self) -> Option<&PruneResult> {
        self.chosen.map(|i| &self.evaluated[i])
    }
}

pub fn prune_and_retrain(
    ds: &Dataset,
    table: &FeatureTable,
    target: Target,
    k: usize,
    params: &ForestParams,
) -> Result<PruneResult> {
    if k == 0 || k > table.n_features() {
        return Err(Error::Invalid(format!("k = {k} outside [1, {}]", table.n_features())));
    }
    PruneSession::fit(ds, table, target, params)?.evaluate(k)
}

pub fn minimal_k(
    ds: &Dataset,
    table: &FeatureTable,
    target: Target,
    params: &ForestParams,
    tol: f64,
) -> Result<MinimalK> {
    PruneSession::fit(ds, table, target, params)?.minimal_k(tol, &LADDER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, PlantedBands, SyntheticConfig};
    use crate::features::extract_dataset;
    use proptest::prelude::*;

    #[test]
    fn top_k_examples() {
        assert_eq!(select_top_k(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(select_top_k(&[1.0; 4], 2).unwrap(), vec![0, 1]);
        assert_eq!(select_top_k(&[0.5, 2.0, 1.0], 3).unwrap(), vec![1, 2, 0]);
        assert!(select_top_k(&[1.0], 0).is_err());
        assert!(select_top_k(&[1.0], 2).is_err());
    }

    #[test]
    fn delta_formatting() {
        assert_eq!(format_delta(3.2), "+3%");
        assert_eq!(format_delta(0.4), "0%");
        assert_eq!(format_delta(-0.4), "0%");
        assert_eq!(format_delta(-2.6), "-3%");
        assert_eq!(format_delta(4.5), "+5%");
    }

    fn small_setup(seed: u64) -> (Dataset, FeatureTable, ForestParams) {
        let ds = gen_synthetic(&SyntheticConfig {
            n_train: 80,
            n_test: 30,
            patch_size_range: [5, 8],
            axis: crate::data::BandAxis::new(16, 462.08, 938.37).unwrap(),
            planted_bands: PlantedBands::new(vec![3], vec![7], vec![11], vec![14]),
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let table = extract_dataset(&ds, false).unwrap();
        let params = ForestParams {
            n_trees: 20,
            max_depth: 6,
            seed: 1,
            ..ForestParams::default()
        };
        (ds, table, params)
    }

    #[test]
    fn ratio_identity_and_ranges() {
        let (ds, table, params) = small_setup(3);
        let session = PruneSession::fit(&ds, &table, Target::P, &params).unwrap();
        let r = session.evaluate(3).unwrap();
        assert_eq!(r.k, r.selected_ids.len());
        assert!((r.ratio * r.baseline_mae - r.pruned_mae).abs() <= 1e-12);
        assert_eq!(r.refit_seed, r.fit_seed + REFIT_SEED_OFFSET);
        assert!(session.evaluate(0).is_err());
        assert!(session.evaluate(table.n_features() + 1).is_err());
    }

    #[test]
    fn selection_ignores_test_targets() {
        let (mut ds, table, params) = small_setup(4);
        let a = PruneSession::fit(&ds, &table, Target::K, &params)
            .unwrap()
            .evaluate(5)
            .unwrap();
        let test_idx = ds.indices(Split::Test);
        let vals: Vec<f64> = test_idx.iter().map(|&i| ds.targets[i].k).collect();
        for (n, &i) in test_idx.iter().enumerate() {
            ds.targets[i].k = vals[(n + 7) % vals.len()];
        }
        let b = PruneSession::fit(&ds, &table, Target::K, &params)
            .unwrap()
            .evaluate(5)
            .unwrap();
        assert_eq!(a.selected_ids, b.selected_ids);
        assert_eq!(a.selection_hash, b.selection_hash);
    }

    #[test]
    fn huge_tolerance_stops_at_ladder_head() {
        let (ds, table, params) = small_setup(5);
        let m = minimal_k(&ds, &table, Target::Mg, &params, 1e9).unwrap();
        assert_eq!(m.k, Some(1));
        assert_eq!(m.evaluated.len(), 1);
        assert!(PruneSession::fit(&ds, &table, Target::Mg, &params)
            .unwrap()
            .minimal_k(0.0, &LADDER)
            .is_err());
    }

    #[test]
    fn empty_test_split_rejected() {
        let (mut ds, table, params) = small_setup(6);
        for s in &mut ds.split {
            *s = Split::Train;
        }
        assert!(prune_and_retrain(&ds, &table, Target::P, 2, &params).is_err());
    }

    proptest! {
        #[test]
        fn top_k_prefix_property(imp in proptest::collection::vec(0.0f64..5.0, 1..40), k in 1usize..40) {
            let k = k.min(imp.len());
            let a = select_top_k(&imp, k).unwrap();
            if k < imp.len() {
                let b = select_top_k(&imp, k + 1).unwrap();
                prop_assert_eq!(&b[..k], &a[..]);
            }
            for w in a.windows(2) {
                prop_assert!(imp[w[0]] > imp[w[1]] || (imp[w[0]] == imp[w[1]] && w[0] < w[1]));
            }
        }
    }
}
