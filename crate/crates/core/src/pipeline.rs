//! On-disk pipeline stages shared by the CLI and the end-to-end tests.
//!
//! Every stage reads its inputs from the work directory, validates them and
//! writes its outputs next to them. Stages never modify their inputs and
//! never write timestamps or absolute paths, so reruns are byte-identical.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    band_transformation_matrix, global_importance, transformation_importance, write_groups_csv, write_heatmap,
    write_importance_csv, GroupStatistic,
};
use crate::audit::{
    detect_red_flags, explain_extremes, mae, residual_summary, ExtremeCases, RedFlag, RedFlagReport, Thresholds,
};
use crate::data::{gen_synthetic, load_dataset, save_dataset, Dataset, Split, SyntheticConfig, Target};
use crate::error::{Error, Result};
use crate::features::{extract_dataset, FeatureSchema, FeatureTable};
use crate::forest::{target_seed, Forest, ForestParams};
use crate::pruning::{format_delta, MinimalK, PruneResult, PruneSession, LADDER};
use crate::shapley::{beeswarm_data, dependency_data, explain_dataset, ShapMatrix};
use crate::util::{argsort_desc, fingerprint};

pub const CONFIG_VERSION: &str = "v1";
pub const REPORT_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub workdir: PathBuf,
    /// Defaults to `<workdir>/data`.
    pub dataset_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            workdir: PathBuf::from("work"),
            dataset_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    /// `gen-data` writes a synthetic dataset to the dataset directory.
    #[default]
    Synthetic,
    /// The dataset directory already holds a dataset; `gen-data` refuses.
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub tol: f64,
    pub ladder: Vec<usize>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            tol: 0.10,
            ladder: LADDER.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub thresholds: Thresholds,
    /// Cases per extreme-residual list.
    pub n_cases: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            thresholds: Thresholds::default(),
            n_cases: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    pub n_bins: usize,
    /// Features exported to beeswarm and dependency data.
    pub top_m: usize,
    pub group_statistic: GroupStatistic,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        AggregateConfig {
            n_bins: 10,
            top_m: 20,
            group_statistic: GroupStatistic::AbsOfSum,
        }
    }
}

/// One versioned document describing a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: String,
    /// Source of every derived seed: generator, per-target forests, refits.
    pub seed: u64,
    pub spatial: bool,
    pub paths: Paths,
    pub dataset: DatasetMode,
    /// `seed` is ignored; the master seed is used.
    pub synthetic: SyntheticConfig,
    /// Shared by all targets; `seed` is ignored in favour of per-target
    /// seeds derived from the master seed.
    pub forest: ForestParams,
    pub prune: PruneConfig,
    pub audit: AuditConfig,
    pub aggregate: AggregateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION.into(),
            seed: 0,
            spatial: false,
            paths: Paths::default(),
            dataset: DatasetMode::Synthetic,
            synthetic: SyntheticConfig::default(),
            forest: ForestParams::default(),
            prune: PruneConfig::default(),
            audit: AuditConfig::default(),
            aggregate: AggregateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.in_file(path))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {:?}, expected {CONFIG_VERSION:?}",
                self.version
            )));
        }
        self.synthetic.validate()?;
        self.forest.validate()?;
        self.audit.thresholds.validate()?;
        if self.prune.tol.is_nan() || self.prune.tol <= 0.0 {
            return Err(Error::Config(format!("prune.tol {} must be positive", self.prune.tol)));
        }
        if self.prune.ladder.is_empty() || self.prune.ladder.contains(&0) {
            return Err(Error::Config("prune.ladder must be non-empty and positive".into()));
        }
        if self.audit.n_cases == 0 {
            return Err(Error::Config("audit.n_cases must be at least 1".into()));
        }
        if self.aggregate.n_bins == 0 || self.aggregate.top_m == 0 {
            return Err(Error::Config(
                "aggregate.n_bins and aggregate.top_m must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.paths
            .dataset_dir
            .clone()
            .unwrap_or_else(|| self.paths.workdir.join("data"))
    }

    pub fn workdir(&self) -> &Path {
        &self.paths.workdir
    }

    pub fn forest_params(&self, target: Target) -> ForestParams {
        self.forest.with_seed(target_seed(self.seed, target))
    }

    /// Hash of everything that influences results; paths are excluded.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        c.synthetic.seed = self.seed;
        c.forest.seed = 0;
        fingerprint(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

// ---- layout ----

pub fn schema_path(work: &Path) -> PathBuf {
    work.join("features").join("schema.json")
}

pub fn features_path(work: &Path, split: Split) -> PathBuf {
    work.join("features").join(format!("{split}.csv"))
}

pub fn forest_path(work: &Path, target: Target) -> PathBuf {
    work.join("models").join(format!("forest_{}.json", target.name()))
}

pub fn shap_path(work: &Path, target: Target, split: Split) -> PathBuf {
    work.join("shap").join(format!("{}_{split}.csv", target.name()))
}

pub fn aggregate_dir(work: &Path, target: Target) -> PathBuf {
    work.join("aggregate").join(target.name())
}

pub fn prune_report_path(work: &Path) -> PathBuf {
    work.join("prune_report.json")
}

pub fn audit_report_path(work: &Path) -> PathBuf {
    work.join("audit_report.json")
}

pub fn residuals_path(work: &Path, target: Target) -> PathBuf {
    work.join(format!("residuals_{}.csv", target.name()))
}

pub fn report_path(work: &Path) -> PathBuf {
    work.join("report.json")
}

pub fn report_md_path(work: &Path) -> PathBuf {
    work.join("report.md")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

// ---- artifact loading ----

pub fn load_schema(work: &Path) -> Result<FeatureSchema> {
    let path = schema_path(work);
    let schema: FeatureSchema = read_json(&path)?;
    schema.validate().map_err(|e| e.in_file(&path))?;
    Ok(schema)
}

pub fn load_features(work: &Path, split: Split) -> Result<FeatureTable> {
    let schema = load_schema(work)?;
    let path = features_path(work, split);
    FeatureTable::read_csv(&path, schema).map_err(|e| e.in_file(&path))
}

/// Train and test tables merged back into dataset order.
pub fn load_full_table(work: &Path, ds: &Dataset) -> Result<FeatureTable> {
    let train = load_features(work, Split::Train)?;
    let test = load_features(work, Split::Test)?;
    let mut rows: HashMap<usize, &[f64]> = HashMap::new();
    for t in [&train, &test] {
        for (j, &id) in t.sample_ids.iter().enumerate() {
            if rows.insert(id, t.row(j)).is_some() {
                return Err(Error::Invalid(format!("sample {id} appears in both feature tables")));
            }
        }
    }
    let mut values = Vec::with_capacity(ds.len() * train.n_features());
    for id in 0..ds.len() {
        let row = rows
            .get(&id)
            .ok_or_else(|| Error::Invalid(format!("sample {id} missing from the feature tables")))?;
        values.extend_from_slice(row);
    }
    if rows.len() != ds.len() {
        return Err(Error::Dimension {
            expected: ds.len(),
            got: rows.len(),
        });
    }
    FeatureTable::new(train.schema.clone(), (0..ds.len()).collect(), values)
}

pub fn load_forest(work: &Path, target: Target) -> Result<Forest> {
    Forest::load(forest_path(work, target))
}

pub fn load_shap(work: &Path, target: Target, split: Split) -> Result<ShapMatrix> {
    ShapMatrix::read(shap_path(work, target, split))
}

fn truths(ds: &Dataset, target: Target, table: &FeatureTable) -> Result<Vec<f64>> {
    if let Some(&bad) = table.sample_ids.iter().find(|&&id| id >= ds.len()) {
        return Err(Error::Invalid(format!(
            "feature table names sample {bad}, dataset has {}",
            ds.len()
        )));
    }
    Ok(ds.target_values(target, &table.sample_ids))
}

fn check_split(ds: &Dataset, table: &FeatureTable, split: Split) -> Result<()> {
    match table
        .sample_ids
        .iter()
        .find(|&&id| id >= ds.len() || ds.split[id] != split)
    {
        Some(id) => Err(Error::Invalid(format!("sample {id} is not in the {split} split"))),
        None => Ok(()),
    }
}

// ---- stages ----

pub fn gen_data(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.dataset == DatasetMode::Load {
        return Err(Error::Config("gen-data needs dataset = \"synthetic\"".into()));
    }
    let mut syn = cfg.synthetic.clone();
    syn.seed = cfg.seed;
    let ds = gen_synthetic(&syn)?;
    let dir = cfg.dataset_dir();
    save_dataset(&ds, &dir)?;
    info!("wrote {} patches to {}", ds.len(), dir.display());
    Ok(ds)
}

pub fn extract(cfg: &RunConfig) -> Result<FeatureSchema> {
    let ds = load_dataset(cfg.dataset_dir())?;
    let table = extract_dataset(&ds, cfg.spatial)?;
    let work = cfg.workdir();
    write_json(&schema_path(work), &table.schema)?;
    for split in [Split::Train, Split::Test] {
        let part = table.select_samples(&ds.indices(split))?;
        part.write_csv(features_path(work, split))?;
    }
    info!("extracted {} features from {} patches", table.n_features(), ds.len());
    Ok(table.schema)
}

pub fn train(cfg: &RunConfig) -> Result<Vec<Forest>> {
    let ds = load_dataset(cfg.dataset_dir())?;
    let work = cfg.workdir();
    let table = load_features(work, Split::Train)?;
    check_split(&ds, &table, Split::Train).map_err(|e| e.in_file(features_path(work, Split::Train)))?;
    create_dir(&work.join("models"))?;
    let mut forests = Vec::new();
    for target in Target::ALL {
        let y = truths(&ds, target, &table)?;
        let forest = Forest::fit(&table, &y, target, &cfg.forest_params(target))?;
        forest.save(forest_path(work, target))?;
        info!(
            "trained {target}: {} trees, depth {}",
            forest.trees.len(),
            forest.max_depth()
        );
        forests.push(forest);
    }
    Ok(forests)
}

pub fn explain(cfg: &RunConfig) -> Result<()> {
    let work = cfg.workdir();
    let schema = load_schema(work)?;
    create_dir(&work.join("shap"))?;
    for split in [Split::Train, Split::Test] {
        let table = load_features(work, split)?;
        for target in Target::ALL {
            let fpath = forest_path(work, target);
            let forest = Forest::load(&fpath)?;
            let sm = explain_dataset(&forest, &table).map_err(|e| e.in_file(&fpath))?;
            sm.write(shap_path(work, target, split), &schema)?;
        }
        info!("explained {} {split} samples", table.n_samples());
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct DependencyBlock {
    feature_id: usize,
    header: String,
    /// `(feature value, φ)` per sample.
    points: Vec<(f64, f64)>,
}

pub fn aggregate(cfg: &RunConfig) -> Result<()> {
    let work = cfg.workdir();
    let schema = load_schema(work)?;
    let table = load_features(work, Split::Train)?;
    let top_m = cfg.aggregate.top_m.min(schema.len());
    for target in Target::ALL {
        let spath = shap_path(work, target, Split::Train);
        let sm = load_shap(work, target, Split::Train)?;
        let dir = aggregate_dir(work, target);
        create_dir(&dir)?;
        let imp = global_importance(&sm);
        write_importance_csv(dir.join("importance.csv"), &schema, &imp).map_err(|e| e.in_file(&spath))?;
        let aos = transformation_importance(&sm, &schema, GroupStatistic::AbsOfSum).map_err(|e| e.in_file(&spath))?;
        let soa = transformation_importance(&sm, &schema, GroupStatistic::SumOfAbs)?;
        write_groups_csv(dir.join("groups.csv"), &aos, &soa)?;
        let heat = band_transformation_matrix(&sm, &schema, cfg.aggregate.n_bins)?;
        write_heatmap(dir.join("heatmap.csv"), &heat)?;
        let swarm = beeswarm_data(&sm, &table, top_m).map_err(|e| e.in_file(&spath))?;
        write_json(&dir.join("beeswarm.json"), &swarm)?;
        let deps = swarm
            .iter()
            .map(|b| {
                Ok(DependencyBlock {
                    feature_id: b.feature_id,
                    header: schema.entries[b.feature_id].header(),
                    points: dependency_data(&sm, &table, b.feature_id)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_json(&dir.join("dependency.json"), &deps)?;
    }
    info!("aggregated attributions for {} targets", Target::ALL.len());
    Ok(())
}

/// One target's row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub target: Target,
    pub n_features_full: usize,
    pub baseline_mae: f64,
    /// Smallest passing ladder point; `None` if no point passed.
    pub k: Option<usize>,
    /// Chosen result, or the last ladder point if none passed.
    pub pruned_mae: f64,
    pub ratio: f64,
    pub delta_percent: f64,
    /// `delta_percent` rounded and signed, e.g. `+3%`.
    pub delta: String,
    pub selected_ids: Vec<usize>,
    pub selected_headers: Vec<String>,
    pub fit_seed: u64,
    pub refit_seed: u64,
    pub selection_hash: String,
    pub ladder: Vec<LadderPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    pub k: usize,
    pub pruned_mae: f64,
    pub ratio: f64,
    pub delta: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub version: String,
    pub tol: f64,
    pub rows: Vec<PruneRow>,
}

fn prune_row(mk: &MinimalK, schema: &FeatureSchema) -> PruneRow {
    let last: &PruneResult = mk
        .chosen_result()
        .unwrap_or_else(|| mk.evaluated.last().expect("ladder is non-empty"));
    PruneRow {
        target: mk.target,
        n_features_full: last.n_features_full,
        baseline_mae: last.baseline_mae,
        k: mk.k,
        pruned_mae: last.pruned_mae,
        ratio: last.ratio,
        delta_percent: last.delta_percent(),
        delta: format_delta(last.delta_percent()),
        selected_ids: last.selected_ids.clone(),
        selected_headers: last.selected_ids.iter().map(|&i| schema.entries[i].header()).collect(),
        fit_seed: last.fit_seed,
        refit_seed: last.refit_seed,
        selection_hash: last.selection_hash.clone(),
        ladder: mk
            .evaluated
            .iter()
            .map(|r| LadderPoint {
                k: r.k,
                pruned_mae: r.pruned_mae,
                ratio: r.ratio,
                delta: format_delta(r.delta_percent()),
            })
            .collect(),
    }
}

pub fn prune(cfg: &RunConfig) -> Result<PruneReport> {
    let ds = load_dataset(cfg.dataset_dir())?;
    let work = cfg.workdir();
    let table = load_full_table(work, &ds)?;
    let mut rows = Vec::new();
    for target in Target::ALL {
        let forest = load_forest(work, target)?;
        let spath = shap_path(work, target, Split::Train);
        let sm = load_shap(work, target, Split::Train)?;
        sm.check_schema(&table.schema).map_err(|e| e.in_file(&spath))?;
        let session = PruneSession::from_importance(forest, global_importance(&sm), &ds, &table)
            .map_err(|e| e.in_file(forest_path(work, target)))?;
        let mk = session.minimal_k(cfg.prune.tol, &cfg.prune.ladder)?;
        let row = prune_row(&mk, &table.schema);
        info!("pruned {target}: k = {:?}, delta {}", row.k, row.delta);
        rows.push(row);
    }
    let report = PruneReport {
        version: REPORT_VERSION.into(),
        tol: cfg.prune.tol,
        rows,
    };
    write_json(&prune_report_path(work), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAudit {
    pub target: Target,
    pub test_mae: f64,
    pub residual_mean: f64,
    pub residual_sd: f64,
    pub residual_q25: f64,
    pub residual_q50: f64,
    pub residual_q75: f64,
    pub pred_sd: f64,
    pub truth_sd: f64,
    pub central_coverage: f64,
    pub red_flags: RedFlagReport,
    pub extremes: ExtremeCases,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub version: String,
    pub thresholds: Thresholds,
    pub targets: Vec<TargetAudit>,
}

pub fn audit(cfg: &RunConfig) -> Result<AuditReport> {
    let ds = load_dataset(cfg.dataset_dir())?;
    let work = cfg.workdir();
    let test = load_features(work, Split::Test)?;
    check_split(&ds, &test, Split::Test).map_err(|e| e.in_file(features_path(work, Split::Test)))?;
    let mut targets = Vec::new();
    for target in Target::ALL {
        let forest = load_forest(work, target)?;
        let pred = forest
            .predict_table(&test)
            .map_err(|e| e.in_file(forest_path(work, target)))?;
        let truth = truths(&ds, target, &test)?;
        let rs = residual_summary(&pred, &truth)?;
        rs.write_csv(residuals_path(work, target), &test.sample_ids)?;
        let train_sm = load_shap(work, target, Split::Train)?;
        let test_sm = load_shap(work, target, Split::Test)?;
        test_sm
            .check_table(&test)
            .map_err(|e| e.in_file(shap_path(work, target, Split::Test)))?;
        let red_flags = detect_red_flags(&rs, &global_importance(&train_sm), &cfg.audit.thresholds)?;
        let extremes = explain_extremes(&test_sm, &pred, &truth, cfg.audit.n_cases)?;
        info!("audited {target}: flags {:?}", red_flags.flags);
        targets.push(TargetAudit {
            target,
            test_mae: mae(&pred, &truth)?,
            residual_mean: rs.mean,
            residual_sd: rs.sd,
            residual_q25: rs.q25,
            residual_q50: rs.q50,
            residual_q75: rs.q75,
            pred_sd: rs.pred_sd,
            truth_sd: rs.truth_sd,
            central_coverage: rs.central_coverage,
            red_flags,
            extremes,
        });
    }
    let report = AuditReport {
        version: REPORT_VERSION.into(),
        thresholds: cfg.audit.thresholds,
        targets,
    };
    write_json(&audit_report_path(work), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopFeature {
    pub feature_id: usize,
    pub header: String,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub config_fingerprint: String,
    pub schema_fingerprint: String,
    pub n_features: usize,
    /// Five most important train-split features per target.
    pub top_features: Vec<(Target, Vec<TopFeature>)>,
    pub prune: PruneReport,
    pub audit: AuditReport,
}

pub fn report(cfg: &RunConfig) -> Result<Report> {
    let work = cfg.workdir();
    let schema = load_schema(work)?;
    let prune: PruneReport = read_json(&prune_report_path(work))?;
    let audit: AuditReport = read_json(&audit_report_path(work))?;
    let mut top_features = Vec::new();
    for target in Target::ALL {
        let sm = load_shap(work, target, Split::Train)?;
        sm.check_schema(&schema)
            .map_err(|e| e.in_file(shap_path(work, target, Split::Train)))?;
        let imp = global_importance(&sm);
        let top = argsort_desc(&imp)
            .into_iter()
            .take(5)
            .map(|i| TopFeature {
                feature_id: i,
                header: schema.entries[i].header(),
                importance: imp[i],
            })
            .collect();
        top_features.push((target, top));
    }
    let report = Report {
        version: REPORT_VERSION.into(),
        config_fingerprint: cfg.fingerprint(),
        schema_fingerprint: schema.fingerprint(),
        n_features: schema.len(),
        top_features,
        prune,
        audit,
    };
    write_json(&report_path(work), &report)?;
    let md = render_markdown(&report);
    let path = report_md_path(work);
    fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

fn fmt_mae(v: f64) -> String {
    if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

/// MAE comparison in the layout of a full-vs-pruned table: one row per
/// scenario, one column per target, pruned cells carrying `(+3%)` deltas.
pub fn render_markdown(r: &Report) -> String {
    let mut s = String::new();
    let rows = &r.prune.rows;
    let _ = writeln!(s, "# Audit report\n");
    let _ = writeln!(s, "## Test MAE, full vs pruned (tol {})\n", r.prune.tol);
    let names: Vec<&str> = rows.iter().map(|row| row.target.name()).collect();
    let _ = writeln!(s, "| Features | {} |", names.join(" | "));
    let _ = writeln!(s, "|---|{}", "---|".repeat(rows.len()));
    let full: Vec<String> = rows.iter().map(|row| fmt_mae(row.baseline_mae)).collect();
    let _ = writeln!(s, "| ✗ ({}) | {} |", r.n_features, full.join(" | "));
    let pruned: Vec<String> = rows
        .iter()
        .map(|row| {
            let k = row.k.map_or_else(|| "none".to_string(), |k| k.to_string());
            format!("{} ({}) [k={k}]", fmt_mae(row.pruned_mae), row.delta)
        })
        .collect();
    let _ = writeln!(s, "| ✓ | {} |", pruned.join(" | "));

    let _ = writeln!(s, "\n## Red flags\n");
    let _ = writeln!(
        s,
        "| Target | pred_sd / truth_sd | central coverage | top-mass subset | flags |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|");
    for t in &r.audit.targets {
        let rf = &t.red_flags;
        let flags: Vec<&str> = rf
            .flags
            .iter()
            .map(|f| match f {
                RedFlag::RangeCollapse => "RANGE_COLLAPSE",
                RedFlag::ConcentratedImportance => "CONCENTRATED_IMPORTANCE",
            })
            .collect();
        let _ = writeln!(
            s,
            "| {} | {:.3} | {:.3} | {} of {} | {} |",
            t.target,
            rf.range.sd_ratio,
            rf.range.central_coverage,
            rf.concentration.subset_size,
            rf.concentration.n_features,
            if flags.is_empty() {
                "none".to_string()
            } else {
                flags.join(", ")
            }
        );
    }

    let _ = writeln!(s, "\n## Top features (train importance)\n");
    for (target, top) in &r.top_features {
        let list: Vec<String> = top.iter().map(|f| format!("`{}`", f.header)).collect();
        let _ = writeln!(s, "- {target}: {}", list.join(", "));
    }
    s
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig) -> Result<Report> {
    if cfg.dataset == DatasetMode::Synthetic {
        gen_data(cfg)?;
    }
    extract(cfg)?;
    train(cfg)?;
    explain(cfg)?;
    aggregate(cfg)?;
    prune(cfg)?;
    audit(cfg)?;
    report(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 5\n[forest]\nn_trees = 10\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.forest.n_trees, 10);
        assert_eq!(cfg.forest.max_depth, 12);
        assert_eq!(cfg.prune.ladder, LADDER.to_vec());
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(RunConfig::from_toml("version = \"v2\"").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[prune]\ntol = 0.0").is_err());
        assert!(RunConfig::from_toml("[audit.thresholds]\nmass = 1.5").is_err());
    }

    #[test]
    fn fingerprint_ignores_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.workdir = PathBuf::from("/elsewhere");
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn per_target_seeds_differ() {
        let cfg = RunConfig::default();
        let seeds: Vec<u64> = Target::ALL.iter().map(|&t| cfg.forest_params(t).seed).collect();
        assert_eq!(seeds, vec![1000, 2000, 3000, 4000]);
    }
}
