//! `hyperaudit`: run the audit pipeline stage by stage or end to end.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 internal
//! invariant breach.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hyperaudit::aggregation::GroupStatistic;
use hyperaudit::pipeline::{self, DatasetMode, RunConfig};
use hyperaudit::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "hyperaudit",
    version,
    about = "Red-team hyperspectral soil-parameter regressors"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    /// Worker threads for parallel stages (results do not depend on it).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Settings that override the config file. Every flag is optional.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML run configuration; flags below take precedence over it.
    #[arg(long, short, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory holding all stage outputs.
    #[arg(long, global = true, value_name = "DIR")]
    workdir: Option<PathBuf>,

    /// Dataset directory [default: <workdir>/data].
    #[arg(long, global = true, value_name = "DIR")]
    dataset_dir: Option<PathBuf>,

    /// Use an existing dataset instead of generating one.
    #[arg(long, global = true)]
    load: bool,

    /// Master seed for the generator, forests and refits.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Add spatial feature groups (variance, edge, meta).
    #[arg(long, global = true)]
    spatial: bool,

    /// Trees per forest [default: 200].
    #[arg(long, global = true)]
    n_trees: Option<usize>,

    /// Maximum tree depth [default: 12].
    #[arg(long, global = true)]
    max_depth: Option<usize>,

    /// Minimum training rows per leaf [default: 2].
    #[arg(long, global = true)]
    min_samples_leaf: Option<usize>,

    /// Fraction of features tried per split, in (0, 1] [default: 0.33].
    #[arg(long, global = true)]
    features_per_split: Option<f64>,

    /// Bootstrap rows per tree [default: true].
    #[arg(long, global = true, value_name = "BOOL")]
    bootstrap: Option<bool>,

    /// Pruning tolerance on the MAE ratio [default: 0.10].
    #[arg(long, global = true)]
    tol: Option<f64>,

    /// Wavelength bins of the band x transformation heatmap [default: 10].
    #[arg(long, global = true)]
    n_bins: Option<usize>,

    /// Features exported to beeswarm and dependency data [default: 20].
    #[arg(long, global = true)]
    top_m: Option<usize>,

    /// Per-sample statistic for transformation-group importance.
    #[arg(long, global = true, value_enum)]
    group_statistic: Option<GroupStat>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum GroupStat {
    AbsOfSum,
    SumOfAbs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset to the dataset directory.
    GenData,
    /// Extract features into features/{schema.json,train.csv,test.csv}.
    Extract,
    /// Fit one forest per target into models/forest_<T>.json.
    Train,
    /// Compute SHAP matrices into shap/<T>_{train,test}.csv.
    Explain,
    /// Write importance, group, heatmap, beeswarm and dependency data.
    Aggregate,
    /// Search the pruning ladder and write prune_report.json.
    Prune,
    /// Residual diagnostics and red flags into audit_report.json.
    Audit,
    /// Merge reports into report.json and report.md.
    Report,
    /// Run every stage in order.
    Run,
    /// Print the effective configuration as TOML.
    Config,
}

fn resolve(o: &Overrides) -> hyperaudit::Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &o.workdir {
        cfg.paths.workdir = v.clone();
    }
    if let Some(v) = &o.dataset_dir {
        cfg.paths.dataset_dir = Some(v.clone());
    }
    if o.load {
        cfg.dataset = DatasetMode::Load;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if o.spatial {
        cfg.spatial = true;
    }
    if let Some(v) = o.n_trees {
        cfg.forest.n_trees = v;
    }
    if let Some(v) = o.max_depth {
        cfg.forest.max_depth = v;
    }
    if let Some(v) = o.min_samples_leaf {
        cfg.forest.min_samples_leaf = v;
    }
    if let Some(v) = o.features_per_split {
        cfg.forest.features_per_split = v;
    }
    if let Some(v) = o.bootstrap {
        cfg.forest.bootstrap = v;
    }
    if let Some(v) = o.tol {
        cfg.prune.tol = v;
    }
    if let Some(v) = o.n_bins {
        cfg.aggregate.n_bins = v;
    }
    if let Some(v) = o.top_m {
        cfg.aggregate.top_m = v;
    }
    if let Some(v) = o.group_statistic {
        cfg.aggregate.group_statistic = match v {
            GroupStat::AbsOfSum => GroupStatistic::AbsOfSum,
            GroupStat::SumOfAbs => GroupStatistic::SumOfAbs,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: &Command, cfg: &RunConfig) -> hyperaudit::Result<()> {
    match command {
        Command::GenData => pipeline::gen_data(cfg).map(drop),
        Command::Extract => pipeline::extract(cfg).map(drop),
        Command::Train => pipeline::train(cfg).map(drop),
        Command::Explain => pipeline::explain(cfg),
        Command::Aggregate => pipeline::aggregate(cfg),
        Command::Prune => pipeline::prune(cfg).map(drop),
        Command::Audit => pipeline::audit(cfg).map(drop),
        Command::Report => pipeline::report(cfg).map(drop),
        Command::Run => pipeline::run_all(cfg).map(drop),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_internal() {
        EXIT_INTERNAL
    } else {
        EXIT_VALIDATION
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INTERNAL);
        }
    }

    let result = resolve(&cli.overrides).and_then(|cfg| execute(&cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn internal_errors_map_to_three() {
        let e = Error::Internal("additivity".into());
        assert_eq!(exit_code(&e), EXIT_INTERNAL);
        assert_eq!(exit_code(&e.in_file("models/forest_P.json")), EXIT_INTERNAL);
        assert_eq!(exit_code(&Error::Invalid("x".into())), EXIT_VALIDATION);
    }

    #[test]
    fn flags_override_config() {
        let o = Overrides {
            seed: Some(9),
            n_trees: Some(7),
            tol: Some(0.2),
            ..Overrides::default()
        };
        let cfg = resolve(&o).unwrap();
        assert_eq!((cfg.seed, cfg.forest.n_trees, cfg.prune.tol), (9, 7, 0.2));
        let bad = Overrides {
            features_per_split: Some(0.0),
            ..Overrides::default()
        };
        assert!(resolve(&bad).is_err());
    }
}
