//! Command-line front end.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cotlab_core::hardness::{binomial, enumerate_family, hardness_demo, HardnessConfig, MeanEstimator, OracleConfig};
use cotlab_core::task::{build_instance, build_tree, ground_truth_labels, sample_augmented, sample_inputs};
use cotlab_core::train::{calibrate_eta0, theorem3_check, theorem4_check, theorem_eta, train, DataSource, DataSpec};
use cotlab_core::{FilterConfig, FilterMode, LinkFunction, MaskKind, Regime, TargetSource, TrainConfig};
use serde_json::json;

use crate::checks::{grad_check, FD_TOLERANCE};
use crate::experiment::{run_figure4, shared_data, ExperimentSpec};
use crate::formats::{self, Checkpoint, HardnessSummary, LinkReport, RunMetadata};

/// Calibration grid of the staged check.
pub const ETA0_GRID: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Token threshold of the staged check; see the README for why not smaller.
pub const THEOREM4_EPSILON0: f64 = 1.9;

#[derive(Debug, Parser)]
#[command(name = "cotlab", version, about = "Chain-of-thought parity laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample an instance and write its labeled (and augmented) data.
    GenTask(Opts),
    /// Train one regime.
    Train(Opts),
    /// Train all four regimes on shared data and plot the loss curves.
    Figure4(Opts),
    /// One teacher-forced step from zero weights.
    Theorem3(Opts),
    /// Staged quantized updates with the level mask and token filter.
    Theorem4(Opts),
    /// Direct training through the mean-gradient oracle.
    HardnessDemo(Opts),
    /// Analytic gradients against central differences.
    GradCheck(Opts),
    /// Check the link function and print its constants.
    VerifyLink(Opts),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaskArg {
    Causal,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum FilterArg {
    Off,
    Token,
    Weight,
}

#[derive(Debug, Clone, Default, Args)]
struct Opts {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    nprime: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_regime)]
    regime: Option<Regime>,
    #[arg(long, value_enum)]
    mask: Option<MaskArg>,
    #[arg(long, value_enum)]
    filter: Option<FilterArg>,
    #[arg(long)]
    filter_threshold: Option<f64>,
    #[arg(long)]
    quantize: bool,
    #[arg(long)]
    loss_mix: Option<f64>,
    #[arg(long)]
    oracle_eps: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experiment JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hardness trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Oracle queries per hardness trial.
    #[arg(long)]
    queries: Option<usize>,
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    Regime::parse(s).ok_or_else(|| format!("unknown regime {s:?} (direct, cot, cot-teacher-forcing, cot-self-consistency)"))
}

/// A problem with the invocation rather than with the run.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// A completed run whose checks did not pass.
struct Outcome(bool);

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(Outcome(true)) => 0,
        Ok(Outcome(false)) => 1,
        Err(e) if e.is::<Usage>() || e.is::<cotlab_core::Error>() => {
            eprintln!("error: {e:#}");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::GenTask(o) => gen_task(&o),
        Command::Train(o) => train_cmd(&o),
        Command::Figure4(o) => figure4(&o),
        Command::Theorem3(o) => theorem3(&o),
        Command::Theorem4(o) => theorem4(&o),
        Command::HardnessDemo(o) => hardness(&o),
        Command::GradCheck(o) => grad(&o),
        Command::VerifyLink(o) => verify_link(&o),
    }
}

fn need<T: Copy>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

fn out_dir(o: &Opts, default: &str) -> Result<PathBuf> {
    let dir = o.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn data_spec(o: &Opts, base: Option<DataSpec>) -> Result<DataSpec> {
    let d = o.d.or(base.map(|b| b.d));
    let k = o.k.or(base.map(|b| b.k));
    Ok(DataSpec {
        d: need(d, "d")?,
        k: need(k, "k")?,
        n: o.n.or(base.map(|b| b.n)).unwrap_or(10_000),
        n_prime: o.nprime.or(base.map(|b| b.n_prime)).unwrap_or(0),
    })
}

fn filter_from(o: &Opts, current: FilterConfig) -> Result<FilterConfig> {
    let filter = match (o.filter, o.filter_threshold) {
        (None, None) => current,
        (Some(FilterArg::Off), _) => FilterConfig::OFF,
        (Some(FilterArg::Token), t) => FilterConfig { latch: current.latch, ..FilterConfig::token(t.unwrap_or(0.5)) },
        (Some(FilterArg::Weight), t) => FilterConfig { latch: current.latch, ..FilterConfig::weight(t.unwrap_or(0.4)) },
        (None, Some(t)) => match current.mode {
            FilterMode::Off => return Err(usage("--filter-threshold needs --filter token|weight")),
            FilterMode::TokenThreshold { .. } => FilterConfig { latch: current.latch, ..FilterConfig::token(t) },
            FilterMode::WeightThreshold { .. } => FilterConfig { latch: current.latch, ..FilterConfig::weight(t) },
        },
    };
    filter.validate()?;
    Ok(filter)
}

fn oracle_for(d: usize, k: usize, epsilon: f64, seed: u64) -> OracleConfig {
    let mean_estimator = if binomial(d, k) <= 10_000 {
        MeanEstimator::Exhaustive
    } else {
        MeanEstimator::MonteCarlo { sample_size: 1000, seed }
    };
    OracleConfig { epsilon, mean_estimator }
}

/// Applies the flags to one regime's configuration.
fn override_config(o: &Opts, mut c: TrainConfig, data: DataSpec) -> Result<TrainConfig> {
    c.data = data;
    if let Some(e) = o.epochs {
        c.epochs = e;
    }
    if let Some(e) = o.eta {
        c.eta = e;
    }
    if let Some(s) = o.seed {
        c.seed = s;
    }
    if let Some(m) = o.mask {
        c.mask = match m {
            MaskArg::Causal => MaskKind::TeacherForcingCausal,
            MaskArg::Block => MaskKind::BlockLevel,
        };
    }
    c.filter = filter_from(o, c.filter)?;
    c.quantize_every_step |= o.quantize;
    if let Some(x) = o.loss_mix {
        c.loss_mix = x;
    }
    if let Some(eps) = o.oracle_eps {
        c.oracle = Some(oracle_for(data.d, data.k, eps, c.seed));
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    formats::read_json(path).map_err(|e| usage(format!("{e:#}")))
}

fn gen_task(o: &Opts) -> Result<Outcome> {
    let spec = data_spec(o, None)?;
    let seed = o.seed.unwrap_or(0);
    let dir = out_dir(o, "task")?;
    let tree = build_tree(&build_instance(spec.d, spec.k, TargetSource::Seeded(seed))?);
    let data = ground_truth_labels(&tree, &sample_inputs(spec.d, spec.n, seed))?;
    formats::write_json(&dir.join("instance.json"), &tree.instance)?;
    formats::write_dataset(create(&dir.join("dataset.csv"))?, &data)?;
    if spec.n_prime > 0 {
        formats::write_dataset(create(&dir.join("augmented.csv"))?, sample_augmented(spec.d, spec.n_prime, seed).tokens())?;
    }
    formats::write_json(&dir.join("metadata.json"), &RunMetadata::new("gen-task", seed, &spec)?)?;
    println!("target {:?}; {} samples written to {}", tree.instance.target, spec.n, dir.display());
    Ok(Outcome(true))
}

fn train_cmd(o: &Opts) -> Result<Outcome> {
    let regime = need(o.regime, "regime")?;
    let (base, data) = match &o.config {
        Some(path) => {
            let spec = load_spec(path)?;
            let base = spec.configs.iter().find(|c| c.regime == regime).cloned();
            (base, data_spec(o, Some(spec.data_spec))?)
        }
        None => (None, data_spec(o, None)?),
    };
    let seed = o.seed.unwrap_or(0);
    let base = base.unwrap_or_else(|| TrainConfig::for_regime(regime, data, seed));
    let config = override_config(o, base, data)?;
    let dir = out_dir(o, "run")?;
    let shared = shared_data(&config.data, config.seed)?;
    let aug = if regime == Regime::CotSelfConsistency { shared.augmented.as_ref() } else { None };
    let trace = train(&config, &shared.data, aug, &shared.tree)?;
    formats::write_trace(create(&dir.join("trace.csv"))?, &trace.records)?;
    formats::write_json(&dir.join("checkpoint.json"), &Checkpoint::new(&trace.weights, &shared.tree))?;
    formats::write_json(&dir.join("metadata.json"), &RunMetadata::new("train", config.seed, &config)?)?;
    let last = trace.last();
    println!(
        "{} d={} k={} epochs={}: cot_loss {:.6} pred_loss {:.6} deactivation {:?}",
        regime.name(),
        data.d,
        data.k,
        config.epochs,
        last.cot_loss,
        last.pred_loss,
        trace.deactivation_epochs()
    );
    Ok(Outcome(true))
}

fn figure4(o: &Opts) -> Result<Outcome> {
    let mut spec = match &o.config {
        Some(path) => load_spec(path)?,
        None => ExperimentSpec::figure4(data_spec(o, None)?, 350, 7, PathBuf::from("figure4")),
    };
    let data = data_spec(o, Some(spec.data_spec))?;
    if data.k != spec.data_spec.k {
        for c in &mut spec.configs {
            *c = TrainConfig { epochs: c.epochs, seed: c.seed, ..TrainConfig::for_regime(c.regime, data, c.seed) };
        }
    }
    spec.data_spec = data;
    if let Some(s) = o.seed {
        spec.seed = s;
    }
    let specific = o.eta.is_some()
        || o.mask.is_some()
        || o.filter.is_some()
        || o.filter_threshold.is_some()
        || o.quantize
        || o.loss_mix.is_some()
        || o.oracle_eps.is_some();
    if specific && o.regime.is_none() {
        return Err(usage("regime-specific flags need --regime to say which regime they apply to"));
    }
    let common = Opts { epochs: o.epochs, seed: o.seed, ..Opts::default() };
    spec.configs = spec
        .configs
        .into_iter()
        .map(|c| {
            let flags = if o.regime == Some(c.regime) { o } else { &common };
            override_config(flags, c, data)
        })
        .collect::<Result<_>>()?;
    if let Some(out) = &o.out {
        spec.out = out.clone();
    }
    let results = run_figure4(&spec)?;
    for r in &results {
        let last = r.trace.last();
        println!(
            "{:<22} cot_loss {:.6} pred_loss {:.6} deactivation {:?}",
            r.regime.name(),
            last.cot_loss,
            last.pred_loss,
            r.trace.deactivation_epochs()
        );
    }
    Ok(Outcome(true))
}

fn source(o: &Opts, d: usize) -> DataSource {
    match o.n {
        Some(n) => DataSource::Sample { n, seed: o.seed.unwrap_or(0) },
        None if d <= 20 => DataSource::Enumerate,
        None => DataSource::Sample { n: 10_000, seed: o.seed.unwrap_or(0) },
    }
}

fn theorem3(o: &Opts) -> Result<Outcome> {
    let d = o.d.unwrap_or(16);
    let k = o.k.unwrap_or(8);
    let seed = o.seed.unwrap_or(0);
    let tree = build_tree(&build_instance(d, k, TargetSource::Seeded(seed))?);
    let eta = o.eta.unwrap_or_else(|| theorem_eta(d, 1.0));
    let report = theorem3_check(&tree, eta, source(o, d), None, 1000, seed)?;
    let children_on_top = report.top_two_are_children.iter().all(|&b| b);
    let leading_within = report.leading.within(1.0);
    let ok = children_on_top && leading_within && report.min_child_score() >= 0.45 && report.eval.max_abs_err <= 0.2;
    let summary = json!({
        "d": d, "k": k, "eta": eta, "seed": seed,
        "target": tree.instance.target,
        "topTwoAreChildren": report.top_two_are_children,
        "leading": report.leading,
        "childScores": report.child_scores,
        "minChildScore": report.min_child_score(),
        "maxAbsErr": report.eval.max_abs_err,
        "meanZeroOneErr": report.eval.mean_zero_one_err,
        "passed": ok,
    });
    let dir = out_dir(o, "theorem3")?;
    formats::write_json(&dir.join("theorem3.json"), &summary)?;
    formats::write_json(&dir.join("checkpoint.json"), &Checkpoint::new(&report.weights, &tree))?;
    println!(
        "children on top: {children_on_top}; leading term within factor 2: {leading_within}; min child score {:.6}; max test error {:.3e}",
        report.min_child_score(),
        report.eval.max_abs_err
    );
    Ok(Outcome(ok))
}

fn theorem4(o: &Opts) -> Result<Outcome> {
    let d = o.d.unwrap_or(16);
    let k = o.k.unwrap_or(8);
    let seed = o.seed.unwrap_or(0);
    let tree = build_tree(&build_instance(d, k, TargetSource::Seeded(seed))?);
    let eta0 = o.eta.unwrap_or_else(|| calibrate_eta0(&tree, &ETA0_GRID));
    let epsilon0 = o.filter_threshold.unwrap_or(THEOREM4_EPSILON0);
    let report = theorem4_check(&tree, eta0, source(o, d), o.nprime.unwrap_or(64), epsilon0, 1000, seed)?;
    let ok = report.pattern_holds() && report.eval.max_abs_err <= 0.1 && report.stable;
    let stages: Vec<_> = report
        .stages
        .iter()
        .map(|s| json!({ "t": s.t, "levelConstants": s.level_constants, "violation": s.violation, "gates": s.gates }))
        .collect();
    let summary = json!({
        "d": d, "k": k, "eta0": eta0, "eta": report.eta, "epsilon0": epsilon0, "seed": seed,
        "stages": stages,
        "patternHolds": report.pattern_holds(),
        "maxAbsErr": report.eval.max_abs_err,
        "stable": report.stable,
        "passed": ok,
    });
    let dir = out_dir(o, "theorem4")?;
    formats::write_json(&dir.join("theorem4.json"), &summary)?;
    formats::write_json(&dir.join("checkpoint.json"), &Checkpoint::new(&report.weights, &tree))?;
    for s in &report.stages {
        println!("t={} gates {:?} violation {:?}", s.t, s.gates, s.violation);
    }
    println!("pattern holds: {}; max test error {:.3e}; stable: {}", report.pattern_holds(), report.eval.max_abs_err, report.stable);
    Ok(Outcome(ok))
}

fn hardness(o: &Opts) -> Result<Outcome> {
    let d = o.d.unwrap_or(10);
    let k = o.k.unwrap_or(5);
    let n = o.n.unwrap_or(4096);
    let seed = o.seed.unwrap_or(0);
    let family = enumerate_family(d, k, 10_000).map_err(|e| usage(e.to_string()))?;
    let inputs = sample_inputs(d, n, seed);
    let mut config = HardnessConfig::new(n, seed);
    config.epsilon = o.oracle_eps;
    if let Some(t) = o.trials {
        config.trials = t;
    }
    if let Some(q) = o.queries.or(o.epochs) {
        config.queries = q;
    }
    if let Some(eta) = o.eta {
        config.eta = eta;
    }
    let report = hardness_demo(&family, &inputs, &config)?;
    let dir = out_dir(o, "hardness")?;
    formats::write_hardness_trials(create(&dir.join("trials.csv"))?, &report.trials)?;
    let summary = HardnessSummary::new(&report, d, k, n, family.len());
    formats::write_json(&dir.join("summary.json"), &summary)?;
    formats::write_json(&dir.join("metadata.json"), &RunMetadata::new("hardness-demo", seed, &config)?)?;
    println!(
        "|P|={} variance {:.3e} (bound {:.3e}) eps {:.3e}: mean test L2 {:.4} over {} trials, {} oracle substitutions",
        family.len(),
        report.variance,
        report.bound,
        report.epsilon,
        report.mean_loss,
        report.trials.len(),
        summary.total_interventions
    );
    Ok(Outcome(report.variance <= report.bound))
}

fn grad(o: &Opts) -> Result<Outcome> {
    let d = o.d.unwrap_or(8);
    let k = o.k.unwrap_or(4);
    let n = o.n.unwrap_or(256);
    let first = o.seed.unwrap_or(0);
    let rows = grad_check(d, k, n, first..first + 5)?;
    for r in &rows {
        println!("{:<16} {:?} seed {}: max relative error {:.3e}", r.regime, r.mask, r.seed, r.rel_err);
    }
    if let Some(dir) = &o.out {
        fs::create_dir_all(dir)?;
        formats::write_json(&dir.join("grad_check.json"), &rows)?;
    }
    let ok = rows.iter().all(|r| r.passed());
    println!("{} (tolerance {FD_TOLERANCE:e})", if ok { "all checks passed" } else { "some checks failed" });
    Ok(Outcome(ok))
}

fn verify_link(o: &Opts) -> Result<Outcome> {
    let link = LinkFunction::default();
    let verdict = link.verify();
    let report = LinkReport::new(&link);
    if let Some(dir) = &o.out {
        fs::create_dir_all(dir)?;
        formats::write_json(&dir.join("link.json"), &report)?;
    }
    println!("c = {} sup|phi'| = {} g = {} c' = {}", report.c, report.sup_deriv, report.g, report.c_prime);
    match verdict {
        Ok(()) => {
            println!("all link invariants hold");
            Ok(Outcome(true))
        }
        Err(e) => {
            println!("{e}");
            Ok(Outcome(false))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_without_d_is_usage() {
        assert_eq!(run(["cotlab", "train", "--regime", "direct"]), 2);
        assert_eq!(run(["cotlab", "train", "--d", "8", "--k", "4", "--regime", "sideways"]), 2);
        assert_eq!(run(["cotlab", "frobnicate"]), 2);
        assert_eq!(run(["cotlab", "train", "--bogus"]), 2);
    }

    #[test]
    fn bad_instance_is_usage() {
        let dir = std::env::temp_dir().join("cotlab-bad-instance");
        let out = dir.to_str().unwrap();
        assert_eq!(run(["cotlab", "gen-task", "--d", "8", "--k", "6", "--n", "4", "--out", out]), 2);
    }
}
