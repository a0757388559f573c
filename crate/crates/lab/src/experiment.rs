//! Multi-regime experiments on a shared dataset.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use cotlab_core::task::{build_instance, build_tree, ground_truth_labels, sample_augmented, sample_inputs};
use cotlab_core::train::{train, DataSpec, EpochRecord};
use cotlab_core::{DecompositionTree, Regime, TargetSource, TokenMatrix, Trace, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::formats::{self, Checkpoint, RunMetadata};
use crate::svg::{emit_svg, Axes, PlotSeries};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlotOptions {
    pub log_y: bool,
}

impl Default for PlotOptions {
    fn default() -> Self {
        PlotOptions { log_y: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentSpec {
    pub name: String,
    pub data_spec: DataSpec,
    /// Seed for the target, the inputs and the augmentation.
    pub seed: u64,
    pub configs: Vec<TrainConfig>,
    pub out: PathBuf,
    #[serde(default)]
    pub plot: PlotOptions,
}

impl ExperimentSpec {
    /// The four regimes with their default hyperparameters.
    pub fn figure4(data_spec: DataSpec, epochs: usize, seed: u64, out: PathBuf) -> Self {
        let configs = Regime::ALL
            .into_iter()
            .map(|r| TrainConfig { epochs, ..TrainConfig::for_regime(r, data_spec, seed) })
            .collect();
        ExperimentSpec { name: String::from("figure4"), data_spec, seed, configs, out, plot: PlotOptions::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.configs.iter().enumerate() {
            if self.configs[..i].iter().any(|o| o.regime == c.regime) {
                bail!("regime {} listed twice", c.regime.name());
            }
            if c.data != self.data_spec {
                bail!("regime {} uses a different data spec", c.regime.name());
            }
            c.validate()?;
        }
        if self.configs.is_empty() {
            bail!("experiment has no regimes");
        }
        Ok(())
    }
}

/// Worker count from `COTLAB_THREADS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("COTLAB_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub struct SharedData {
    pub tree: DecompositionTree,
    pub data: TokenMatrix,
    pub augmented: Option<TokenMatrix>,
}

pub fn shared_data(spec: &DataSpec, seed: u64) -> Result<SharedData> {
    let tree = build_tree(&build_instance(spec.d, spec.k, TargetSource::Seeded(seed))?);
    let data = ground_truth_labels(&tree, &sample_inputs(spec.d, spec.n, seed))?;
    let augmented = (spec.n_prime > 0).then(|| sample_augmented(spec.d, spec.n_prime, seed).0);
    Ok(SharedData { tree, data, augmented })
}

#[derive(Debug, Clone)]
pub struct RegimeResult {
    pub regime: Regime,
    pub trace: Trace,
}

/// Trains every regime of the experiment on one shared dataset, at most
/// [`worker_count`] at a time, in spec order.
pub fn run_regimes(spec: &ExperimentSpec, shared: &SharedData) -> Result<Vec<RegimeResult>> {
    spec.validate()?;
    let workers = worker_count().min(spec.configs.len()).max(1);
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<Result<Trace>>>> = spec.configs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = {
                    let mut g = next.lock().expect("poisoned");
                    let i = *g;
                    *g += 1;
                    i
                };
                let Some(config) = spec.configs.get(i) else { break };
                let aug = if config.regime == Regime::CotSelfConsistency { shared.augmented.as_ref() } else { None };
                let out = train(config, &shared.data, aug, &shared.tree).map_err(anyhow::Error::from);
                *slots[i].lock().expect("poisoned") = Some(out);
            });
        }
    });
    spec.configs
        .iter()
        .zip(slots)
        .map(|(c, slot)| {
            let trace = slot.into_inner().expect("poisoned").expect("every regime ran")?;
            Ok(RegimeResult { regime: c.regime, trace })
        })
        .collect()
}

fn write_to(path: &Path, f: impl FnOnce(BufWriter<File>) -> Result<()>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f(BufWriter::new(file))
}

fn series(label: &str, records: &[EpochRecord], cot: bool) -> PlotSeries {
    let x = records.iter().map(|r| r.epoch as f64).collect();
    let y = records.iter().map(|r| if cot { r.cot_loss } else { r.pred_loss }).collect();
    PlotSeries::new(label, x, y)
}

/// Runs the regimes and writes, per regime, a directory with the full trace,
/// final checkpoint and metadata plus `cot.csv` / `pred.csv`; at the top level
/// `cot_loss.svg`, `pred_loss.svg` and the experiment metadata.
pub fn run_figure4(spec: &ExperimentSpec) -> Result<Vec<RegimeResult>> {
    let shared = shared_data(&spec.data_spec, spec.seed)?;
    let results = run_regimes(spec, &shared)?;
    fs::create_dir_all(&spec.out)?;
    for (r, config) in results.iter().zip(&spec.configs) {
        let dir = spec.out.join(r.regime.name());
        fs::create_dir_all(&dir)?;
        write_to(&dir.join("trace.csv"), |w| formats::write_trace(w, &r.trace.records))?;
        write_to(&dir.join("cot.csv"), |w| formats::write_loss_series(w, &r.trace.records, true))?;
        write_to(&dir.join("pred.csv"), |w| formats::write_loss_series(w, &r.trace.records, false))?;
        formats::write_json(&dir.join("checkpoint.json"), &Checkpoint::new(&r.trace.weights, &shared.tree))?;
        formats::write_json(&dir.join("metadata.json"), &RunMetadata::new("train", config.seed, config)?)?;
    }
    for (cot, file, title) in [(true, "cot_loss.svg", "CoT loss"), (false, "pred_loss.svg", "Prediction loss")] {
        let plots: Vec<PlotSeries> = results
            .iter()
            .map(|r| {
                let mut s = series(r.regime.name(), &r.trace.records, cot);
                if r.regime == Regime::CotSelfConsistency {
                    s.markers = r.trace.deactivation_epochs().into_iter().flatten().map(|e| e as f64).collect();
                }
                s
            })
            .collect();
        let axes = Axes {
            title: format!("{title}, d={}, k={}", spec.data_spec.d, spec.data_spec.k),
            x_label: String::from("epoch"),
            y_label: String::from(if cot { "CoT loss" } else { "prediction loss" }),
            log_y: spec.plot.log_y,
        };
        fs::write(spec.out.join(file), emit_svg(&plots, &axes))?;
    }
    formats::write_json(&spec.out.join("metadata.json"), &RunMetadata::new("figure4", spec.seed, spec)?)?;
    formats::write_json(&spec.out.join("instance.json"), &shared.tree.instance)?;
    Ok(results)
}
