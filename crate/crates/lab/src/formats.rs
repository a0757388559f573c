//! On-disk formats: datasets, instances, checkpoints, gradient dumps, traces,
//! run metadata, hardness results and link functions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use cotlab_core::hardness::{HardnessReport, TrialRecord};
use cotlab_core::link::QuadPiece;
use cotlab_core::train::EpochRecord;
use cotlab_core::{AttentionWeights, DecompositionTree, GradMatrix, LinkFunction, MaskKind, TokenMatrix};
use serde::{Deserialize, Serialize};

pub const VERSION: &str = concat!("cotlab ", env!("CARGO_PKG_VERSION"));

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    serde_json::from_reader(r).with_context(|| format!("parsing {}", path.display()))
}

/// `sample_id,x_1,...,x_width` with integer entries.
pub fn write_dataset<W: Write>(out: W, data: &TokenMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![String::from("sample_id")];
    header.extend((1..=data.width()).map(|j| format!("x_{j}")));
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut row = vec![i.to_string()];
        for j in 1..=data.width() {
            let x = data.get(i, j);
            ensure!(x == 1.0 || x == -1.0 || x == 0.0, "entry ({i}, {j}) = {x} is not an integer token");
            row.push((x as i8).to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]; columns past `d` count as set
/// when any entry is nonzero.
pub fn read_dataset<R: Read>(input: R, d: usize) -> Result<TokenMatrix> {
    let mut r = csv::Reader::from_reader(input);
    let width = r.headers()?.len().checked_sub(1).context("missing sample_id column")?;
    ensure!(width >= d, "dataset has {width} token columns, need at least {d}");
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let id: usize = rec[0].parse().with_context(|| format!("row {i}: bad sample id"))?;
        ensure!(id == i, "row {i}: sample id {id} out of order");
        let row = rec.iter().skip(1).map(|s| s.parse::<i8>().map(f64::from)).collect::<std::result::Result<Vec<_>, _>>()?;
        ensure!(row.len() == width, "row {i}: expected {width} tokens");
        rows.push(row);
    }
    let mut data = TokenMatrix::zeros(rows.len(), d, width);
    for j in 1..=width {
        let col: Vec<f64> = rows.iter().map(|r| r[j - 1]).collect();
        if j <= d || col.iter().any(|&x| x != 0.0) {
            data.write_column(j, &col);
        }
    }
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub j: usize,
    pub m: usize,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Checkpoint {
    pub d: usize,
    pub k: usize,
    pub mask_kind: MaskKind,
    /// Row-major unmasked entries.
    pub entries: Vec<Entry>,
}

fn row_major(mut entries: Vec<Entry>) -> Vec<Entry> {
    entries.sort_by_key(|e| (e.m, e.j));
    entries
}

impl Checkpoint {
    pub fn new(weights: &AttentionWeights, tree: &DecompositionTree) -> Self {
        let entries = weights.entries().map(|(j, m, w)| Entry { j, m, w }).collect();
        Checkpoint { d: tree.d(), k: tree.k(), mask_kind: weights.kind(), entries: row_major(entries) }
    }

    pub fn weights(&self, tree: &DecompositionTree) -> Result<AttentionWeights> {
        ensure!(self.d == tree.d() && self.k == tree.k(), "checkpoint is for d={}, k={}", self.d, self.k);
        let mut w = AttentionWeights::zeros(&tree.layout(), self.mask_kind);
        for e in &self.entries {
            if e.j == 0 || e.m == 0 || e.j > w.width() || e.m > w.width() || w.mask().is_forbidden(e.j, e.m) {
                bail!("checkpoint entry ({}, {}) is masked or out of range", e.j, e.m);
            }
            w.set(e.j, e.m, e.w);
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GradientDump {
    pub d: usize,
    pub k: usize,
    pub regime: String,
    pub grad: Vec<Entry>,
}

impl GradientDump {
    pub fn new(grad: &GradMatrix, weights: &AttentionWeights, tree: &DecompositionTree, regime: &str) -> Self {
        let grad_entries = weights.entries().map(|(j, m, _)| Entry { j, m, w: grad.get(j, m) }).collect();
        GradientDump { d: tree.d(), k: tree.k(), regime: regime.to_string(), grad: row_major(grad_entries) }
    }
}

/// `epoch,cot_loss,pred_loss,filter_l1..filter_lv,child_mass_mean`.
pub fn write_trace<W: Write>(out: W, records: &[EpochRecord]) -> Result<()> {
    let levels = records.first().map_or(0, |r| r.filter_active.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![String::from("epoch"), String::from("cot_loss"), String::from("pred_loss")];
    header.extend((1..=levels).map(|l| format!("filter_l{l}")));
    header.push(String::from("child_mass_mean"));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.epoch.to_string(), r.cot_loss.to_string(), r.pred_loss.to_string()];
        row.extend(r.filter_active.iter().map(|&a| u8::from(a).to_string()));
        row.push(r.child_mass_mean.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let columns = r.headers()?.len();
    ensure!(columns >= 4, "trace needs at least 4 columns");
    let levels = columns - 4;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let flags = (0..levels)
            .map(|l| match &rec[3 + l] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => bail!("filter flag {other:?} is not 0 or 1"),
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(EpochRecord {
            epoch: rec[0].parse()?,
            cot_loss: rec[1].parse()?,
            pred_loss: rec[2].parse()?,
            filter_active: flags,
            child_mass_mean: rec[columns - 1].parse()?,
        });
    }
    Ok(out)
}

/// One loss column against epochs, for the per-regime figure files.
pub fn write_loss_series<W: Write>(out: W, records: &[EpochRecord], cot: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", if cot { "cot_loss" } else { "pred_loss" }])?;
    for r in records {
        let y = if cot { r.cot_loss } else { r.pred_loss };
        w.write_record([r.epoch.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl RunMetadata {
    pub fn new<T: Serialize>(command: &str, seed: u64, config: &T) -> Result<Self> {
        Ok(RunMetadata { version: VERSION.to_string(), command: command.to_string(), seed, config: serde_json::to_value(config)? })
    }
}

pub fn write_hardness_trials<W: Write>(out: W, trials: &[TrialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trial", "target", "final_l2", "oracle_interventions"])?;
    for t in trials {
        let target = t.target.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        w.write_record([t.trial.to_string(), target, t.final_l2.to_string(), t.oracle_interventions.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HardnessSummary {
    pub d: usize,
    pub k: usize,
    pub n: usize,
    pub family_size: usize,
    pub mean_loss: f64,
    pub variance: f64,
    pub bound: f64,
    pub epsilon: f64,
    pub total_interventions: usize,
}

impl HardnessSummary {
    pub fn new(report: &HardnessReport, d: usize, k: usize, n: usize, family_size: usize) -> Self {
        HardnessSummary {
            d,
            k,
            n,
            family_size,
            mean_loss: report.mean_loss,
            variance: report.variance,
            bound: report.bound,
            epsilon: report.epsilon,
            total_interventions: report.trials.iter().map(|t| t.oracle_interventions).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LinkReport {
    pub pieces: Vec<QuadPiece>,
    pub c: f64,
    pub sup_deriv: f64,
    pub g: f64,
    pub c_prime: f64,
}

impl LinkReport {
    pub fn new(link: &LinkFunction) -> Self {
        let k = link.constants();
        LinkReport { pieces: link.pieces().to_vec(), c: k.c, sup_deriv: k.sup_deriv, g: k.g, c_prime: k.c_prime }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cotlab_core::task::{build_instance, build_tree, ground_truth_labels, sample_inputs, TargetSource};

    #[test]
    fn dataset_round_trip() {
        let tree = build_tree(&build_instance(6, 4, TargetSource::Seeded(2)).unwrap());
        let data = ground_truth_labels(&tree, &sample_inputs(6, 20, 2)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sample_id,x_1,x_2,x_3,x_4,x_5,x_6,x_7,x_8,x_9\n0,"));
        assert_eq!(read_dataset(buf.as_slice(), 6).unwrap(), data);
    }

    #[test]
    fn checkpoint_rejects_masked_entries() {
        let tree = build_tree(&build_instance(4, 2, TargetSource::Explicit(vec![1, 2])).unwrap());
        let w = AttentionWeights::zeros(&tree.layout(), MaskKind::TeacherForcingCausal);
        let mut ck = Checkpoint::new(&w, &tree);
        assert_eq!(ck.entries.len(), 4);
        assert_eq!(ck.weights(&tree).unwrap(), w);
        ck.entries.push(Entry { j: 5, m: 5, w: 1.0 });
        assert!(ck.weights(&tree).is_err());
    }
}
