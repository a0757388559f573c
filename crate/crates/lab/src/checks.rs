//! Finite-difference checks of the three analytic gradients.

use anyhow::Result;
use cotlab_core::grad::{finite_diff_grad, grad_end_to_end, grad_prediction_only, grad_teacher_forcing, max_relative_error, FeedMode, Objective};
use cotlab_core::model::forward_chain;
use cotlab_core::rng::stream_raw;
use cotlab_core::task::{build_instance, build_tree, ground_truth_labels, sample_inputs};
use cotlab_core::train::{cot_loss, pred_loss};
use cotlab_core::{AttentionWeights, FilterConfig, Layout, LinkFunction, MaskKind, TargetSource};
use rand::Rng;
use serde::Serialize;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;
/// Entries with smaller analytic magnitude are skipped in the relative error.
pub const FD_FLOOR: f64 = 1e-8;

/// Unmasked entries drawn from `U[-scale, scale]`.
pub fn random_weights(layout: &Layout, kind: MaskKind, scale: f64, seed: u64) -> AttentionWeights {
    let mut rng = stream_raw(seed, 900);
    let mut w = AttentionWeights::zeros(layout, kind);
    let slots: Vec<(usize, usize)> = w.entries().map(|(j, m, _)| (j, m)).collect();
    for (j, m) in slots {
        w.set(j, m, rng.gen_range(-scale..scale));
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct GradCheckRow {
    pub regime: &'static str,
    pub mask: MaskKind,
    pub seed: u64,
    pub rel_err: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.rel_err < FD_TOLERANCE
    }
}

/// Teacher forcing, end-to-end (both masks, mix 0.1) and prediction-only
/// gradients against central differences at `seeds` random weight draws.
pub fn grad_check(d: usize, k: usize, n: usize, seeds: std::ops::Range<u64>) -> Result<Vec<GradCheckRow>> {
    let link = LinkFunction::default();
    let off = FilterConfig::OFF;
    let mut rows = Vec::new();
    for seed in seeds {
        let tree = build_tree(&build_instance(d, k, TargetSource::Seeded(seed))?);
        let layout = tree.layout();
        let data = ground_truth_labels(&tree, &sample_inputs(d, n, seed))?;

        let w = random_weights(&layout, MaskKind::TeacherForcingCausal, 1.0, seed);
        let g = grad_teacher_forcing(&w, &data, &layout, &link)?;
        let fd = finite_diff_grad(|w| cot_loss(w, &data, None, &layout, &link, &off, FeedMode::TeacherForced, false), &w, FD_STEP)?;
        rows.push(GradCheckRow { regime: "teacher_forcing", mask: w.kind(), seed, rel_err: max_relative_error(&g, &fd, &w, FD_FLOOR) });

        for kind in [MaskKind::BlockLevel, MaskKind::TeacherForcingCausal] {
            let w = random_weights(&layout, kind, 0.1, seed);
            let g = grad_end_to_end(&w, &data, None, &layout, &link, &off, 0.1)?;
            let objective = Objective::mixed(layout.generated(), 0.1);
            let fd = finite_diff_grad(
                |w| objective.value(&forward_chain(&data, None, w, &layout, &link, &off, None)?, &data),
                &w,
                FD_STEP,
            )?;
            rows.push(GradCheckRow { regime: "end_to_end", mask: kind, seed, rel_err: max_relative_error(&g, &fd, &w, FD_FLOOR) });
        }

        let w = random_weights(&layout, MaskKind::TeacherForcingCausal, 1.0, seed);
        let g = grad_prediction_only(&w, &data, &layout, &link)?;
        let fd = finite_diff_grad(|w| pred_loss(w, &data, None, &layout, &link, &off), &w, FD_STEP)?;
        rows.push(GradCheckRow { regime: "prediction_only", mask: w.kind(), seed, rel_err: max_relative_error(&g, &fd, &w, FD_FLOOR) });
    }
    Ok(rows)
}
