//! Hand-derived reverse-mode gradients of the squared-error objectives with
//! respect to the attention logits, a central-difference oracle, and the
//! gradient-norm and concentration bounds used by the analysis.
//!
//! For a node `m` with softmax scores `s` over sources `x_j`,
//!
//! ```text
//! dL/dw[j][m] = s_j * < dz_m, x_j - z_m >,   dz_m = phi'(z_m) * dL/dx_m
//! ```
//!
//! and when the sources were themselves generated, `dL/dx_j += s_j * dz_m`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::LinkFunction;
use crate::model::{forward_chain, forward_teacher, AttentionWeights, ChainCache, FilterConfig, Layout, MaskKind};
use crate::task::{contraction, is_trivial, DecompositionTree, TokenMatrix};

/// `dL/dw[j][m]` laid out like the logits; masked entries stay zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradMatrix {
    width: usize,
    data: Vec<f64>,
}

impl GradMatrix {
    pub fn zeros(width: usize) -> Self {
        GradMatrix { width, data: vec![0.0; width * width] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, j: usize, m: usize) -> f64 {
        self.data[(m - 1) * self.width + (j - 1)]
    }

    pub fn set(&mut self, j: usize, m: usize, g: f64) {
        self.data[(m - 1) * self.width + (j - 1)] = g;
    }

    /// Row `m`, indexed by `j - 1`.
    pub fn row(&self, m: usize) -> &[f64] {
        &self.data[(m - 1) * self.width..m * self.width]
    }

    /// Flat row-major values.
    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, g| a.max(g.abs()))
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|g| g * g).sum())
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, other: &GradMatrix, a: f64) {
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for x in &mut self.data {
            *x *= a;
        }
    }

    pub fn distance(&self, other: &GradMatrix) -> f64 {
        libm::sqrt(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

/// Weights of the two squared-error terms:
/// `cot * (1/2n) sum_m |x_m - label_m|^2 + pred * (1/2n) |x_top - y|^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub cot: f64,
    pub pred: f64,
}

impl Objective {
    pub const COT: Objective = Objective { cot: 1.0, pred: 0.0 };
    pub const PRED: Objective = Objective { cot: 0.0, pred: 1.0 };

    /// Chain-of-thought loss averaged over the generated nodes plus a fraction
    /// `loss_mix` of the prediction loss.
    pub fn mixed(generated: usize, loss_mix: f64) -> Self {
        Objective { cot: 1.0 / generated as f64, pred: loss_mix }
    }

    pub fn value(&self, cache: &ChainCache, data: &TokenMatrix) -> Result<f64> {
        let (d, width, n) = (cache.out.d(), cache.out.width(), cache.n());
        check_labels(data, d, width, *self)?;
        let mut total = 0.0;
        if self.cot != 0.0 {
            let s: f64 = (d + 1..=width).map(|m| sq_dist(cache.out.column(m), data.column(m))).sum();
            total += self.cot * s;
        }
        if self.pred != 0.0 {
            total += self.pred * sq_dist(cache.prediction(), data.column(width));
        }
        Ok(total / (2.0 * n as f64))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_labels(data: &TokenMatrix, d: usize, width: usize, objective: Objective) -> Result<()> {
    if data.width() < width {
        return Err(Error::MissingLabels(data.width() + 1));
    }
    let first = if objective.cot != 0.0 { d + 1 } else { width };
    match (first..=width).find(|&m| !data.is_set(m)) {
        Some(m) => Err(Error::MissingLabels(m)),
        None => Ok(()),
    }
}

/// Reverse pass from explicit output seeds `dL/dx_m` (generated columns,
/// column-major `n * generated`).
pub fn backward_seeded(cache: &ChainCache, sources: &TokenMatrix, link: &LinkFunction, mut dx: Vec<f64>) -> GradMatrix {
    let (d, width, n) = (cache.out.d(), cache.out.width(), cache.n());
    let sources = if cache.teacher { sources } else { &cache.out };
    let mut grad = GradMatrix::zeros(width);
    let mut dz = vec![0.0; n];
    for m in (d + 1..=width).rev() {
        if !cache.is_open(m) {
            continue;
        }
        let g = m - d - 1;
        let z = cache.pre_activation(m);
        let mut dzz = 0.0;
        let mut any = false;
        for i in 0..n {
            dz[i] = link.slope(z[i]) * dx[g * n + i];
            dzz += dz[i] * z[i];
            any |= dz[i] != 0.0;
        }
        if !any {
            continue;
        }
        for &(j, s) in cache.scores(m) {
            let col = sources.column(j);
            let dot: f64 = dz.iter().zip(col).map(|(a, b)| a * b).sum();
            grad.set(j, m, s * (dot - dzz));
            if !cache.teacher && j > d {
                let h = j - d - 1;
                for (acc, v) in dx[h * n..(h + 1) * n].iter_mut().zip(&dz) {
                    *acc += s * v;
                }
            }
        }
    }
    grad
}

/// Gradient of `objective` given a forward cache. `data` must carry labels for
/// every column the objective reads.
pub fn backward(cache: &ChainCache, data: &TokenMatrix, link: &LinkFunction, objective: Objective) -> Result<GradMatrix> {
    let (d, width, n) = (cache.out.d(), cache.out.width(), cache.n());
    check_labels(data, d, width, objective)?;
    let inv_n = 1.0 / n as f64;
    let mut dx = vec![0.0; n * (width - d)];
    if objective.cot != 0.0 {
        for m in d + 1..=width {
            let g = m - d - 1;
            for (i, (x, y)) in cache.out.column(m).iter().zip(data.column(m)).enumerate() {
                dx[g * n + i] = objective.cot * (x - y) * inv_n;
            }
        }
    }
    if objective.pred != 0.0 {
        let g = width - d - 1;
        for (i, (x, y)) in cache.prediction().iter().zip(data.column(width)).enumerate() {
            dx[g * n + i] += objective.pred * (x - y) * inv_n;
        }
    }
    Ok(backward_seeded(cache, data, link, dx))
}

/// Gradient of `(1/2n) sum_m |phi(z_m) - x_m|^2` where every `z_m` reads
/// ground-truth sources.
pub fn grad_teacher_forcing(weights: &AttentionWeights, data: &TokenMatrix, layout: &Layout, link: &LinkFunction) -> Result<GradMatrix> {
    grad_teacher_objective(weights, data, layout, link, Objective::COT)
}

pub fn grad_teacher_objective(
    weights: &AttentionWeights,
    data: &TokenMatrix,
    layout: &Layout,
    link: &LinkFunction,
    objective: Objective,
) -> Result<GradMatrix> {
    let cache = forward_teacher(data, weights, layout, link)?;
    backward(&cache, data, link, objective)
}

/// Gradient through the whole generated chain of the chain-of-thought loss
/// averaged over generated nodes plus `loss_mix` times the prediction loss.
#[allow(clippy::too_many_arguments)]
pub fn grad_end_to_end(
    weights: &AttentionWeights,
    data: &TokenMatrix,
    augmented: Option<&TokenMatrix>,
    layout: &Layout,
    link: &LinkFunction,
    filter: &FilterConfig,
    loss_mix: f64,
) -> Result<GradMatrix> {
    let cache = forward_chain(data, augmented, weights, layout, link, filter, None)?;
    backward(&cache, data, link, Objective::mixed(layout.generated(), loss_mix))
}

/// Gradient of `(1/2n) |y_hat - y|^2` through the generated chain.
pub fn grad_prediction_only(weights: &AttentionWeights, data: &TokenMatrix, layout: &Layout, link: &LinkFunction) -> Result<GradMatrix> {
    let cache = forward_chain(data, None, weights, layout, link, &FilterConfig::OFF, None)?;
    backward(&cache, data, link, Objective::PRED)
}

/// Central differences `(L(w + h) - L(w - h)) / 2h` at every unmasked logit.
pub fn finite_diff_grad<F>(mut loss: F, weights: &AttentionWeights, h: f64) -> Result<GradMatrix>
where
    F: FnMut(&AttentionWeights) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let mut grad = GradMatrix::zeros(weights.width());
    let mut probe = weights.clone();
    for (j, m, w) in weights.entries() {
        probe.set(j, m, w + h);
        let up = loss(&probe)?;
        probe.set(j, m, w - h);
        let down = loss(&probe)?;
        probe.set(j, m, w);
        grad.set(j, m, (up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest `|a - b| / max(|a|, |b|)` over unmasked entries with `|a| > floor`.
pub fn max_relative_error(analytic: &GradMatrix, numeric: &GradMatrix, weights: &AttentionWeights, floor: f64) -> f64 {
    weights
        .entries()
        .map(|(j, m, _)| (analytic.get(j, m), numeric.get(j, m)))
        .filter(|(a, _)| a.abs() > floor)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadingRow {
    pub m: usize,
    pub child_grad_mean: f64,
    pub non_child_grad_max: f64,
    pub predicted_leading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadingTermReport {
    pub rows: Vec<LeadingRow>,
}

impl LeadingTermReport {
    /// Every row's child mean is within `rel` of the predicted leading term.
    pub fn within(&self, rel: f64) -> bool {
        self.rows.iter().all(|r| (r.child_grad_mean - r.predicted_leading).abs() <= rel * r.predicted_leading.abs())
    }

    pub fn concentrated(&self) -> bool {
        self.rows.iter().all(|r| r.non_child_grad_max < r.child_grad_mean.abs())
    }
}

/// Splits each row of an initial gradient into the child signal and the rest,
/// next to the predicted leading term `-2c / S^2` where `S` is the number of
/// sources the row averages over at zero weights.
pub fn leading_term_report(grad: &GradMatrix, tree: &DecompositionTree, link: &LinkFunction, kind: MaskKind) -> LeadingTermReport {
    let c = link.constants().c;
    let d = tree.d();
    let rows = (d + 1..=tree.width())
        .map(|m| {
            let (a, b) = tree.children(m).expect("generated node has children");
            let sources = match kind {
                MaskKind::TeacherForcingCausal => m - 1,
                MaskKind::BlockLevel => tree.level_bound(tree.height(m) - 1),
            };
            let non_child = (1..=sources)
                .filter(|&j| j != a && j != b)
                .map(|j| grad.get(j, m).abs())
                .fold(0.0, f64::max);
            LeadingRow {
                m,
                child_grad_mean: 0.5 * (grad.get(a, m) + grad.get(b, m)),
                non_child_grad_max: non_child,
                predicted_leading: -2.0 * c / (sources * sources) as f64,
            }
        })
        .collect();
    LeadingTermReport { rows }
}

/// How the per-sample model output is produced for a Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedMode {
    /// Every node reads ground-truth sources.
    TeacherForced,
    /// Nodes read the generated chain.
    Generated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradBoundReport {
    /// `|| d f(x) / dW ||_F` per sample.
    pub norms: Vec<f64>,
    pub bound: f64,
    /// First sample whose norm exceeds the bound.
    pub violation: Option<usize>,
}

impl GradBoundReport {
    pub fn max_norm(&self) -> f64 {
        self.norms.iter().copied().fold(0.0, f64::max)
    }

    pub fn holds(&self) -> bool {
        self.violation.is_none()
    }
}

/// `2 sup|phi'| sqrt(k - 1)`.
pub fn teacher_forcing_norm_bound(sup_deriv: f64, generated: usize) -> f64 {
    2.0 * sup_deriv * libm::sqrt(generated as f64)
}

/// `sqrt(4 K^4 / ((K^2 - 2)(2K^2 - 1)) * (2K^2)^v)` with `K = sup|phi'|`.
pub fn end_to_end_norm_bound(sup_deriv: f64, v: usize) -> f64 {
    let k2 = sup_deriv * sup_deriv;
    libm::sqrt(4.0 * k2 * k2 / ((k2 - 2.0) * (2.0 * k2 - 1.0)) * libm::pow(2.0 * k2, v as f64))
}

/// Frobenius norm of the Jacobian of all generated outputs of one sample.
fn jacobian_norm(cache: &ChainCache, sources: &TokenMatrix, link: &LinkFunction) -> f64 {
    let (d, width) = (cache.out.d(), cache.out.width());
    let generated = width - d;
    let mut total = 0.0;
    for alpha in 0..generated {
        let mut seed = vec![0.0; generated];
        seed[alpha] = 1.0;
        let g = backward_seeded(cache, sources, link, seed);
        total += g.values().iter().map(|x| x * x).sum::<f64>();
    }
    libm::sqrt(total)
}

/// Per-sample gradient norms of the model outputs against the explicit
/// uniform bound for the feed mode. Generated mode expects a block mask and
/// a tree layout with `v` levels.
pub fn check_grad_bounds(
    weights: &AttentionWeights,
    data: &TokenMatrix,
    layout: &Layout,
    link: &LinkFunction,
    mode: FeedMode,
) -> Result<GradBoundReport> {
    let sup = link.constants().sup_deriv;
    let bound = match mode {
        FeedMode::TeacherForced => teacher_forcing_norm_bound(sup, layout.generated()),
        FeedMode::Generated => end_to_end_norm_bound(sup, layout.levels()),
    };
    let mut norms = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let sample = data.row(i);
        let cache = match mode {
            FeedMode::TeacherForced => forward_teacher(&sample, weights, layout, link)?,
            FeedMode::Generated => forward_chain(&sample, None, weights, layout, link, &FilterConfig::OFF, None)?,
        };
        norms.push(jacobian_norm(&cache, &sample, link));
    }
    let violation = norms.iter().position(|&x| x > bound);
    Ok(GradBoundReport { norms, bound, violation })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionReport {
    /// Largest `|<x_j1, ..., x_jr>| / n` over nontrivial tuples, `r <= 4`.
    pub max_interaction: f64,
    pub kappa: f64,
    pub tuples: usize,
}

/// Scans every nondecreasing index tuple of order 1 to 4 over all columns of
/// the labeled data and compares nontrivial interactions with `kappa(n, p, d)`.
pub fn interaction_check(tree: &DecompositionTree, data: &TokenMatrix, p: f64) -> Result<InteractionReport> {
    let width = tree.width();
    if data.width() < width {
        return Err(Error::MissingLabels(data.width() + 1));
    }
    let n = data.n() as f64;
    let mut max_interaction: f64 = 0.0;
    let mut tuples = 0;
    let mut idx = [0usize; 4];
    for r in 1..=4 {
        // Odometer over 1 <= i_1 <= ... <= i_r <= width.
        for slot in idx.iter_mut().take(r) {
            *slot = 1;
        }
        loop {
            let t = &idx[..r];
            if !is_trivial(t, tree) {
                let cols: Vec<&[f64]> = t.iter().map(|&j| data.column(j)).collect();
                max_interaction = max_interaction.max(contraction(&cols)?.abs() / n);
                tuples += 1;
            }
            let mut pos = r;
            while pos > 0 && idx[pos - 1] == width {
                pos -= 1;
            }
            if pos == 0 {
                break;
            }
            idx[pos - 1] += 1;
            let v = idx[pos - 1];
            for slot in idx.iter_mut().take(r).skip(pos) {
                *slot = v;
            }
        }
    }
    Ok(InteractionReport { max_interaction, kappa: crate::task::kappa(data.n(), p, tree.d()), tuples })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationReport {
    /// `|| (1/d_l) sum_{j <= d_l} x_j^+ ||_inf` per level `l = 0..=v`.
    pub partial_means: Vec<f64>,
    pub bounds: Vec<f64>,
}

impl AugmentationReport {
    pub fn holds(&self) -> bool {
        self.partial_means.iter().zip(&self.bounds).all(|(a, b)| a <= b)
    }
}

/// Level-wise Hoeffding bound on the running means of labeled augmented
/// columns. The failure budget is split evenly over the `v + 1` levels.
pub fn augmentation_check(tree: &DecompositionTree, augmented: &TokenMatrix, budget: f64) -> Result<AugmentationReport> {
    if augmented.width() < tree.width() {
        return Err(Error::MissingLabels(augmented.width() + 1));
    }
    let v = tree.v();
    let n_prime = augmented.n();
    let p = budget / (v + 1) as f64;
    let log_term = libm::log(2.0 * n_prime as f64 / p);
    let mut sums = vec![0.0; n_prime];
    let mut radius = 0.0;
    let mut partial_means = Vec::with_capacity(v + 1);
    let mut bounds = Vec::with_capacity(v + 1);
    for level in 0..=v {
        let nodes = tree.level_nodes(level);
        let size = nodes.clone().count();
        for j in nodes {
            for (s, x) in sums.iter_mut().zip(augmented.column(j)) {
                *s += x;
            }
        }
        radius += libm::sqrt(2.0 * size as f64 * log_term);
        let dl = tree.level_bound(level) as f64;
        partial_means.push(sums.iter().fold(0.0, |a: f64, s| a.max(s.abs())) / dl);
        bounds.push(radius / dl);
    }
    Ok(AugmentationReport { partial_means, bounds })
}
