//! Small-scale hardness of learning parity from end-to-end gradients.
//!
//! Over the family of all size-k parities the per-target gradients of the
//! squared loss barely differ from their family mean. An adversarial oracle
//! that answers with the mean whenever the true gradient is within `epsilon`
//! of it therefore leaks almost nothing about the target.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{backward_seeded, GradMatrix};
use crate::link::LinkFunction;
use crate::model::{forward_chain, AttentionWeights, ChainCache, FilterConfig, Layout, MaskKind};
use crate::rng::{self, Stream};
use crate::task::{random_subset, sample_fresh, TokenMatrix};

/// Size-k subsets of `1..=d`, exhaustive or a seeded sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParityFamily {
    pub d: usize,
    pub k: usize,
    pub members: Vec<Vec<usize>>,
    pub exhaustive: bool,
}

impl ParityFamily {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// All size-k subsets in lexicographic order.
pub fn enumerate_family(d: usize, k: usize, cap: u128) -> Result<ParityFamily> {
    if k == 0 || k > d {
        return Err(Error::InvalidSize { d, k });
    }
    let size = binomial(d, k);
    if size > cap {
        return Err(Error::FamilyTooLarge { d, k, size, cap });
    }
    let mut members = Vec::with_capacity(size as usize);
    let mut cur: Vec<usize> = (1..=k).collect();
    loop {
        members.push(cur.clone());
        let Some(pos) = (0..k).rev().find(|&i| cur[i] < d - (k - 1 - i)) else {
            break;
        };
        cur[pos] += 1;
        for i in pos + 1..k {
            cur[i] = cur[i - 1] + 1;
        }
    }
    Ok(ParityFamily { d, k, members, exhaustive: true })
}

/// `size` distinct uniformly drawn subsets, for families too large to list.
pub fn sample_family(d: usize, k: usize, size: usize, seed: u64) -> Result<ParityFamily> {
    if k == 0 || k > d {
        return Err(Error::InvalidSize { d, k });
    }
    let total = binomial(d, k);
    if total <= size as u128 {
        return enumerate_family(d, k, total);
    }
    let mut members: Vec<Vec<usize>> = Vec::with_capacity(size);
    let mut attempt = 0u64;
    while members.len() < size {
        let s = random_subset(d, k, seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15)), Stream::Family);
        attempt += 1;
        if !members.contains(&s) {
            members.push(s);
        }
    }
    members.sort();
    Ok(ParityFamily { d, k, members, exhaustive: false })
}

/// `p(x^i)` for every row of `inputs`.
pub fn parity_values(member: &[usize], inputs: &TokenMatrix) -> Vec<f64> {
    let mut out = vec![1.0; inputs.n()];
    for &j in member {
        for (o, x) in out.iter_mut().zip(inputs.column(j)) {
            *o *= x;
        }
    }
    out
}

/// Empirical correlations `(1/n) sum_i p(x^i) p'(x^i)`.
pub fn gram_matrix(family: &ParityFamily, inputs: &TokenMatrix) -> Vec<Vec<f64>> {
    let values: Vec<Vec<f64>> = family.members.iter().map(|p| parity_values(p, inputs)).collect();
    let n = inputs.n() as f64;
    let size = values.len();
    let mut g = vec![vec![0.0; size]; size];
    for a in 0..size {
        g[a][a] = 1.0;
        for b in a + 1..size {
            let s: f64 = values[a].iter().zip(&values[b]).map(|(x, y)| x * y).sum();
            g[a][b] = s / n;
            g[b][a] = s / n;
        }
    }
    g
}

/// Elementary symmetric polynomial `e_k(x)` by the usual recurrence.
fn elementary_symmetric(x: &[f64], k: usize) -> f64 {
    let mut e = vec![0.0; k + 1];
    e[0] = 1.0;
    for &xi in x {
        for r in (1..=k).rev() {
            e[r] += xi * e[r - 1];
        }
    }
    e[k]
}

/// `(1/|P|) sum_p p(x)` over an exhaustive family, via `e_k(x) / C(d, k)`.
pub fn mean_parity_at_point(x: &[f64], family: &ParityFamily) -> Result<f64> {
    if !family.exhaustive {
        return Err(Error::NotExhaustive);
    }
    if x.len() != family.d {
        return Err(Error::LengthMismatch(x.len(), family.d));
    }
    Ok(elementary_symmetric(x, family.k) / binomial(family.d, family.k) as f64)
}

/// Mean label `(1/|P|) sum_p p(x^i)` per row.
pub fn family_mean_labels(family: &ParityFamily, inputs: &TokenMatrix) -> Vec<f64> {
    if family.exhaustive {
        (0..inputs.n())
            .map(|i| mean_parity_at_point(&inputs.row_values(i)[..family.d], family).expect("exhaustive family"))
            .collect()
    } else {
        let mut acc = vec![0.0; inputs.n()];
        for p in &family.members {
            for (a, v) in acc.iter_mut().zip(parity_values(p, inputs)) {
                *a += v;
            }
        }
        let size = family.len() as f64;
        acc.iter_mut().for_each(|a| *a /= size);
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanEstimator {
    Exhaustive,
    MonteCarlo { sample_size: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub epsilon: f64,
    pub mean_estimator: MeanEstimator,
}

/// The `epsilon`-approximate oracle that hides the target: it answers with
/// the family mean whenever that is a valid `epsilon`-approximation of the
/// true gradient, and with the true gradient otherwise. The flag reports
/// whether the mean was substituted.
pub fn adversarial_oracle(grad: &[f64], mean: &[f64], epsilon: f64) -> (Vec<f64>, bool) {
    assert_eq!(grad.len(), mean.len(), "gradient shapes differ");
    let dist = libm::sqrt(grad.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum());
    if dist <= epsilon {
        (mean.to_vec(), true)
    } else {
        (grad.to_vec(), false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    /// `mean_p | grad_p - mean_p' grad_p' |^2`.
    pub variance: f64,
    /// `2 max(1/|P|, sqrt(4d/n)) sup |grad f|^2`.
    pub bound: f64,
}

pub fn variance_bound(family_size: usize, d: usize, n: usize, sup_grad_norm: f64) -> f64 {
    let delta = libm::sqrt(4.0 * d as f64 / n as f64);
    2.0 * (1.0 / family_size as f64).max(delta) * sup_grad_norm * sup_grad_norm
}

/// Gradient variance over the family for an arbitrary per-target gradient.
pub fn variance_over_family<F>(mut grad_fn: F, family: &ParityFamily, n: usize, sup_grad_norm: f64) -> Result<VarianceReport>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let grads: Vec<Vec<f64>> = family.members.iter().map(|p| grad_fn(p)).collect::<Result<_>>()?;
    let dim = grads.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for g in &grads {
        for (m, x) in mean.iter_mut().zip(g) {
            *m += x;
        }
    }
    let size = grads.len() as f64;
    mean.iter_mut().for_each(|m| *m /= size);
    let variance = grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / size;
    Ok(VarianceReport { variance, bound: variance_bound(family.len(), family.d, n, sup_grad_norm) })
}

/// The direct (no intermediate supervision) model: a causal chain of `k - 1`
/// generated positions whose last output predicts the label, trained on
/// `(1/2n) sum_i (f(x^i) - y^i)^2`.
#[derive(Debug, Clone)]
pub struct DirectModel {
    pub layout: Layout,
    pub weights: AttentionWeights,
    pub link: LinkFunction,
}

impl DirectModel {
    pub fn new(d: usize, k: usize) -> Self {
        let layout = Layout::chain(d, k - 1);
        let weights = AttentionWeights::zeros(&layout, MaskKind::TeacherForcingCausal);
        DirectModel { layout, weights, link: LinkFunction::default() }
    }

    pub fn forward(&self, inputs: &TokenMatrix) -> Result<ChainCache> {
        forward_chain(inputs, None, &self.weights, &self.layout, &self.link, &FilterConfig::OFF, None)
    }

    /// `(1/n) sum_i r_i grad f(x^i)` for per-sample residual weights `r`.
    pub fn pull_back(&self, cache: &ChainCache, residual: &[f64]) -> GradMatrix {
        let n = cache.n();
        let generated = self.layout.generated();
        let mut seed = vec![0.0; n * generated];
        let top = &mut seed[(generated - 1) * n..];
        for (s, r) in top.iter_mut().zip(residual) {
            *s = r / n as f64;
        }
        backward_seeded(cache, &cache.out, &self.link, seed)
    }

    /// Gradient of the squared loss against the given labels.
    pub fn grad(&self, cache: &ChainCache, labels: &[f64]) -> GradMatrix {
        let residual: Vec<f64> = cache.prediction().iter().zip(labels).map(|(f, y)| f - y).collect();
        self.pull_back(cache, &residual)
    }

    /// `sup_i |grad f(x^i)|` over the rows of `inputs`.
    pub fn sup_grad_norm(&self, inputs: &TokenMatrix) -> Result<f64> {
        let mut sup: f64 = 0.0;
        for i in 0..inputs.n() {
            let cache = self.forward(&inputs.row(i))?;
            sup = sup.max(self.pull_back(&cache, &[1.0]).norm());
        }
        Ok(sup)
    }

    /// Mean squared error `(1/n) sum_i (f(x^i) - y^i)^2`.
    pub fn l2_loss(&self, inputs: &TokenMatrix, labels: &[f64]) -> Result<f64> {
        let cache = self.forward(inputs)?;
        let s: f64 = cache.prediction().iter().zip(labels).map(|(f, y)| (f - y) * (f - y)).sum();
        Ok(s / inputs.n() as f64)
    }
}

/// Gradient variance of the direct model at its current weights over an
/// exhaustive family. Deviations from the family mean are pulled back from
/// the label residuals `mean_label - p`, so each member costs one reverse pass.
pub fn direct_variance(model: &DirectModel, family: &ParityFamily, inputs: &TokenMatrix) -> Result<VarianceReport> {
    let cache = model.forward(inputs)?;
    let mean_labels = family_mean_labels(family, inputs);
    let sup = model.sup_grad_norm(inputs)?;
    let mut total = 0.0;
    for p in &family.members {
        let residual: Vec<f64> = parity_values(p, inputs).iter().zip(&mean_labels).map(|(y, m)| m - y).collect();
        let dev = model.pull_back(&cache, &residual).norm();
        total += dev * dev;
    }
    Ok(VarianceReport {
        variance: total / family.len() as f64,
        bound: variance_bound(family.len(), family.d, inputs.n(), sup),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardnessConfig {
    pub n: usize,
    pub trials: usize,
    pub queries: usize,
    pub eta: f64,
    /// Oracle tolerance; `None` uses `variance^(1/3)` at zero weights.
    pub epsilon: Option<f64>,
    pub n_test: usize,
    pub seed: u64,
}

impl HardnessConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        HardnessConfig { n, trials: 20, queries: 100, eta: 1.0, epsilon: None, n_test: 4096, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub target: Vec<usize>,
    pub final_l2: f64,
    pub oracle_interventions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HardnessReport {
    pub trials: Vec<TrialRecord>,
    pub mean_loss: f64,
    pub variance: f64,
    pub bound: f64,
    pub epsilon: f64,
}

/// Runs gradient descent on the direct objective for targets drawn uniformly
/// from the family, with every gradient passed through the oracle, and
/// reports the test loss on fresh inputs.
pub fn hardness_demo(family: &ParityFamily, inputs: &TokenMatrix, config: &HardnessConfig) -> Result<HardnessReport> {
    if !family.exhaustive {
        return Err(Error::NotExhaustive);
    }
    let (d, k) = (family.d, family.k);
    let base = DirectModel::new(d, k);
    let at_zero = direct_variance(&base, family, inputs)?;
    let epsilon = config.epsilon.unwrap_or_else(|| libm::cbrt(at_zero.variance));
    let mean_labels = family_mean_labels(family, inputs);
    let fresh = sample_fresh(d, config.n_test, config.seed);
    let mut pick = rng::stream(config.seed, Stream::Family);
    let mut trials = Vec::with_capacity(config.trials);
    for trial in 0..config.trials {
        let target = family.members[pick.gen_range(0..family.len())].clone();
        let labels = parity_values(&target, inputs);
        let mut model = base.clone();
        let mut interventions = 0;
        for _ in 0..config.queries {
            let cache = model.forward(inputs)?;
            let g = model.grad(&cache, &labels);
            let mean = model.grad(&cache, &mean_labels);
            let (answer, substituted) = adversarial_oracle(g.values(), mean.values(), epsilon);
            interventions += usize::from(substituted);
            let width = model.weights.width();
            let mut step = GradMatrix::zeros(width);
            for m in 1..=width {
                for j in 1..=width {
                    step.set(j, m, answer[(m - 1) * width + (j - 1)]);
                }
            }
            model.weights.step(&step, config.eta);
            if !model.weights.all_finite() {
                return Err(Error::Diverged { epoch: trial });
            }
        }
        let final_l2 = model.l2_loss(&fresh, &parity_values(&target, &fresh))?;
        trials.push(TrialRecord { trial, target, final_l2, oracle_interventions: interventions });
    }
    let mean_loss = trials.iter().map(|t| t.final_l2).sum::<f64>() / trials.len().max(1) as f64;
    Ok(HardnessReport { trials, mean_loss, variance: at_zero.variance, bound: at_zero.bound, epsilon })
}
