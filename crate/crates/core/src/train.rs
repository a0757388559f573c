//! Full-batch gradient descent for the four training regimes, losses,
//! evaluation on fresh inputs, and the one-step and staged learning checks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{backward, leading_term_report, FeedMode, GradMatrix, LeadingTermReport, Objective};
use crate::hardness::{family_mean_labels, sample_family, MeanEstimator, OracleConfig};
use crate::link::LinkFunction;
use crate::model::{forward_chain, forward_teacher, quantize, AttentionWeights, ChainCache, FilterConfig, FilterMode, Layout, MaskKind};
use crate::rng::{self, Stream};
use crate::task::{enumerate_inputs, ground_truth_labels, sample_fresh, sample_inputs, DecompositionTree, TokenMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Prediction loss only, through the causal chain.
    Direct,
    /// Chain-of-thought loss through the generated chain with the level mask.
    Cot,
    /// Chain-of-thought loss with ground-truth sources.
    CotTeacherForcing,
    /// Level mask, self-consistency filter and a prediction-loss share.
    CotSelfConsistency,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Direct, Regime::Cot, Regime::CotTeacherForcing, Regime::CotSelfConsistency];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Direct => "direct",
            Regime::Cot => "cot",
            Regime::CotTeacherForcing => "cot_teacher_forcing",
            Regime::CotSelfConsistency => "cot_self_consistency",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        Regime::ALL.into_iter().find(|r| r.name() == s || r.name().replace('_', "-") == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DataSpec {
    pub d: usize,
    pub k: usize,
    pub n: usize,
    #[serde(default)]
    pub n_prime: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainConfig {
    pub regime: Regime,
    pub eta: f64,
    pub epochs: usize,
    pub quantize_every_step: bool,
    pub loss_mix: f64,
    pub oracle: Option<OracleConfig>,
    pub seed: u64,
    pub data: DataSpec,
    pub mask: MaskKind,
    pub filter: FilterConfig,
}

/// Learning rate of the chain-of-thought regimes for `k = 8, 16, 32`; other
/// sizes take the nearest listed value.
pub fn default_eta(k: usize) -> f64 {
    match k {
        0..=11 => 15.0,
        12..=23 => 50.0,
        _ => 100.0,
    }
}

impl TrainConfig {
    pub fn for_regime(regime: Regime, data: DataSpec, seed: u64) -> Self {
        let eta = default_eta(data.k);
        let base = TrainConfig {
            regime,
            eta,
            epochs: 350,
            quantize_every_step: false,
            loss_mix: 0.0,
            oracle: None,
            seed,
            data,
            mask: MaskKind::BlockLevel,
            filter: FilterConfig::OFF,
        };
        match regime {
            Regime::Direct => TrainConfig { eta: 0.01 * eta, mask: MaskKind::TeacherForcingCausal, ..base },
            Regime::Cot => base,
            Regime::CotTeacherForcing => TrainConfig { mask: MaskKind::TeacherForcingCausal, ..base },
            Regime::CotSelfConsistency => TrainConfig {
                loss_mix: 0.1,
                filter: FilterConfig { mode: FilterMode::WeightThreshold { tau: 0.4 }, latch: true },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(Error::InvalidConfig(String::from(s)));
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("eta must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.loss_mix) {
            return bad("loss mix must lie in [0, 1]");
        }
        if self.loss_mix != 0.0 && self.regime != Regime::CotSelfConsistency {
            return bad("loss mix applies to the self-consistency regime only");
        }
        if self.oracle.is_some() && self.regime != Regime::Direct {
            return bad("the gradient oracle is defined for the direct regime only");
        }
        if self.regime == Regime::CotTeacherForcing && !self.filter.is_off() {
            return bad("teacher forcing runs without a filter");
        }
        if self.data.n == 0 {
            return bad("n must be positive");
        }
        self.filter.validate()
    }

    fn objective(&self, generated: usize) -> Objective {
        match self.regime {
            Regime::Direct => Objective::PRED,
            Regime::Cot | Regime::CotTeacherForcing => Objective::mixed(generated, 0.0),
            Regime::CotSelfConsistency => Objective::mixed(generated, self.loss_mix),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochRecord {
    pub epoch: usize,
    /// Chain-of-thought loss averaged over generated nodes.
    pub cot_loss: f64,
    pub pred_loss: f64,
    /// Per level `1..=v`: the filter is zeroing that level.
    pub filter_active: Vec<bool>,
    /// Mean over rows of the softmax mass on the two children.
    pub child_mass_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub records: Vec<EpochRecord>,
    pub weights: AttentionWeights,
}

impl Trace {
    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("trace has epoch 0")
    }

    /// Per level, the first epoch from which the filter stays off, if any.
    pub fn deactivation_epochs(&self) -> Vec<Option<usize>> {
        let levels = self.records.first().map_or(0, |r| r.filter_active.len());
        (0..levels)
            .map(|l| {
                let last_active = self.records.iter().rposition(|r| r.filter_active[l]);
                match last_active {
                    None => Some(self.records[0].epoch),
                    Some(i) if i + 1 < self.records.len() => Some(self.records[i + 1].epoch),
                    Some(_) => None,
                }
            })
            .collect()
    }
}

fn child_mass_mean(weights: &AttentionWeights, tree: &DecompositionTree) -> Result<f64> {
    let mut total = 0.0;
    for m in tree.d() + 1..=tree.width() {
        let (a, b) = tree.children(m).expect("internal node");
        let scores = weights.row_scores(m)?;
        total += scores.iter().filter(|(j, _)| *j == a || *j == b).map(|p| p.1).sum::<f64>();
    }
    Ok(total / (tree.k() - 1) as f64)
}

#[allow(clippy::too_many_arguments)]
fn run_forward(
    weights: &AttentionWeights,
    data: &TokenMatrix,
    augmented: Option<&TokenMatrix>,
    layout: &Layout,
    link: &LinkFunction,
    filter: &FilterConfig,
    feed: FeedMode,
    forced_open: Option<&[bool]>,
) -> Result<ChainCache> {
    match feed {
        FeedMode::TeacherForced => forward_teacher(data, weights, layout, link),
        FeedMode::Generated => forward_chain(&data.inputs_only(), augmented, weights, layout, link, filter, forced_open),
    }
}

/// `(1/2n) sum_{m > d} |x_hat_m - x_m|^2`, divided by `k - 1` when `scaled`.
#[allow(clippy::too_many_arguments)]
pub fn cot_loss(
    weights: &AttentionWeights,
    data: &TokenMatrix,
    augmented: Option<&TokenMatrix>,
    layout: &Layout,
    link: &LinkFunction,
    filter: &FilterConfig,
    feed: FeedMode,
    scaled: bool,
) -> Result<f64> {
    let cache = run_forward(weights, data, augmented, layout, link, filter, feed, None)?;
    let scale = if scaled { 1.0 / layout.generated() as f64 } else { 1.0 };
    Objective { cot: scale, pred: 0.0 }.value(&cache, data)
}

/// `(1/2n) |y_hat - y|^2` with `y_hat` read off the generated chain.
pub fn pred_loss(
    weights: &AttentionWeights,
    data: &TokenMatrix,
    augmented: Option<&TokenMatrix>,
    layout: &Layout,
    link: &LinkFunction,
    filter: &FilterConfig,
) -> Result<f64> {
    let cache = run_forward(weights, data, augmented, layout, link, filter, FeedMode::Generated, None)?;
    Objective::PRED.value(&cache, data)
}

/// Family-mean gradient for the oracle: the same reverse pass with each label
/// replaced by its mean over the parity family.
struct OracleState {
    epsilon: f64,
    mean_labels: TokenMatrix,
}

impl OracleState {
    fn new(config: &OracleConfig, d: usize, k: usize, data: &TokenMatrix) -> Result<Self> {
        let family = match config.mean_estimator {
            MeanEstimator::Exhaustive => crate::hardness::enumerate_family(d, k, 10_000)?,
            MeanEstimator::MonteCarlo { sample_size, seed } => sample_family(d, k, sample_size, seed)?,
        };
        let mean = family_mean_labels(&family, data);
        let mut mean_labels = data.clone();
        let top = data.width();
        mean_labels.write_column(top, &mean);
        Ok(OracleState { epsilon: config.epsilon, mean_labels })
    }
}

/// Full-batch gradient descent. Records losses at epoch 0 (initialization)
/// and after every update; `data` carries ground-truth labels in all columns.
pub fn train(config: &TrainConfig, data: &TokenMatrix, augmented: Option<&TokenMatrix>, tree: &DecompositionTree) -> Result<Trace> {
    train_with_link(config, data, augmented, tree, &LinkFunction::default())
}

pub fn train_with_link(
    config: &TrainConfig,
    data: &TokenMatrix,
    augmented: Option<&TokenMatrix>,
    tree: &DecompositionTree,
    link: &LinkFunction,
) -> Result<Trace> {
    config.validate()?;
    let layout = tree.layout();
    let levels = layout.levels();
    let objective = config.objective(layout.generated());
    let teacher = config.regime == Regime::CotTeacherForcing;
    let train_feed = if teacher { FeedMode::TeacherForced } else { FeedMode::Generated };
    let oracle = match &config.oracle {
        Some(o) => Some(OracleState::new(o, tree.d(), tree.k(), data)?),
        None => None,
    };
    let mut weights = AttentionWeights::zeros(&layout, config.mask);
    let mut forced = vec![false; levels + 1];
    let mut records = Vec::with_capacity(config.epochs + 1);
    let scale = Objective::mixed(layout.generated(), 0.0);
    for epoch in 0..=config.epochs {
        let latch = if config.filter.latch { Some(forced.as_slice()) } else { None };
        let cache = run_forward(&weights, data, augmented, &layout, link, &config.filter, train_feed, latch)?;
        let cot = scale.value(&cache, data)?;
        let pred = if teacher {
            let chain = run_forward(&weights, data, None, &layout, link, &config.filter, FeedMode::Generated, None)?;
            Objective::PRED.value(&chain, data)?
        } else {
            Objective::PRED.value(&cache, data)?
        };
        if !cot.is_finite() || !pred.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let filter_active: Vec<bool> = (1..=levels).map(|l| !cache.gates[l]).collect();
        if config.filter.latch {
            for (f, &g) in forced.iter_mut().zip(&cache.gates) {
                *f |= g;
            }
        }
        records.push(EpochRecord {
            epoch,
            cot_loss: cot,
            pred_loss: pred,
            filter_active,
            child_mass_mean: child_mass_mean(&weights, tree)?,
        });
        if epoch == config.epochs {
            break;
        }
        let mut grad = backward(&cache, data, link, objective)?;
        if let Some(o) = &oracle {
            let mean = backward(&cache, &o.mean_labels, link, objective)?;
            if grad.distance(&mean) <= o.epsilon {
                grad = mean;
            }
        }
        weights.step(&grad, config.eta);
        if config.quantize_every_step {
            weights = quantize(&weights);
        }
        if !weights.all_finite() {
            return Err(Error::Diverged { epoch });
        }
    }
    Ok(Trace { records, weights })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub max_abs_err: f64,
    pub mean_zero_one_err: f64,
}

/// Generates the full chain from fresh inputs alone and scores the top node
/// against the true parity; the zero-one error thresholds at 0.
pub fn evaluate(
    weights: &AttentionWeights,
    tree: &DecompositionTree,
    link: &LinkFunction,
    filter: &FilterConfig,
    fresh: &TokenMatrix,
    augmented: Option<&TokenMatrix>,
) -> Result<EvalReport> {
    let layout = tree.layout();
    let cache = forward_chain(&fresh.inputs_only(), augmented, weights, &layout, link, filter, None)?;
    let y = ground_truth_labels(tree, &fresh.inputs_only())?;
    let y = y.column(tree.width());
    let mut max_abs_err: f64 = 0.0;
    let mut wrong = 0usize;
    for (p, t) in cache.prediction().iter().zip(y) {
        max_abs_err = max_abs_err.max((p - t).abs());
        let sign = if *p >= 0.0 { 1.0 } else { -1.0 };
        wrong += usize::from(sign != *t);
    }
    Ok(EvalReport { max_abs_err, mean_zero_one_err: wrong as f64 / y.len() as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// All `2^d` inputs.
    Enumerate,
    Sample { n: usize, seed: u64 },
}

impl DataSource {
    pub fn inputs(&self, d: usize) -> Result<TokenMatrix> {
        match *self {
            DataSource::Enumerate if d <= 20 => Ok(enumerate_inputs(d)),
            DataSource::Enumerate => Err(Error::InvalidConfig(String::from("enumeration needs d <= 20"))),
            DataSource::Sample { n, seed } => Ok(sample_inputs(d, n, seed)),
        }
    }
}

/// `d^2.5 * eta0`, the step size of the staged check at exponent 8.
pub fn theorem_eta(d: usize, eta0: f64) -> f64 {
    libm::pow(d as f64, 2.5) * eta0
}

/// Adds a random perturbation of Euclidean norm `epsilon` on unmasked entries.
fn perturb(grad: &mut GradMatrix, weights: &AttentionWeights, epsilon: f64, seed: u64) {
    let mut rng = rng::stream(seed, Stream::Oracle);
    let dirs: Vec<(usize, usize, f64)> =
        weights.entries().map(|(j, m, _)| (j, m, rng.gen_range(-1.0..1.0))).collect();
    let norm = libm::sqrt(dirs.iter().map(|p| p.2 * p.2).sum());
    if norm == 0.0 {
        return;
    }
    for (j, m, u) in dirs {
        grad.set(j, m, grad.get(j, m) + epsilon * u / norm);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleNoise {
    pub epsilon: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChildScores {
    pub m: usize,
    pub child1: f64,
    pub child2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem3Report {
    pub gradient: GradMatrix,
    pub leading: LeadingTermReport,
    /// Per row, `true` when the two largest-magnitude entries are the children.
    pub top_two_are_children: Vec<bool>,
    pub child_scores: Vec<ChildScores>,
    pub eval: EvalReport,
    pub weights: AttentionWeights,
}

impl Theorem3Report {
    pub fn min_child_score(&self) -> f64 {
        self.child_scores.iter().map(|c| c.child1.min(c.child2)).fold(f64::INFINITY, f64::min)
    }
}

fn top_two(grad: &GradMatrix, weights: &AttentionWeights, m: usize) -> (usize, usize) {
    let mut best: [(f64, usize); 2] = [(-1.0, 0), (-1.0, 0)];
    for &j in weights.mask().sources(m) {
        let g = grad.get(j, m).abs();
        if g > best[0].0 {
            best[1] = best[0];
            best[0] = (g, j);
        } else if g > best[1].0 {
            best[1] = (g, j);
        }
    }
    (best[0].1, best[1].1)
}

/// One teacher-forced gradient step from zero weights, then the child scores
/// and the error of the full chain on `n_fresh` fresh inputs.
pub fn theorem3_check(
    tree: &DecompositionTree,
    eta: f64,
    source: DataSource,
    noise: Option<OracleNoise>,
    n_fresh: usize,
    fresh_seed: u64,
) -> Result<Theorem3Report> {
    let link = LinkFunction::default();
    let layout = tree.layout();
    let data = ground_truth_labels(tree, &source.inputs(tree.d())?)?;
    let mut weights = AttentionWeights::zeros(&layout, MaskKind::TeacherForcingCausal);
    let gradient = backward(&forward_teacher(&data, &weights, &layout, &link)?, &data, &link, Objective::COT)?;
    let leading = leading_term_report(&gradient, tree, &link, MaskKind::TeacherForcingCausal);
    let top_two_are_children = (tree.d() + 1..=tree.width())
        .map(|m| {
            let (a, b) = tree.children(m).expect("internal node");
            let (x, y) = top_two(&gradient, &weights, m);
            (x == a && y == b) || (x == b && y == a)
        })
        .collect();
    let mut step = gradient.clone();
    if let Some(n) = noise {
        perturb(&mut step, &weights, n.epsilon, n.seed);
    }
    weights.step(&step, eta);
    let child_scores = (tree.d() + 1..=tree.width())
        .map(|m| {
            let (a, b) = tree.children(m).expect("internal node");
            let s = weights.row_scores(m)?;
            let get = |j: usize| s.iter().find(|p| p.0 == j).map_or(0.0, |p| p.1);
            Ok(ChildScores { m, child1: get(a), child2: get(b) })
        })
        .collect::<Result<Vec<_>>>()?;
    let fresh = sample_fresh(tree.d(), n_fresh, fresh_seed);
    let eval = evaluate(&weights, tree, &link, &FilterConfig::OFF, &fresh, None)?;
    Ok(Theorem3Report { gradient, leading, top_two_are_children, child_scores, eval, weights })
}

/// Picks the `eta0` whose level-wise leading updates `2 c eta0 d^2.5 / d_{l-1}^2`
/// stay farthest from half-integers, so rounding is never a coin flip.
pub fn calibrate_eta0(tree: &DecompositionTree, grid: &[f64]) -> f64 {
    let c = LinkFunction::default().constants().c;
    let d = tree.d();
    let margin = |eta0: f64| {
        (1..=tree.v())
            .map(|l| {
                let s = tree.level_bound(l - 1) as f64;
                let t = 2.0 * c * theorem_eta(d, eta0) / (s * s);
                (t - (libm::floor(t) + 0.5)).abs()
            })
            .fold(f64::INFINITY, f64::min)
    };
    grid.iter().copied().fold((f64::NAN, -1.0), |best, e| {
        let m = margin(e);
        if m > best.1 {
            (e, m)
        } else {
            best
        }
    })
    .0
}

/// First deviation from the staged integer pattern after update `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternViolation {
    pub t: usize,
    pub m: usize,
    pub j: usize,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub t: usize,
    /// Per level `1..=v`, the common child logit when the level is solved.
    pub level_constants: Vec<Option<f64>>,
    pub violation: Option<PatternViolation>,
    pub gates: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem4Report {
    pub eta: f64,
    pub stages: Vec<StageRecord>,
    pub eval: EvalReport,
    /// One more update after the last stage left every logit unchanged.
    pub stable: bool,
    pub weights: AttentionWeights,
}

impl Theorem4Report {
    pub fn pattern_holds(&self) -> bool {
        self.stages.iter().all(|s| s.violation.is_none())
    }
}

/// Checks rows level by level: solved levels `<= t` carry a common positive
/// integer on both children and zero elsewhere, later rows are all zero.
fn check_pattern(weights: &AttentionWeights, tree: &DecompositionTree, t: usize) -> (Vec<Option<f64>>, Option<PatternViolation>) {
    let mut constants = vec![None; tree.v()];
    for m in tree.d() + 1..=tree.width() {
        let level = tree.height(m);
        let children = tree.children(m).expect("internal node");
        for &j in weights.mask().sources(m) {
            let w = weights.get(j, m);
            let is_child = j == children.0 || j == children.1;
            let ok = if level <= t && is_child {
                let slot = &mut constants[level - 1];
                let c = *slot.get_or_insert(w);
                w == c && w > 0.0 && libm::round(w) == w
            } else {
                w == 0.0
            };
            if !ok {
                return (constants, Some(PatternViolation { t, m, j, w }));
            }
        }
    }
    (constants, None)
}

/// Runs `v` quantized updates of the unscaled chain-of-thought loss through
/// the generated chain with the level mask and a token filter, checking the
/// staged pattern after each, then one extra update for stability.
pub fn theorem4_check(
    tree: &DecompositionTree,
    eta0: f64,
    source: DataSource,
    n_prime: usize,
    epsilon0: f64,
    n_fresh: usize,
    seed: u64,
) -> Result<Theorem4Report> {
    let link = LinkFunction::default();
    let layout = tree.layout();
    let eta = theorem_eta(tree.d(), eta0);
    let data = ground_truth_labels(tree, &source.inputs(tree.d())?)?;
    let aug = crate::task::sample_augmented(tree.d(), n_prime, seed);
    let filter = FilterConfig::token(epsilon0);
    filter.validate()?;
    let mut weights = AttentionWeights::zeros(&layout, MaskKind::BlockLevel);
    let mut stages = Vec::with_capacity(tree.v());
    let update = |w: &AttentionWeights| -> Result<(AttentionWeights, Vec<bool>)> {
        let cache = forward_chain(&data.inputs_only(), Some(aug.tokens()), w, &layout, &link, &filter, None)?;
        let grad = backward(&cache, &data, &link, Objective::COT)?;
        let mut next = w.clone();
        next.step(&grad, eta);
        Ok((quantize(&next), cache.gates))
    };
    for t in 1..=tree.v() {
        let (next, gates) = update(&weights)?;
        weights = next;
        let (level_constants, violation) = check_pattern(&weights, tree, t);
        stages.push(StageRecord { t, level_constants, violation, gates });
    }
    let (again, _) = update(&weights)?;
    let stable = again == weights;
    let fresh = sample_fresh(tree.d(), n_fresh, seed);
    let eval = evaluate(&weights, tree, &link, &filter, &fresh, Some(aug.tokens()))?;
    Ok(Theorem4Report { eta, stages, eval, stable, weights })
}
