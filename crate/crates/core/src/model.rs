//! The one-layer transformer: positional attention masks, softmax scores,
//! the forward step, recursive chain generation, the self-consistency filter
//! and weight quantization.
//!
//! Keys and queries see only positions and the value map keeps only the data
//! component, so attention is a single logit matrix `W` indexed by
//! `(source j, target m)` and positional encodings never need materializing.
//! A generated node is
//!
//! ```text
//! z_m = sum_j softmax_j(w_m) x_j,     x_m = gate(level(m)) * phi(z_m)
//! ```

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::LinkFunction;

/// Levels of the generated nodes and their boundaries `d_0 < d_1 < ... < d_v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    d: usize,
    level: Vec<usize>,
    bounds: Vec<usize>,
}

impl Layout {
    pub(crate) fn new(d: usize, level: Vec<usize>, bounds: Vec<usize>) -> Self {
        debug_assert_eq!(bounds[0], d);
        debug_assert_eq!(*bounds.last().unwrap() + 1, level.len());
        Layout { d, level, bounds }
    }

    /// `generated` nodes after `d` inputs, each on its own level. Used for
    /// models that are not tied to a decomposition tree.
    pub fn chain(d: usize, generated: usize) -> Self {
        let width = d + generated;
        let mut level = vec![0; width + 1];
        for (l, m) in (d + 1..=width).enumerate() {
            level[m] = l + 1;
        }
        Layout { d, level, bounds: (d..=width).collect() }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn width(&self) -> usize {
        self.level.len() - 1
    }

    pub fn generated(&self) -> usize {
        self.width() - self.d
    }

    /// Number of generated levels `v`.
    pub fn levels(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn level(&self, m: usize) -> usize {
        self.level[m]
    }

    pub fn bound(&self, level: usize) -> usize {
        self.bounds[level]
    }

    pub fn level_nodes(&self, level: usize) -> core::ops::RangeInclusive<usize> {
        if level == 0 {
            1..=self.d
        } else {
            self.bounds[level - 1] + 1..=self.bounds[level]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Node `m` sees every earlier position `j < m`.
    TeacherForcingCausal,
    /// Node `m` sees positions up to the end of the previous level.
    BlockLevel,
}

/// Forbidden `(j, m)` pairs, i.e. logits fixed at `-inf`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    forbid: Vec<bool>,
    sources: Vec<Vec<usize>>,
}

impl Mask {
    fn from_predicate(width: usize, forbidden: impl Fn(usize, usize) -> bool) -> Self {
        let mut forbid = vec![true; width * width];
        let mut sources = vec![Vec::new(); width + 1];
        for m in 1..=width {
            for j in 1..=width {
                let f = forbidden(j, m);
                forbid[(m - 1) * width + (j - 1)] = f;
                if !f {
                    sources[m].push(j);
                }
            }
        }
        Mask { width, forbid, sources }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_forbidden(&self, j: usize, m: usize) -> bool {
        self.forbid[(m - 1) * self.width + (j - 1)]
    }

    /// Allowed sources of target `m`, ascending.
    pub fn sources(&self, m: usize) -> &[usize] {
        &self.sources[m]
    }
}

pub fn make_mask(layout: &Layout, kind: MaskKind) -> Mask {
    let d = layout.d();
    match kind {
        MaskKind::TeacherForcingCausal => Mask::from_predicate(layout.width(), |j, m| j >= m || m <= d),
        MaskKind::BlockLevel => Mask::from_predicate(layout.width(), |j, m| {
            m <= d || j > layout.bound(layout.level(m) - 1)
        }),
    }
}

/// Attention logits with their mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    kind: MaskKind,
    mask: Mask,
    // Row-major by target: logits[(m - 1) * width + (j - 1)].
    logits: Vec<f64>,
}

impl AttentionWeights {
    pub fn zeros(layout: &Layout, kind: MaskKind) -> Self {
        let mask = make_mask(layout, kind);
        let width = mask.width;
        AttentionWeights { kind, mask, logits: vec![0.0; width * width] }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    pub fn get(&self, j: usize, m: usize) -> f64 {
        self.logits[(m - 1) * self.width() + (j - 1)]
    }

    /// Panics when `(j, m)` is masked; masked logits never change.
    pub fn set(&mut self, j: usize, m: usize, w: f64) {
        assert!(!self.mask.is_forbidden(j, m), "logit ({j}, {m}) is masked");
        let width = self.width();
        self.logits[(m - 1) * width + (j - 1)] = w;
    }

    /// Unmasked entries as `(j, m, w)`, ordered by target then source.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (1..=self.width()).flat_map(move |m| self.mask.sources(m).iter().map(move |&j| (j, m, self.get(j, m))))
    }

    pub fn unmasked_count(&self) -> usize {
        (1..=self.width()).map(|m| self.mask.sources(m).len()).sum()
    }

    /// Softmax over the allowed sources of row `m`, as `(j, score)` pairs.
    pub fn row_scores(&self, m: usize) -> Result<Vec<(usize, f64)>> {
        let sources = self.mask.sources(m);
        if sources.is_empty() {
            return Err(Error::FullyMasked(m));
        }
        let max = sources.iter().map(|&j| self.get(j, m)).fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<(usize, f64)> =
            sources.iter().map(|&j| (j, libm::exp(self.get(j, m) - max))).collect();
        let total: f64 = out.iter().map(|p| p.1).sum();
        for p in &mut out {
            p.1 /= total;
        }
        Ok(out)
    }

    /// `w <- w - eta * grad` on unmasked entries.
    pub fn step(&mut self, grad: &crate::grad::GradMatrix, eta: f64) {
        for m in 1..=self.width() {
            for &j in self.mask.sources(m) {
                let w = self.get(j, m) - eta * grad.get(j, m);
                let width = self.width();
                self.logits[(m - 1) * width + (j - 1)] = w;
            }
        }
    }

    pub fn is_integral(&self) -> bool {
        self.entries().all(|(_, _, w)| libm::round(w) == w)
    }

    pub fn all_finite(&self) -> bool {
        self.entries().all(|(_, _, w)| w.is_finite())
    }
}

/// Softmax scores of row `m` as a dense vector of length `width` (index `j - 1`).
pub fn softmax_row(weights: &AttentionWeights, m: usize) -> Result<Vec<f64>> {
    let mut dense = vec![0.0; weights.width()];
    for (j, s) in weights.row_scores(m)? {
        dense[j - 1] = s;
    }
    Ok(dense)
}

/// Rounds every unmasked logit to the nearest integer, ties away from zero.
pub fn quantize(weights: &AttentionWeights) -> AttentionWeights {
    let mut out = weights.clone();
    for m in 1..=out.width() {
        for &j in out.mask.sources(m) {
            let width = out.width();
            let slot = &mut out.logits[(m - 1) * width + (j - 1)];
            *slot = libm::round(*slot);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FilterMode {
    Off,
    /// Zero a level when some previous-level augmented output is within
    /// `epsilon0` of the all `-1` vector in sup norm.
    TokenThreshold { epsilon0: f64 },
    /// Zero a level unless every row of the previous level has a softmax
    /// score above `tau`.
    WeightThreshold { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub mode: FilterMode,
    /// Once a level's filter deactivates during training it stays off.
    #[serde(default)]
    pub latch: bool,
}

impl FilterConfig {
    pub const OFF: FilterConfig = FilterConfig { mode: FilterMode::Off, latch: false };

    pub fn token(epsilon0: f64) -> Self {
        FilterConfig { mode: FilterMode::TokenThreshold { epsilon0 }, latch: false }
    }

    pub fn weight(tau: f64) -> Self {
        FilterConfig { mode: FilterMode::WeightThreshold { tau }, latch: false }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            FilterMode::Off => Ok(()),
            FilterMode::TokenThreshold { epsilon0 } if epsilon0 > 0.0 && epsilon0 < 2.0 => Ok(()),
            FilterMode::WeightThreshold { tau } if tau > 0.0 && tau < 1.0 => Ok(()),
            _ => Err(Error::InvalidConfig("filter threshold out of range".into())),
        }
    }

    pub fn is_off(&self) -> bool {
        matches!(self.mode, FilterMode::Off)
    }
}

/// Gate state per level, index 0 (the inputs) always open.
fn weight_gates(weights: &AttentionWeights, layout: &Layout, tau: f64) -> Result<Vec<bool>> {
    let mut open = vec![true; layout.levels() + 1];
    for level in 2..=layout.levels() {
        let mut solved = open[level - 1];
        for m in layout.level_nodes(level - 1) {
            if !solved {
                break;
            }
            solved = weights.row_scores(m)?.iter().any(|&(_, s)| s > tau);
        }
        open[level] = solved;
    }
    Ok(open)
}

/// True when the column carries information: it has been written and
/// `|| u + 1 ||_inf >= epsilon0`.
fn informative(tokens: &TokenMatrix, j: usize, epsilon0: f64) -> bool {
    tokens.is_set(j) && tokens.column(j).iter().map(|u| (u + 1.0).abs()).fold(0.0, f64::max) >= epsilon0
}

fn level_informative(tokens: &TokenMatrix, layout: &Layout, level: usize, epsilon0: f64) -> bool {
    layout.level_nodes(level).all(|j| informative(tokens, j, epsilon0))
}

use crate::task::TokenMatrix;

fn check_inputs(tokens: &TokenMatrix, d: usize) -> Result<()> {
    match (1..=d).find(|&j| !tokens.is_set(j)) {
        Some(j) => Err(Error::UnsetColumn(j)),
        None => Ok(()),
    }
}

fn check_width(tokens: &TokenMatrix, layout: &Layout) -> Result<()> {
    if tokens.d() != layout.d() || tokens.width() < layout.d() {
        return Err(Error::LengthMismatch(tokens.d(), layout.d()));
    }
    Ok(())
}

/// Dummy tokens for generated positions start unset and zero.
fn start_tokens(inputs: &TokenMatrix, layout: &Layout) -> TokenMatrix {
    let mut t = inputs.with_width(layout.width());
    for m in layout.d() + 1..=layout.width() {
        t.clear_column(m);
    }
    t
}

#[inline]
fn mix_into(acc: &mut [f64], src: &[f64], s: f64) {
    for (a, x) in acc.iter_mut().zip(src) {
        *a += s * x;
    }
}

/// Result of one parallel application of the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Pre-activations `z_m` in the generated columns.
    pub pre_activation: TokenMatrix,
    pub tokens: TokenMatrix,
    pub augmented: Option<TokenMatrix>,
}

/// One application of the layer to the current tokens: every generated node is
/// recomputed from the values the previous step left behind.
///
/// The token filter is re-evaluated from the current previous-level augmented
/// columns (or the main tokens when no augmentation is supplied). A cleared
/// column counts as uninformative.
pub fn forward_step(
    tokens: &TokenMatrix,
    augmented: Option<&TokenMatrix>,
    weights: &AttentionWeights,
    layout: &Layout,
    link: &LinkFunction,
    filter: &FilterConfig,
) -> Result<StepOutput> {
    check_width(tokens, layout)?;
    check_inputs(tokens, layout.d())?;
    let tokens = tokens.with_width(layout.width());
    let aug_in = match augmented {
        Some(a) => {
            check_inputs(a, layout.d())?;
            Some(a.with_width(layout.width()))
        }
        None => None,
    };
    let gates: Vec<bool> = match filter.mode {
        FilterMode::Off => vec![true; layout.levels() + 1],
        FilterMode::WeightThreshold { tau } => weight_gates(weights, layout, tau)?,
        FilterMode::TokenThreshold { epsilon0 } => {
            let reference = aug_in.as_ref().unwrap_or(&tokens);
            (0..=layout.levels())
                .map(|l| l == 0 || level_informative(reference, layout, l - 1, epsilon0))
                .collect()
        }
    };
    let mut pre = TokenMatrix::zeros(tokens.n(), layout.d(), layout.width());
    let mut next = tokens.clone();
    let mut next_aug = aug_in.clone();
    for m in layout.d() + 1..=layout.width() {
        let scores = weights.row_scores(m)?;
        let open = gates[layout.level(m)];
        let mut z = vec![0.0; tokens.n()];
        for &(j, s) in &scores {
            mix_into(&mut z, tokens.column(j), s);
        }
        pre.write_column(m, &z);
        if open {
            let x: Vec<f64> = z.iter().map(|&t| link.value(t)).collect();
            next.write_column(m, &x);
        } else {
            next.clear_column(m);
        }
        if let (Some(src), Some(dst)) = (aug_in.as_ref(), next_aug.as_mut()) {
            if open {
                let mut z = vec![0.0; src.n()];
                for &(j, s) in &scores {
                    mix_into(&mut z, src.column(j), s);
                }
                let x: Vec<f64> = z.iter().map(|&t| link.value(t)).collect();
                dst.write_column(m, &x);
            } else {
                dst.clear_column(m);
            }
        }
    }
    Ok(StepOutput { pre_activation: pre, tokens: next, augmented: next_aug })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub tokens: TokenMatrix,
    pub augmented: Option<TokenMatrix>,
    /// Steps that changed at least one token before the fixed point.
    pub steps: usize,
}

/// Applies [`forward_step`] to its own output, starting from zero dummies,
/// until nothing changes or `max_steps` is reached.
pub fn generate_chain(
    inputs: &TokenMatrix,
    augmented: Option<&TokenMatrix>,
    weights: &AttentionWeights,
    layout: &Layout,
    link: &LinkFunction,
    filter: &FilterConfig,
    max_steps: usize,
) -> Result<ChainOutput> {
    check_width(inputs, layout)?;
    let mut tokens = start_tokens(inputs, layout);
    let mut aug = augmented.map(|a| start_tokens(a, layout));
    let mut steps = 0;
    while steps < max_steps {
        let out = forward_step(&tokens, aug.as_ref(), weights, layout, link, filter)?;
        if out.tokens == tokens && out.augmented == aug {
            break;
        }
        tokens = out.tokens;
        aug = out.augmented;
        steps += 1;
    }
    Ok(ChainOutput { tokens, augmented: aug, steps })
}

/// Everything a backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ChainCache {
    /// Sources were ground-truth labels rather than generated tokens.
    pub teacher: bool,
    pub(crate) scores: Vec<Vec<(usize, f64)>>,
    pub(crate) z: Vec<f64>,
    /// Inputs followed by the generated (or teacher-forced predicted) tokens.
    pub out: TokenMatrix,
    /// Whether each generated node passed its filter.
    pub(crate) open: Vec<bool>,
    /// Gate state per level, index 0 unused.
    pub gates: Vec<bool>,
    pub augmented: Option<TokenMatrix>,
}

impl ChainCache {
    pub fn n(&self) -> usize {
        self.out.n()
    }

    pub fn prediction(&self) -> &[f64] {
        self.out.column(self.out.width())
    }

    pub fn pre_activation(&self, m: usize) -> &[f64] {
        let n = self.n();
        let g = m - self.out.d() - 1;
        &self.z[g * n..(g + 1) * n]
    }

    pub fn scores(&self, m: usize) -> &[(usize, f64)] {
        &self.scores[m - self.out.d() - 1]
    }

    pub fn is_open(&self, m: usize) -> bool {
        self.open[m - self.out.d() - 1]
    }
}

/// Fixed point of [`generate_chain`], computed directly by visiting the
/// generated nodes in index order. Every mask only lets a node read earlier
/// positions, so one sweep reaches the fixed point.
///
/// `forced_open` marks levels whose filter has latched off.
pub fn forward_chain(
    inputs: &TokenMatrix,
    augmented: Option<&TokenMatrix>,
    weights: &AttentionWeights,
    layout: &Layout,
    link: &LinkFunction,
    filter: &FilterConfig,
    forced_open: Option<&[bool]>,
) -> Result<ChainCache> {
    check_width(inputs, layout)?;
    check_inputs(inputs, layout.d())?;
    let n = inputs.n();
    let d = layout.d();
    let levels = layout.levels();
    let mut out = start_tokens(inputs, layout);
    let mut aug = match augmented {
        Some(a) => {
            check_inputs(a, d)?;
            Some(start_tokens(a, layout))
        }
        None => None,
    };
    let mut gates = vec![true; levels + 1];
    if let FilterMode::WeightThreshold { tau } = filter.mode {
        gates = weight_gates(weights, layout, tau)?;
    }
    let mut scores = Vec::with_capacity(layout.generated());
    let mut z_all = vec![0.0; n * layout.generated()];
    let mut open_nodes = Vec::with_capacity(layout.generated());
    for m in d + 1..=layout.width() {
        let level = layout.level(m);
        if m == layout.bound(level - 1) + 1 {
            if let FilterMode::TokenThreshold { epsilon0 } = filter.mode {
                let reference = aug.as_ref().unwrap_or(&out);
                gates[level] = gates[level - 1] && level_informative(reference, layout, level - 1, epsilon0);
            }
            if let Some(forced) = forced_open {
                gates[level] |= forced.get(level).copied().unwrap_or(false);
            }
        }
        let open = gates[level];
        let row = weights.row_scores(m)?;
        let g = m - d - 1;
        let z = &mut z_all[g * n..(g + 1) * n];
        for &(j, s) in &row {
            mix_into(z, out.column(j), s);
        }
        if open {
            let x: Vec<f64> = z.iter().map(|&t| link.value(t)).collect();
            out.write_column(m, &x);
        } else {
            out.clear_column(m);
        }
        if let Some(a) = aug.as_mut() {
            if open {
                let mut za = vec![0.0; a.n()];
                for &(j, s) in &row {
                    mix_into(&mut za, a.column(j), s);
                }
                let x: Vec<f64> = za.iter().map(|&t| link.value(t)).collect();
                a.write_column(m, &x);
            } else {
                a.clear_column(m);
            }
        }
        scores.push(row);
        open_nodes.push(open);
    }
    Ok(ChainCache { teacher: false, scores, z: z_all, out, open: open_nodes, gates, augmented: aug })
}

/// Teacher-forced pass: every node reads the ground-truth labels of its sources.
pub fn forward_teacher(
    labels: &TokenMatrix,
    weights: &AttentionWeights,
    layout: &Layout,
    link: &LinkFunction,
) -> Result<ChainCache> {
    check_width(labels, layout)?;
    if labels.width() < layout.width() {
        return Err(Error::MissingLabels(labels.width() + 1));
    }
    if let Some(j) = (1..=layout.width()).find(|&j| !labels.is_set(j)) {
        return Err(Error::MissingLabels(j));
    }
    let n = labels.n();
    let d = layout.d();
    let mut out = start_tokens(labels, layout);
    let mut scores = Vec::with_capacity(layout.generated());
    let mut z_all = vec![0.0; n * layout.generated()];
    for m in d + 1..=layout.width() {
        let row = weights.row_scores(m)?;
        let g = m - d - 1;
        let z = &mut z_all[g * n..(g + 1) * n];
        for &(j, s) in &row {
            mix_into(z, labels.column(j), s);
        }
        let x: Vec<f64> = z.iter().map(|&t| link.value(t)).collect();
        out.write_column(m, &x);
        scores.push(row);
    }
    Ok(ChainCache {
        teacher: true,
        scores,
        z: z_all,
        out,
        open: vec![true; layout.generated()],
        gates: vec![true; layout.levels() + 1],
        augmented: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{build_instance, build_tree, ground_truth_labels, sample_augmented, sample_inputs, TargetSource};

    fn figure_tree() -> crate::task::DecompositionTree {
        build_tree(&build_instance(16, 8, TargetSource::Explicit(vec![1, 4, 6, 7, 8, 12, 13, 15])).unwrap())
    }

    #[test]
    fn masks() {
        let layout = figure_tree().layout();
        let causal = make_mask(&layout, MaskKind::TeacherForcingCausal);
        assert_eq!(causal.sources(17), (1..=16).collect::<Vec<_>>().as_slice());
        assert_eq!(causal.sources(23), (1..=22).collect::<Vec<_>>().as_slice());
        let block = make_mask(&layout, MaskKind::BlockLevel);
        assert_eq!(block.sources(21), (1..=20).collect::<Vec<_>>().as_slice());
        assert_eq!(block.sources(20), (1..=16).collect::<Vec<_>>().as_slice());
        assert_eq!(block.sources(23), (1..=22).collect::<Vec<_>>().as_slice());
        for mask in [&causal, &block] {
            for m in 1..=16 {
                assert!(mask.sources(m).is_empty());
            }
        }
    }

    #[test]
    fn softmax_rows() {
        let layout = figure_tree().layout();
        let mut w = AttentionWeights::zeros(&layout, MaskKind::TeacherForcingCausal);
        let s = softmax_row(&w, 17).unwrap();
        assert!(s[..16].iter().all(|&x| (x - 1.0 / 16.0).abs() < 1e-15));
        assert!(s[16..].iter().all(|&x| x == 0.0));
        assert_eq!(softmax_row(&w, 3), Err(Error::FullyMasked(3)));
        w.set(5, 17, 40.0);
        let s = softmax_row(&w, 17).unwrap();
        assert!(s[4] >= 1.0 - 16.0 * libm::exp(-40.0));
        w.set(2, 17, 1000.0);
        let s = softmax_row(&w, 17).unwrap();
        assert!(s.iter().all(|x| x.is_finite()));
        assert!((s[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    #[should_panic]
    fn masked_logits_cannot_be_written() {
        let layout = figure_tree().layout();
        let mut w = AttentionWeights::zeros(&layout, MaskKind::BlockLevel);
        w.set(18, 21, 1.0);
        w.set(19, 20, 1.0);
    }

    #[test]
    fn quantization() {
        let layout = Layout::chain(2, 3);
        let mut w = AttentionWeights::zeros(&layout, MaskKind::TeacherForcingCausal);
        let vals = [(1, 3, 2.4, 2.0), (2, 3, -0.4, 0.0), (1, 4, 0.5, 1.0), (2, 4, -0.5, -1.0), (3, 4, 2.5, 3.0), (1, 5, -1.5, -2.0)];
        for &(j, m, x, _) in &vals {
            w.set(j, m, x);
        }
        let q = quantize(&w);
        for &(j, m, _, want) in &vals {
            assert_eq!(q.get(j, m), want);
        }
        assert_eq!(quantize(&q), q);
        assert!(q.is_integral());
    }

    #[test]
    fn uniform_step_is_mean_of_sources() {
        let tree = figure_tree();
        let layout = tree.layout();
        let link = LinkFunction::default();
        let x = ground_truth_labels(&tree, &sample_inputs(16, 64, 1)).unwrap();
        let w = AttentionWeights::zeros(&layout, MaskKind::TeacherForcingCausal);
        let cache = forward_teacher(&x, &w, &layout, &link).unwrap();
        for m in 17..=23 {
            for i in 0..64 {
                let mean = (1..m).map(|j| x.get(i, j)).sum::<f64>() / (m - 1) as f64;
                assert!((cache.pre_activation(m)[i] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn child_average_reproduces_parity() {
        let tree = figure_tree();
        let layout = tree.layout();
        let link = LinkFunction::default();
        let x = ground_truth_labels(&tree, &sample_inputs(16, 64, 2)).unwrap();
        let mut w = AttentionWeights::zeros(&layout, MaskKind::TeacherForcingCausal);
        // Children at +inf relative to everything else: exactly half each.
        for m in 17..=23 {
            for &j in w.mask().sources(m).to_vec().iter() {
                w.set(j, m, -1e4);
            }
            let (a, b) = tree.children(m).unwrap();
            w.set(a, m, 0.0);
            w.set(b, m, 0.0);
        }
        let cache = forward_teacher(&x, &w, &layout, &link).unwrap();
        for m in 17..=23 {
            assert_eq!(cache.out.column(m), x.column(m));
        }
    }

    #[test]
    fn chain_reaches_fixed_point_in_expected_steps() {
        let tree = figure_tree();
        let layout = tree.layout();
        let link = LinkFunction::default();
        let x = sample_inputs(16, 32, 3);
        let mut w = AttentionWeights::zeros(&layout, MaskKind::TeacherForcingCausal);
        for (idx, (j, m, _)) in w.clone().entries().enumerate() {
            w.set(j, m, ((idx * 37 % 11) as f64 - 5.0) * 0.3);
        }
        let chain = generate_chain(&x, None, &w, &layout, &link, &FilterConfig::OFF, 100).unwrap();
        assert!(chain.steps <= 7);
        let again = forward_step(&chain.tokens, None, &w, &layout, &link, &FilterConfig::OFF).unwrap();
        assert_eq!(again.tokens, chain.tokens);
        let direct = forward_chain(&x, None, &w, &layout, &link, &FilterConfig::OFF, None).unwrap();
        assert_eq!(direct.out, chain.tokens);

        let wb = AttentionWeights::zeros(&layout, MaskKind::BlockLevel);
        let chain = generate_chain(&x, None, &wb, &layout, &link, &FilterConfig::OFF, 100).unwrap();
        assert!(chain.steps <= 3);
        for m in 17..=20 {
            for i in 0..32 {
                let mean = (1..=16).map(|j| x.get(i, j)).sum::<f64>() / 16.0;
                assert_eq!(chain.tokens.get(i, m), link.value(mean));
            }
        }
    }

    #[test]
    fn token_filter_zeroes_uninformative_levels() {
        let tree = figure_tree();
        let layout = tree.layout();
        let link = LinkFunction::default();
        let x = sample_inputs(16, 32, 4);
        // Augmented strings with balanced bits keep level-1 means at zero, so
        // level-1 augmented outputs are exactly -1.
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..16).map(|j| if (i + j) % 2 == 0 { 1.0 } else { -1.0 }).collect())
            .collect();
        let aug = TokenMatrix::from_rows(16, 16, &rows);
        let w = AttentionWeights::zeros(&layout, MaskKind::BlockLevel);
        let filter = FilterConfig::token(0.5);
        let cache = forward_chain(&x, Some(&aug), &w, &layout, &link, &filter, None).unwrap();
        assert_eq!(cache.gates, vec![true, true, false, false]);
        for m in 21..=23 {
            assert!(cache.out.column(m).iter().all(|&v| v == 0.0));
            assert!(!cache.out.is_set(m));
        }
        let chain = generate_chain(&x, Some(&aug), &w, &layout, &link, &filter, 10).unwrap();
        assert_eq!(chain.tokens, cache.out);
        let latched = forward_chain(&x, Some(&aug), &w, &layout, &link, &filter, Some(&[false, false, true, false])).unwrap();
        assert_eq!(latched.gates, vec![true, true, true, false]);
    }

    #[test]
    fn weight_filter_follows_scores() {
        let tree = figure_tree();
        let layout = tree.layout();
        let mut w = AttentionWeights::zeros(&layout, MaskKind::BlockLevel);
        let filter = FilterConfig::weight(0.4);
        let gates = weight_gates(&w, &layout, 0.4).unwrap();
        assert_eq!(gates, vec![true, true, false, false]);
        for m in 17..=20 {
            let (a, _) = tree.children(m).unwrap();
            w.set(a, m, 10.0);
        }
        assert_eq!(weight_gates(&w, &layout, 0.4).unwrap(), vec![true, true, true, false]);
        let x = sample_inputs(16, 8, 1);
        let aug = sample_augmented(16, 8, 1);
        let c = forward_chain(&x, Some(aug.tokens()), &w, &layout, &LinkFunction::default(), &filter, None).unwrap();
        assert!(c.out.is_set(21) && !c.out.is_set(23));
    }

    #[test]
    fn unset_input_is_rejected() {
        let layout = Layout::chain(3, 2);
        let mut x = sample_inputs(3, 4, 1);
        x.clear_column(2);
        let w = AttentionWeights::zeros(&layout, MaskKind::TeacherForcingCausal);
        let r = forward_step(&x, None, &w, &layout, &LinkFunction::default(), &FilterConfig::OFF);
        assert_eq!(r.unwrap_err(), Error::UnsetColumn(2));
    }
}
