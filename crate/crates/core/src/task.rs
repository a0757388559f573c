//! Parity instances, their binary-tree decomposition and token data.

use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Layout;
use crate::rng::{self, Stream};

/// A k-parity problem over d input bits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParityInstance {
    pub d: usize,
    pub k: usize,
    /// Tree height, `k = 2^v`.
    pub v: usize,
    /// Strictly increasing 1-based input indices.
    pub target: Vec<usize>,
    /// Seed the target was drawn with, if it was drawn.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetSource {
    Explicit(Vec<usize>),
    Seeded(u64),
}

fn tree_height(d: usize, k: usize) -> Result<usize> {
    if k < 2 || k > d {
        return Err(Error::InvalidSize { d, k });
    }
    if !k.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(k));
    }
    Ok(k.trailing_zeros() as usize)
}

/// Validates `(d, k)` and produces the target subset, either as given or
/// drawn uniformly from all size-k subsets.
pub fn build_instance(d: usize, k: usize, source: TargetSource) -> Result<ParityInstance> {
    let v = tree_height(d, k)?;
    let (target, seed) = match source {
        TargetSource::Explicit(list) => {
            if list.len() != k {
                return Err(Error::WrongTargetCount { expected: k, got: list.len() });
            }
            let mut sorted = list;
            sorted.sort_unstable();
            for (i, &j) in sorted.iter().enumerate() {
                if j == 0 || j > d {
                    return Err(Error::IndexOutOfRange { index: j, d });
                }
                if i > 0 && sorted[i - 1] == j {
                    return Err(Error::DuplicateIndex(j));
                }
            }
            (sorted, None)
        }
        TargetSource::Seeded(seed) => (random_subset(d, k, seed, Stream::Target), Some(seed)),
    };
    Ok(ParityInstance { d, k, v, target, seed })
}

/// Uniform size-k subset of `1..=d`, sorted.
pub(crate) fn random_subset(d: usize, k: usize, seed: u64, stream: Stream) -> Vec<usize> {
    let mut rng = rng::stream(seed, stream);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, d, k)
        .into_iter()
        .map(|j| j + 1)
        .collect();
    picked.sort_unstable();
    picked
}

/// Complete binary tree whose leaves are the target bits and whose internal
/// nodes `d+1..=d+k-1` are 2-parities of their children.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecompositionTree {
    pub instance: ParityInstance,
    // All per-node tables are indexed by the 1-based node label; slot 0 is unused.
    child1: Vec<usize>,
    child2: Vec<usize>,
    parent: Vec<Option<usize>>,
    height: Vec<usize>,
    level_bound: Vec<usize>,
    support: Vec<Vec<u64>>,
}

/// Lays the leaves out in ascending index order and labels internal nodes
/// level by level, left to right.
pub fn build_tree(instance: &ParityInstance) -> DecompositionTree {
    let d = instance.d;
    let width = d + instance.k - 1;
    let words = d.div_ceil(64);
    let mut child1 = vec![0; width + 1];
    let mut child2 = vec![0; width + 1];
    let mut parent = vec![None; width + 1];
    let mut height = vec![0; width + 1];
    let mut support = vec![vec![0u64; words]; width + 1];
    for j in 1..=d {
        support[j][(j - 1) / 64] |= 1 << ((j - 1) % 64);
    }
    let mut level_bound = vec![d];
    let mut previous = instance.target.clone();
    let mut next_label = d + 1;
    for level in 1..=instance.v {
        let mut current = Vec::with_capacity(previous.len() / 2);
        for pair in previous.chunks_exact(2) {
            let m = next_label;
            next_label += 1;
            child1[m] = pair[0];
            child2[m] = pair[1];
            parent[pair[0]] = Some(m);
            parent[pair[1]] = Some(m);
            height[m] = level;
            let mut s = support[pair[0]].clone();
            for (w, o) in s.iter_mut().zip(&support[pair[1]]) {
                *w ^= o;
            }
            support[m] = s;
            current.push(m);
        }
        level_bound.push(next_label - 1);
        previous = current;
    }
    DecompositionTree {
        instance: instance.clone(),
        child1,
        child2,
        parent,
        height,
        level_bound,
        support,
    }
}

impl DecompositionTree {
    pub fn d(&self) -> usize {
        self.instance.d
    }

    pub fn k(&self) -> usize {
        self.instance.k
    }

    pub fn v(&self) -> usize {
        self.instance.v
    }

    /// Total token count `d + k - 1`.
    pub fn width(&self) -> usize {
        self.instance.d + self.instance.k - 1
    }

    pub fn top(&self) -> usize {
        self.width()
    }

    pub fn is_internal(&self, m: usize) -> bool {
        m > self.d() && m <= self.width()
    }

    /// `(c1[m], c2[m])` for internal nodes.
    pub fn children(&self, m: usize) -> Option<(usize, usize)> {
        self.is_internal(m).then(|| (self.child1[m], self.child2[m]))
    }

    pub fn parent(&self, m: usize) -> Option<usize> {
        self.parent.get(m).copied().flatten()
    }

    /// Level of a node; every input bit (target or not) sits on level 0.
    pub fn height(&self, m: usize) -> usize {
        self.height[m]
    }

    /// `d_l`, the largest index on level `l`.
    pub fn level_bound(&self, level: usize) -> usize {
        self.level_bound[level]
    }

    pub fn level_bounds(&self) -> &[usize] {
        &self.level_bound
    }

    pub fn level_nodes(&self, level: usize) -> core::ops::RangeInclusive<usize> {
        if level == 0 {
            1..=self.d()
        } else {
            self.level_bound[level - 1] + 1..=self.level_bound[level]
        }
    }

    /// Input bits whose product a node computes, as a packed bitset over `1..=d`.
    pub fn support(&self, m: usize) -> &[u64] {
        &self.support[m]
    }

    /// Leaves reached by recursively expanding a node through its children.
    pub fn expand(&self, m: usize) -> Vec<usize> {
        if !self.is_internal(m) {
            return vec![m];
        }
        let mut out = self.expand(self.child1[m]);
        out.extend(self.expand(self.child2[m]));
        out
    }

    pub fn layout(&self) -> Layout {
        let mut level = vec![0; self.width() + 1];
        level[self.d() + 1..].copy_from_slice(&self.height[self.d() + 1..]);
        Layout::new(self.d(), level, self.level_bound.clone())
    }
}

/// Product of the target bits of one input row.
pub fn target_parity(instance: &ParityInstance, row: impl Fn(usize) -> f64) -> f64 {
    instance.target.iter().map(|&j| row(j)).product()
}

/// Token columns for `n` samples, stored column-major.
///
/// Columns are addressed by 1-based node index. Unset columns are the zero
/// dummy tokens that a chain has not yet written (or that a filter cleared).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    n: usize,
    d: usize,
    width: usize,
    data: Vec<f64>,
    set: Vec<bool>,
}

impl TokenMatrix {
    pub fn zeros(n: usize, d: usize, width: usize) -> Self {
        assert!(width >= d, "token width {width} smaller than input count {d}");
        TokenMatrix { n, d, width, data: vec![0.0; n * width], set: vec![false; width] }
    }

    /// Builds a matrix from per-row input bits; all other columns unset.
    pub fn from_rows(d: usize, width: usize, rows: &[Vec<f64>]) -> Self {
        let mut m = TokenMatrix::zeros(rows.len(), d, width);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), d);
            for (j, &x) in row.iter().enumerate() {
                m.data[j * m.n + i] = x;
            }
        }
        for j in 1..=d {
            m.set[j - 1] = true;
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[(j - 1) * self.n..j * self.n]
    }

    pub fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[(j - 1) * self.n..j * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[(j - 1) * self.n + i]
    }

    pub fn is_set(&self, j: usize) -> bool {
        self.set[j - 1]
    }

    pub fn set_flags(&self) -> &[bool] {
        &self.set
    }

    pub fn mark(&mut self, j: usize, set: bool) {
        self.set[j - 1] = set;
    }

    /// Writes a column and marks it set.
    pub fn write_column(&mut self, j: usize, values: &[f64]) {
        self.column_mut(j).copy_from_slice(values);
        self.set[j - 1] = true;
    }

    /// Zeroes a column and marks it unset.
    pub fn clear_column(&mut self, j: usize) {
        self.column_mut(j).fill(0.0);
        self.set[j - 1] = false;
    }

    /// Same samples, new width; extra columns unset, surplus columns dropped.
    pub fn with_width(&self, width: usize) -> TokenMatrix {
        let mut out = TokenMatrix::zeros(self.n, self.d, width);
        let keep = width.min(self.width);
        out.data[..keep * self.n].copy_from_slice(&self.data[..keep * self.n]);
        out.set[..keep].copy_from_slice(&self.set[..keep]);
        out
    }

    /// Keeps only the input columns.
    pub fn inputs_only(&self) -> TokenMatrix {
        let mut out = self.clone();
        for j in self.d + 1..=self.width {
            out.clear_column(j);
        }
        out
    }

    /// Single-sample view of row `i`.
    pub fn row(&self, i: usize) -> TokenMatrix {
        let mut out = TokenMatrix::zeros(1, self.d, self.width);
        for j in 1..=self.width {
            out.data[j - 1] = self.get(i, j);
        }
        out.set.copy_from_slice(&self.set);
        out
    }

    pub fn row_values(&self, i: usize) -> Vec<f64> {
        (1..=self.width).map(|j| self.get(i, j)).collect()
    }
}

/// Unlabeled augmentation strings used by the self-consistency filter.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTokens(pub TokenMatrix);

impl AugmentedTokens {
    pub fn n_prime(&self) -> usize {
        self.0.n()
    }

    pub fn tokens(&self) -> &TokenMatrix {
        &self.0
    }
}

/// `n` i.i.d. uniform ±1 strings of length `d` drawn from the given stream.
pub fn sample_pm1(d: usize, n: usize, seed: u64, stream: Stream) -> TokenMatrix {
    let mut rng = rng::stream(seed, stream);
    let mut m = TokenMatrix::zeros(n, d, d);
    let mut bits = 0u64;
    let mut left = 0u32;
    for i in 0..n {
        for j in 0..d {
            if left == 0 {
                bits = rng.next_u64();
                left = 64;
            }
            m.data[j * n + i] = if bits & 1 == 1 { 1.0 } else { -1.0 };
            bits >>= 1;
            left -= 1;
        }
    }
    m.set.fill(true);
    m
}

pub fn sample_inputs(d: usize, n: usize, seed: u64) -> TokenMatrix {
    sample_pm1(d, n, seed, Stream::Inputs)
}

/// Fresh evaluation inputs, drawn from a stream disjoint from training data.
pub fn sample_fresh(d: usize, n: usize, seed: u64) -> TokenMatrix {
    sample_pm1(d, n, seed, Stream::Fresh)
}

pub fn sample_augmented(d: usize, n_prime: usize, seed: u64) -> AugmentedTokens {
    AugmentedTokens(sample_pm1(d, n_prime, seed, Stream::Augment))
}

/// All `2^d` inputs, row `i` holding the bits of `i` (bit `j-1` set means `x_j = -1`).
pub fn enumerate_inputs(d: usize) -> TokenMatrix {
    assert!(d <= 24, "full enumeration is limited to d <= 24");
    let n = 1usize << d;
    let mut m = TokenMatrix::zeros(n, d, d);
    for j in 0..d {
        let col = &mut m.data[j * n..(j + 1) * n];
        for (i, x) in col.iter_mut().enumerate() {
            *x = if (i >> j) & 1 == 1 { -1.0 } else { 1.0 };
        }
    }
    m.set.fill(true);
    m
}

/// Fills every internal column with the product of its children.
pub fn ground_truth_labels(tree: &DecompositionTree, inputs: &TokenMatrix) -> Result<TokenMatrix> {
    let d = tree.d();
    for j in 1..=d {
        if !inputs.is_set(j) {
            return Err(Error::UnsetColumn(j));
        }
    }
    let mut out = inputs.with_width(tree.width());
    let n = out.n();
    for m in d + 1..=tree.width() {
        let (a, b) = tree.children(m).expect("internal node");
        let mut col = vec![0.0; n];
        for (i, x) in col.iter_mut().enumerate() {
            *x = out.get(i, a) * out.get(i, b);
        }
        out.write_column(m, &col);
    }
    Ok(out)
}

/// Labels for an augmented set, which are never used in a loss but are the
/// reference values for the augmentation concentration check.
pub fn augmented_with_labels(tree: &DecompositionTree, aug: &AugmentedTokens) -> Result<TokenMatrix> {
    ground_truth_labels(tree, aug.tokens())
}

/// True when the product of the given nodes is identically one, i.e. every
/// underlying input bit occurs an even number of times.
///
/// Panics if an index is outside `1..=d+k-1`.
pub fn is_trivial(indices: &[usize], tree: &DecompositionTree) -> bool {
    let words = tree.d().div_ceil(64);
    let mut acc = vec![0u64; words];
    for &j in indices {
        assert!(j >= 1 && j <= tree.width(), "node index {j} out of range");
        for (a, s) in acc.iter_mut().zip(tree.support(j)) {
            *a ^= s;
        }
    }
    acc.iter().all(|&w| w == 0)
}

/// Multilinear contraction `sum_i prod_r z_{r,i}`.
pub fn contraction(columns: &[&[f64]]) -> Result<f64> {
    let Some(first) = columns.first() else {
        return Ok(0.0);
    };
    let n = first.len();
    for c in columns {
        if c.len() != n {
            return Err(Error::LengthMismatch(n, c.len()));
        }
    }
    Ok((0..n).map(|i| columns.iter().map(|c| c[i]).product::<f64>()).sum())
}

/// Uniform deviation level for nontrivial interaction terms of order at most
/// four: `sqrt((2/n) log(32 d^4 / p))`.
pub fn kappa(n: usize, p: f64, d: usize) -> f64 {
    let d = d as f64;
    libm::sqrt(2.0 / n as f64 * libm::log(32.0 * d * d * d * d / p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn figure_tree() -> DecompositionTree {
        let inst =
            build_instance(16, 8, TargetSource::Explicit(vec![1, 4, 6, 7, 8, 12, 13, 15])).unwrap();
        build_tree(&inst)
    }

    #[test]
    fn instance_validation() {
        let inst = build_instance(16, 8, TargetSource::Explicit(vec![15, 1, 4, 6, 7, 8, 12, 13])).unwrap();
        assert_eq!(inst.v, 3);
        assert_eq!(inst.target, vec![1, 4, 6, 7, 8, 12, 13, 15]);
        let small = build_instance(2, 2, TargetSource::Explicit(vec![1, 2])).unwrap();
        assert_eq!(small.v, 1);
        assert_eq!(build_instance(16, 6, TargetSource::Seeded(1)), Err(Error::NotPowerOfTwo(6)));
        assert!(matches!(build_instance(4, 8, TargetSource::Seeded(1)), Err(Error::InvalidSize { .. })));
        assert!(matches!(build_instance(4, 1, TargetSource::Seeded(1)), Err(Error::InvalidSize { .. })));
        assert_eq!(
            build_instance(4, 2, TargetSource::Explicit(vec![2, 2])),
            Err(Error::DuplicateIndex(2))
        );
        assert!(matches!(
            build_instance(4, 2, TargetSource::Explicit(vec![0, 2])),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            build_instance(4, 2, TargetSource::Explicit(vec![1, 5])),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn seeded_instances_are_reproducible() {
        let a = build_instance(64, 32, TargetSource::Seeded(3)).unwrap();
        let b = build_instance(64, 32, TargetSource::Seeded(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.target.windows(2).all(|w| w[0] < w[1]));
        assert!(a.target.iter().all(|&j| (1..=64).contains(&j)));
    }

    #[test]
    fn seeded_targets_look_uniform() {
        // Each index should be picked with probability k/d = 1/4.
        let mut counts = [0usize; 8];
        for s in 0..4000 {
            for j in build_instance(8, 2, TargetSource::Seeded(s)).unwrap().target {
                counts[j - 1] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / 4000.0 - 0.25).abs() < 0.03, "{c}");
        }
    }

    #[test]
    fn figure_one_tree() {
        let t = figure_tree();
        assert_eq!(t.children(17), Some((1, 4)));
        assert_eq!(t.parent(17), Some(21));
        assert_eq!(t.height(17), 1);
        assert_eq!(t.level_bounds(), &[16, 20, 22, 23]);
        assert_eq!(t.children(23), Some((21, 22)));
        assert_eq!(t.height(23), 3);
        assert_eq!(t.parent(2), None);
    }

    #[test]
    fn smallest_tree() {
        let inst = build_instance(2, 2, TargetSource::Explicit(vec![1, 2])).unwrap();
        let t = build_tree(&inst);
        assert_eq!(t.children(3), Some((1, 2)));
        assert_eq!(t.height(3), 1);
        assert_eq!(t.level_bounds(), &[2, 3]);
    }

    #[test]
    fn tree_invariants_hold_for_many_instances() {
        for (d, k) in [(4, 2), (8, 4), (16, 8), (32, 16), (32, 32), (20, 4)] {
            for seed in 0..5 {
                let inst = build_instance(d, k, TargetSource::Seeded(seed)).unwrap();
                let t = build_tree(&inst);
                let v = inst.v;
                let mut expected = d;
                assert_eq!(t.level_bound(0), d);
                for l in 1..=v {
                    expected += 1 << (v - l);
                    assert_eq!(t.level_bound(l), expected);
                }
                for m in d + 1..=t.width() {
                    let (a, b) = t.children(m).unwrap();
                    assert!(a < b && b < m);
                    assert_eq!(t.parent(a), Some(m));
                    assert_eq!(t.parent(b), Some(m));
                    let h = t.height(m);
                    assert!(t.level_bound(h - 1) < m && m <= t.level_bound(h));
                    let mut leaves = t.expand(m);
                    assert_eq!(leaves.len(), 1 << h);
                    leaves.sort_unstable();
                    leaves.dedup();
                    assert_eq!(leaves.len(), 1 << h);
                    assert!(leaves.iter().all(|l| inst.target.contains(l)));
                }
                let mut all = t.expand(t.top());
                all.sort_unstable();
                assert_eq!(all, inst.target);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_balanced() {
        let a = sample_inputs(16, 100_000, 5);
        let b = sample_inputs(16, 100_000, 5);
        assert_eq!(a, b);
        for j in 1..=16 {
            let col = a.column(j);
            assert!(col.iter().all(|&x| x == 1.0 || x == -1.0));
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!(mean.abs() <= 0.02, "column {j} mean {mean}");
        }
        let one = sample_inputs(16, 1, 5);
        assert_eq!(one.n(), 1);
        assert_ne!(sample_augmented(16, 100, 5).0, sample_inputs(16, 100, 5));
    }

    #[test]
    fn labels_match_products() {
        let t = figure_tree();
        let x = sample_inputs(16, 500, 11);
        let y = ground_truth_labels(&t, &x).unwrap();
        for i in 0..500 {
            for m in 17..=23 {
                let (a, b) = t.children(m).unwrap();
                assert_eq!(y.get(i, m), y.get(i, a) * y.get(i, b));
            }
            let direct = target_parity(&t.instance, |j| x.get(i, j));
            assert_eq!(y.get(i, 23), direct);
        }
        let ones = TokenMatrix::from_rows(16, 16, &[vec![1.0; 16]]);
        let y = ground_truth_labels(&t, &ones).unwrap();
        assert!((17..=23).all(|m| y.get(0, m) == 1.0));

        let t2 = build_tree(&build_instance(2, 2, TargetSource::Explicit(vec![1, 2])).unwrap());
        let y = ground_truth_labels(&t2, &TokenMatrix::from_rows(2, 2, &[vec![-1.0, 1.0]])).unwrap();
        assert_eq!(y.get(0, 3), -1.0);
    }

    #[test]
    fn augmented_columns_contain_a_plus_one() {
        // Probability that a column of 64 entries is all -1 is 2^-64.
        let aug = sample_augmented(32, 64, 9);
        for j in 1..=32 {
            let max = aug.tokens().column(j).iter().map(|x| (x + 1.0).abs()).fold(0.0, f64::max);
            assert_eq!(max, 2.0);
        }
        assert_eq!(sample_augmented(32, 64, 9), aug);
    }

    #[test]
    fn triviality() {
        let t = figure_tree();
        assert!(is_trivial(&[1, 4, 17], &t));
        for j in 1..=23 {
            assert!(is_trivial(&[j, j], &t));
            assert!(!is_trivial(&[j], &t));
        }
        assert!(is_trivial(&[17, 18, 21], &t));
        assert!(!is_trivial(&[17, 18], &t));
    }

    #[test]
    fn contraction_basics() {
        let ones = vec![1.0; 10];
        assert_eq!(contraction(&[&ones]).unwrap(), 10.0);
        let x = sample_inputs(1, 37, 2);
        assert_eq!(contraction(&[x.column(1), x.column(1)]).unwrap(), 37.0);
        let t = figure_tree();
        let y = ground_truth_labels(&t, &sample_inputs(16, 300, 4)).unwrap();
        assert_eq!(contraction(&[y.column(17), y.column(1), y.column(4)]).unwrap(), 300.0);
        assert_eq!(contraction(&[&ones, &[1.0; 3]]), Err(Error::LengthMismatch(10, 3)));
    }

    #[test]
    fn kappa_formula() {
        let expected = libm::sqrt(2.0 / 1e4 * libm::log(32.0 * 64f64.powi(4) / 0.01));
        assert!((kappa(10_000, 0.01, 64) - expected).abs() < 1e-15);
        assert!(kappa(20_000, 0.01, 64) < kappa(10_000, 0.01, 64));
    }
}
