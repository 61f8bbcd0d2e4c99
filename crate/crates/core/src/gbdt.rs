//! Gradient-boosted regression trees over sparse inputs.
//!
//! Missing feature values are NaN. Every split carries a default direction
//! for them, chosen during training by trying the missing bucket on both
//! sides. Split search is exact: each feature's present values are presorted
//! once and every boundary between distinct values is scored by variance
//! reduction of the negative gradient. One extra candidate per feature
//! separates present from missing values.
//!
//! Squared loss fits mean residuals in the leaves; pinball loss fits the
//! leaf-local empirical quantile of the residuals.

use std::cmp::Ordering;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{sort_scalars, sorted_quantile, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GbdtError {
    #[error("need at least {needed} rows, got {rows}")]
    InsufficientData { rows: usize, needed: usize },
    #[error("training targets must be finite")]
    NonFiniteTarget,
    #[error("input width {got} does not match model width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("feature matrix has {rows} rows but {targets} targets")]
    ShapeMismatch { rows: usize, targets: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("quantile level {0} is outside (0, 1)")]
    InvalidQuantile(f64),
    #[error("no valid split: feature values are constant")]
    NoValidSplit,
}

/// Dense row-major matrix; NaN marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        FeatureMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureMatrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    pub(crate) fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix::new(idx.len(), self.cols, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Loss {
    Squared,
    Pinball { level: f64 },
}

impl Loss {
    pub fn pinball(level: f64) -> Result<Self, GbdtError> {
        if level > 0.0 && level < 1.0 {
            Ok(Loss::Pinball { level })
        } else {
            Err(GbdtError::InvalidQuantile(level))
        }
    }

    /// Loss of predicting `pred` when the truth is `y`.
    pub fn value<T: Scalar>(&self, y: T, pred: T) -> T {
        match *self {
            Loss::Squared => (y - pred) * (y - pred),
            Loss::Pinball { level } => pinball(y, pred, T::from_f64_lossy(level)),
        }
    }

    /// Negative gradient with respect to the prediction. Pinball uses the
    /// subgradient `t` at `y == pred`.
    pub fn negative_gradient<T: Scalar>(&self, y: T, pred: T) -> T {
        match *self {
            Loss::Squared => y - pred,
            Loss::Pinball { level } => {
                let t = T::from_f64_lossy(level);
                if y >= pred {
                    t
                } else {
                    t - T::one()
                }
            }
        }
    }

    /// Optimal constant: mean or empirical quantile.
    fn constant<T: Scalar>(&self, values: &[T]) -> T {
        match *self {
            Loss::Squared => mean(values),
            Loss::Pinball { level } => {
                let mut v = values.to_vec();
                sort_scalars(&mut v);
                sorted_quantile(&v, level).unwrap_or_else(T::zero)
            }
        }
    }
}

/// `t (y - ŷ)` when under-predicting, `(1 - t)(ŷ - y)` otherwise.
pub fn pinball<T: Scalar>(y: T, pred: T, t: T) -> T {
    let diff = y - pred;
    if diff > T::zero() {
        t * diff
    } else {
        (T::one() - t) * (-diff)
    }
}

fn mean<T: Scalar>(values: &[T]) -> T {
    if values.is_empty() {
        return T::zero();
    }
    values.iter().copied().sum::<T>() / T::from_usize_lossy(values.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtConfig {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub early_stopping_rounds: Option<usize>,
    pub validation_fraction: f64,
}

impl GbdtConfig {
    /// Point models: depth 6, rate 0.1, up to 10^4 rounds with early
    /// stopping after 50 stale rounds on a 20% validation split.
    pub fn point_default() -> Self {
        GbdtConfig {
            rounds: 10_000,
            learning_rate: 0.1,
            max_depth: 6,
            min_samples_leaf: 3,
            early_stopping_rounds: Some(50),
            validation_fraction: 0.2,
        }
    }

    /// Quantile models: 1500 rounds at rate 0.001.
    pub fn quantile_default() -> Self {
        GbdtConfig {
            rounds: 1500,
            learning_rate: 0.001,
            max_depth: 6,
            min_samples_leaf: 3,
            early_stopping_rounds: None,
            validation_fraction: 0.2,
        }
    }

    /// One depth-1 tree at rate 1, no validation split.
    pub fn stump() -> Self {
        GbdtConfig {
            rounds: 1,
            learning_rate: 1.0,
            max_depth: 1,
            min_samples_leaf: 1,
            early_stopping_rounds: None,
            validation_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<(), GbdtError> {
        let bad = |m: &str| Err(GbdtError::InvalidConfig(m.to_string()));
        if self.rounds < 1 {
            return bad("rounds must be >= 1");
        }
        if self.max_depth < 1 {
            return bad("max_depth must be >= 1");
        }
        if self.min_samples_leaf < 1 {
            return bad("min_samples_leaf must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must be in (0, 1)");
        }
        Ok(())
    }
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self::point_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node<T> {
    /// Present values `< threshold` go left; missing values follow `default`.
    Split {
        feature: usize,
        threshold: T,
        default: Direction,
        left: usize,
        right: usize,
    },
    Leaf {
        value: T,
    },
}

/// Binary tree stored as a flat node array rooted at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> RegressionTree<T> {
    pub fn leaf(value: T) -> Self {
        RegressionTree {
            nodes: vec![Node::Leaf { value }],
        }
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    #[inline]
    pub fn predict(&self, x: &[T]) -> T {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    default,
                    left,
                    right,
                } => {
                    let v = x[*feature];
                    let go_left = if v.is_nan() {
                        *default == Direction::Left
                    } else {
                        v < *threshold
                    };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk<T>(nodes: &[Node<T>], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Boosted ensemble: `base_score + Σ shrinkage · tree(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel<T> {
    pub base_score: T,
    pub trees: Vec<(RegressionTree<T>, T)>,
    pub loss: Loss,
    pub feature_width: usize,
}

impl<T: Scalar> GbdtModel<T> {
    /// A model with no trees.
    pub fn constant(base_score: T, loss: Loss, feature_width: usize) -> Self {
        GbdtModel {
            base_score,
            trees: Vec::new(),
            loss,
            feature_width,
        }
    }

    pub fn predict(&self, x: &[T]) -> Result<T, GbdtError> {
        if x.len() != self.feature_width {
            return Err(GbdtError::WidthMismatch {
                expected: self.feature_width,
                got: x.len(),
            });
        }
        Ok(self.predict_unchecked(x))
    }

    #[inline]
    pub fn predict_unchecked(&self, x: &[T]) -> T {
        let mut acc = self.base_score;
        for (tree, shrinkage) in &self.trees {
            acc = acc + *shrinkage * tree.predict(x);
        }
        acc
    }

    pub fn node_count(&self) -> usize {
        self.trees.iter().map(|(t, _)| t.nodes.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> GbdtModel<U> {
        let c = |v: T| U::from_f64_lossy(v.to_f64_lossy());
        GbdtModel {
            base_score: c(self.base_score),
            trees: self
                .trees
                .iter()
                .map(|(t, s)| {
                    let nodes = t
                        .nodes
                        .iter()
                        .map(|n| match *n {
                            Node::Leaf { value } => Node::Leaf { value: c(value) },
                            Node::Split {
                                feature,
                                threshold,
                                default,
                                left,
                                right,
                            } => Node::Split {
                                feature,
                                threshold: c(threshold),
                                default,
                                left,
                                right,
                            },
                        })
                        .collect();
                    (RegressionTree { nodes }, c(*s))
                })
                .collect(),
            loss: self.loss,
            feature_width: self.feature_width,
        }
    }
}

/// Serialized layout version of [`GbdtModel`].
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Flat per-tree arrays. `feature[i] == -1` marks a leaf whose output is
/// `value[i]`; otherwise `value[i]` is the split threshold.
#[derive(Serialize, Deserialize)]
struct TreeRepr<T> {
    shrinkage: T,
    feature: Vec<i64>,
    value: Vec<T>,
    default_left: Vec<u8>,
    left: Vec<u32>,
    right: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr<T> {
    format: u32,
    loss: Loss,
    base_score: T,
    feature_width: usize,
    trees: Vec<TreeRepr<T>>,
}

impl<T: Scalar> Serialize for GbdtModel<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let trees = self
            .trees
            .iter()
            .map(|(tree, shrinkage)| {
                let n = tree.nodes.len();
                let mut r = TreeRepr {
                    shrinkage: *shrinkage,
                    feature: Vec::with_capacity(n),
                    value: Vec::with_capacity(n),
                    default_left: Vec::with_capacity(n),
                    left: Vec::with_capacity(n),
                    right: Vec::with_capacity(n),
                };
                for node in &tree.nodes {
                    match *node {
                        Node::Leaf { value } => {
                            r.feature.push(-1);
                            r.value.push(value);
                            r.default_left.push(0);
                            r.left.push(0);
                            r.right.push(0);
                        }
                        Node::Split {
                            feature,
                            threshold,
                            default,
                            left,
                            right,
                        } => {
                            r.feature.push(feature as i64);
                            r.value.push(threshold);
                            r.default_left.push(u8::from(default == Direction::Left));
                            r.left.push(left as u32);
                            r.right.push(right as u32);
                        }
                    }
                }
                r
            })
            .collect();
        ModelRepr {
            format: MODEL_FORMAT_VERSION,
            loss: self.loss,
            base_score: self.base_score,
            feature_width: self.feature_width,
            trees,
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for GbdtModel<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let repr = ModelRepr::<T>::deserialize(d)?;
        if repr.format != MODEL_FORMAT_VERSION {
            return Err(D::Error::custom(format!("unsupported model format {}", repr.format)));
        }
        let mut trees = Vec::with_capacity(repr.trees.len());
        for t in repr.trees {
            let n = t.feature.len();
            if [t.value.len(), t.default_left.len(), t.left.len(), t.right.len()]
                .iter()
                .any(|&l| l != n)
                || n == 0
            {
                return Err(D::Error::custom("tree arrays have inconsistent lengths"));
            }
            let mut nodes = Vec::with_capacity(n);
            for i in 0..n {
                if t.feature[i] < 0 {
                    nodes.push(Node::Leaf { value: t.value[i] });
                } else {
                    let (left, right) = (t.left[i] as usize, t.right[i] as usize);
                    let feature = t.feature[i] as usize;
                    // children always follow their parent, which rules out cycles
                    if left <= i || right <= i || left >= n || right >= n || feature >= repr.feature_width {
                        return Err(D::Error::custom("tree node index out of range"));
                    }
                    nodes.push(Node::Split {
                        feature,
                        threshold: t.value[i],
                        default: if t.default_left[i] != 0 {
                            Direction::Left
                        } else {
                            Direction::Right
                        },
                        left,
                        right,
                    });
                }
            }
            trees.push((RegressionTree { nodes }, t.shrinkage));
        }
        Ok(GbdtModel {
            base_score: repr.base_score,
            trees,
            loss: repr.loss,
            feature_width: repr.feature_width,
        })
    }
}

/// Best split of one feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate<T> {
    pub threshold: T,
    pub default_direction: Direction,
    pub gain: T,
    pub left_count: usize,
    pub right_count: usize,
}

fn midpoint<T: Scalar>(lo: T, hi: T) -> T {
    let two = T::one() + T::one();
    let mid = lo + (hi - lo) / two;
    if mid > lo && mid <= hi {
        mid
    } else {
        hi
    }
}

struct ScanTotals<T> {
    present_n: usize,
    present_sum: T,
    missing_n: usize,
    missing_sum: T,
    sum_sq: T,
}

/// Scores every boundary of an ascending `(value, gradient)` run, each with
/// the missing bucket on the left and then on the right, plus the
/// present-vs-missing partition. Ties keep the earliest candidate.
fn scan_sorted<T: Scalar>(
    sorted: impl Iterator<Item = (T, T)>,
    totals: &ScanTotals<T>,
    min_leaf: usize,
) -> Option<SplitCandidate<T>> {
    let n = totals.present_n + totals.missing_n;
    let total_sum = totals.present_sum + totals.missing_sum;
    let parent = total_sum * total_sum / T::from_usize_lossy(n);
    let min_gain = totals.sum_sq * T::epsilon() * T::from_usize_lossy(1024);
    let score = |ln: usize, ls: T| {
        let rn = n - ln;
        let rs = total_sum - ls;
        ls * ls / T::from_usize_lossy(ln) + rs * rs / T::from_usize_lossy(rn) - parent
    };
    let mut best: Option<SplitCandidate<T>> = None;
    let consider = |ln: usize, ls: T, threshold: T, dir: Direction, best: &mut Option<SplitCandidate<T>>| {
        if ln < min_leaf || n - ln < min_leaf {
            return;
        }
        let gain = score(ln, ls);
        if gain > min_gain && best.is_none_or(|b| gain > b.gain) {
            *best = Some(SplitCandidate {
                threshold,
                default_direction: dir,
                gain,
                left_count: ln,
                right_count: n - ln,
            });
        }
    };

    let mut prefix_n = 0usize;
    let mut prefix_sum = T::zero();
    let mut prev: Option<T> = None;
    for (value, grad) in sorted {
        if let Some(p) = prev {
            if value > p {
                let thr = midpoint(p, value);
                consider(prefix_n + totals.missing_n, prefix_sum + totals.missing_sum, thr, Direction::Left, &mut best);
                consider(prefix_n, prefix_sum, thr, Direction::Right, &mut best);
            }
        }
        prefix_n += 1;
        prefix_sum = prefix_sum + grad;
        prev = Some(value);
    }
    if totals.missing_n > 0 && totals.present_n > 0 {
        consider(totals.present_n, totals.present_sum, T::max_value(), Direction::Right, &mut best);
    }
    best
}

/// Best variance-reducing split of a single feature column (NaN = missing).
pub fn find_best_split<T: Scalar>(
    values: &[T],
    gradients: &[T],
    min_samples_leaf: usize,
) -> Result<SplitCandidate<T>, GbdtError> {
    if values.len() != gradients.len() {
        return Err(GbdtError::ShapeMismatch {
            rows: values.len(),
            targets: gradients.len(),
        });
    }
    let mut present: Vec<(T, T)> = Vec::new();
    let mut missing_n = 0;
    let mut missing_sum = T::zero();
    for (&v, &g) in values.iter().zip(gradients) {
        if v.is_nan() {
            missing_n += 1;
            missing_sum = missing_sum + g;
        } else {
            present.push((v, g));
        }
    }
    present.sort_by(|a, b| a.0.total_cmp_scalar(&b.0));
    let totals = ScanTotals {
        present_n: present.len(),
        present_sum: present.iter().map(|p| p.1).sum(),
        missing_n,
        missing_sum,
        sum_sq: gradients.iter().map(|g| *g * *g).sum(),
    };
    scan_sorted(present.into_iter(), &totals, min_samples_leaf.max(1)).ok_or(GbdtError::NoValidSplit)
}

struct TreeBuilder<'a, T> {
    x: &'a FeatureMatrix<T>,
    grad: &'a [T],
    /// `y - F(x)`, used for leaf values.
    residual: &'a [T],
    loss: Loss,
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<Node<T>>,
    go_left: Vec<bool>,
}

impl<T: Scalar> TreeBuilder<'_, T> {
    fn leaf_value(&self, rows: &[u32]) -> T {
        let r: Vec<T> = rows.iter().map(|&i| self.residual[i as usize]).collect();
        self.loss.constant(&r)
    }

    fn build(&mut self, rows: Vec<u32>, sorted: Vec<Vec<u32>>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: T::zero() });
        let n = rows.len();
        if depth >= self.max_depth || n < 2 * self.min_leaf {
            let value = self.leaf_value(&rows);
            self.nodes[id] = Node::Leaf { value };
            return id;
        }
        let node_sum: T = rows.iter().map(|&r| self.grad[r as usize]).sum();
        let sum_sq: T = rows.iter().map(|&r| self.grad[r as usize] * self.grad[r as usize]).sum();
        let mut best: Option<(usize, SplitCandidate<T>)> = None;
        for (f, list) in sorted.iter().enumerate() {
            let present_sum: T = list.iter().map(|&r| self.grad[r as usize]).sum();
            let totals = ScanTotals {
                present_n: list.len(),
                present_sum,
                missing_n: n - list.len(),
                missing_sum: node_sum - present_sum,
                sum_sq,
            };
            let iter = list.iter().map(|&r| (self.x.get(r as usize, f), self.grad[r as usize]));
            if let Some(c) = scan_sorted(iter, &totals, self.min_leaf) {
                if best.is_none_or(|(_, b)| c.gain > b.gain) {
                    best = Some((f, c));
                }
            }
        }
        let Some((feature, split)) = best else {
            let value = self.leaf_value(&rows);
            self.nodes[id] = Node::Leaf { value };
            return id;
        };
        for &r in &rows {
            let v = self.x.get(r as usize, feature);
            self.go_left[r as usize] = if v.is_nan() {
                split.default_direction == Direction::Left
            } else {
                v < split.threshold
            };
        }
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&r| self.go_left[r as usize]);
        let mut left_sorted = Vec::with_capacity(sorted.len());
        let mut right_sorted = Vec::with_capacity(sorted.len());
        for list in sorted {
            let (l, r): (Vec<u32>, Vec<u32>) = list.into_iter().partition(|&r| self.go_left[r as usize]);
            left_sorted.push(l);
            right_sorted.push(r);
        }
        let left = self.build(left_rows, left_sorted, depth + 1);
        let right = self.build(right_rows, right_sorted, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold: split.threshold,
            default: split.default_direction,
            left,
            right,
        };
        id
    }
}

fn presort<T: Scalar>(x: &FeatureMatrix<T>) -> Vec<Vec<u32>> {
    (0..x.cols())
        .map(|f| {
            let mut list: Vec<u32> = (0..x.rows() as u32).filter(|&r| !x.get(r as usize, f).is_nan()).collect();
            list.sort_by(|&a, &b| {
                x.get(a as usize, f)
                    .total_cmp_scalar(&x.get(b as usize, f))
                    .then(a.cmp(&b))
            });
            list
        })
        .collect()
}

fn fit_tree<T: Scalar>(
    x: &FeatureMatrix<T>,
    sorted: &[Vec<u32>],
    grad: &[T],
    residual: &[T],
    loss: Loss,
    cfg: &GbdtConfig,
) -> RegressionTree<T> {
    let mut b = TreeBuilder {
        x,
        grad,
        residual,
        loss,
        max_depth: cfg.max_depth,
        min_leaf: cfg.min_samples_leaf,
        nodes: Vec::new(),
        go_left: vec![false; x.rows()],
    };
    b.build((0..x.rows() as u32).collect(), sorted.to_vec(), 0);
    RegressionTree { nodes: b.nodes }
}

fn row_order<T: Scalar>(x: &FeatureMatrix<T>, y: &[T], a: usize, b: usize) -> Ordering {
    y[a].total_cmp_scalar(&y[b]).then_with(|| {
        x.row(a)
            .iter()
            .zip(x.row(b))
            .map(|(p, q)| p.total_cmp_scalar(q))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Splits rows into `(kept, held_out)` by content hash, both in canonical
/// order. Nothing is held out if fewer than `min_kept` rows would remain.
pub(crate) fn holdout_split<T: Scalar>(
    x: &FeatureMatrix<T>,
    y: &[T],
    fraction: f64,
    min_kept: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..y.len()).collect();
    let mut held: Vec<usize> = Vec::new();
    let n_held = (y.len() as f64 * fraction).round() as usize;
    if n_held >= 1 && y.len() - n_held >= min_kept {
        order.sort_by(|&a, &b| {
            row_hash(x, y, a)
                .cmp(&row_hash(x, y, b))
                .then_with(|| row_order(x, y, a, b))
        });
        held = order.drain(..n_held).collect();
        held.sort_by(|&a, &b| row_order(x, y, a, b));
    }
    order.sort_by(|&a, &b| row_order(x, y, a, b));
    (order, held)
}

fn row_hash<T: Scalar>(x: &FeatureMatrix<T>, y: &[T], i: usize) -> u64 {
    let mut bytes = Vec::with_capacity(8 * (x.cols() + 1));
    bytes.extend_from_slice(&y[i].to_f64_lossy().to_bits().to_le_bytes());
    for v in x.row(i) {
        bytes.extend_from_slice(&v.to_f64_lossy().to_bits().to_le_bytes());
    }
    crate::vectorize::fnv1a64(&bytes)
}

/// Fits a boosted model. Rows are put in a canonical content order first, so
/// the result does not depend on the input row order.
pub fn fit<T: Scalar>(
    x: &FeatureMatrix<T>,
    y: &[T],
    cfg: &GbdtConfig,
    loss: Loss,
) -> Result<GbdtModel<T>, GbdtError> {
    cfg.validate()?;
    if let Loss::Pinball { level } = loss {
        Loss::pinball(level)?;
    }
    if x.rows() != y.len() {
        return Err(GbdtError::ShapeMismatch {
            rows: x.rows(),
            targets: y.len(),
        });
    }
    let needed = 2 * cfg.min_samples_leaf;
    if y.len() < needed {
        return Err(GbdtError::InsufficientData { rows: y.len(), needed });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(GbdtError::NonFiniteTarget);
    }

    let (order, val_idx) = match cfg.early_stopping_rounds {
        Some(_) => holdout_split(x, y, cfg.validation_fraction, needed),
        None => holdout_split(x, y, 0.0, needed),
    };
    let xt = x.select_rows(&order);
    let yt: Vec<T> = order.iter().map(|&i| y[i]).collect();
    let xv = x.select_rows(&val_idx);
    let yv: Vec<T> = val_idx.iter().map(|&i| y[i]).collect();

    let base = loss.constant(&yt);
    let mut model = GbdtModel::constant(base, loss, x.cols());
    if yt.iter().all(|v| *v == yt[0]) {
        debug!("constant target; model is the base score only");
        return Ok(model);
    }

    let lr = T::from_f64_lossy(cfg.learning_rate);
    let sorted = presort(&xt);
    let mut pred = vec![base; yt.len()];
    let mut pred_val = vec![base; yv.len()];
    let mut grad = vec![T::zero(); yt.len()];
    let mut residual = vec![T::zero(); yt.len()];
    let mut best_val = T::infinity();
    let mut best_len = 0usize;
    let mut stale = 0usize;

    for round in 0..cfg.rounds {
        for i in 0..yt.len() {
            grad[i] = loss.negative_gradient(yt[i], pred[i]);
            residual[i] = yt[i] - pred[i];
        }
        if loss == Loss::Squared && grad.iter().all(|g| *g == T::zero()) {
            break;
        }
        let tree = fit_tree(&xt, &sorted, &grad, &residual, loss, cfg);
        for (i, p) in pred.iter_mut().enumerate() {
            *p = *p + lr * tree.predict(xt.row(i));
        }
        for (i, p) in pred_val.iter_mut().enumerate() {
            *p = *p + lr * tree.predict(xv.row(i));
        }
        model.trees.push((tree, lr));

        if let (Some(patience), false) = (cfg.early_stopping_rounds, yv.is_empty()) {
            let val_loss = yv
                .iter()
                .zip(&pred_val)
                .map(|(y, p)| loss.value(*y, *p))
                .sum::<T>()
                / T::from_usize_lossy(yv.len());
            if val_loss < best_val {
                best_val = val_loss;
                best_len = round + 1;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    debug!("early stop at round {}, best {}", round + 1, best_len);
                    break;
                }
            }
        }
    }
    if cfg.early_stopping_rounds.is_some() && !yv.is_empty() {
        model.trees.truncate(best_len);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> FeatureMatrix<f64> {
        FeatureMatrix::new(values.len(), 1, values.to_vec())
    }

    #[test]
    fn constant_target_has_no_trees() {
        let x = col(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = fit(&x, &[7.0; 6], &GbdtConfig::point_default(), Loss::Squared).unwrap();
        assert!(m.trees.is_empty());
        assert_eq!(m.predict(&[100.0]).unwrap(), 7.0);
        assert_eq!(m.predict(&[f64::NAN]).unwrap(), 7.0);
    }

    #[test]
    fn stump_on_step() {
        let x = col(&[0.0, 1.0, 2.0, 3.0]);
        let m = fit(&x, &[0.0, 0.0, 10.0, 10.0], &GbdtConfig::stump(), Loss::Squared).unwrap();
        assert_eq!(m.trees.len(), 1);
        let Node::Split { threshold, .. } = m.trees[0].0.nodes()[0] else { panic!() };
        assert!(threshold > 1.0 && threshold <= 2.0);
        assert_eq!(m.predict(&[0.0]).unwrap(), 0.0);
        assert_eq!(m.predict(&[3.0]).unwrap(), 10.0);
    }

    #[test]
    fn width_is_checked() {
        let m = GbdtModel::<f64>::constant(1.0, Loss::Squared, 3);
        assert_eq!(
            m.predict(&[1.0]),
            Err(GbdtError::WidthMismatch { expected: 3, got: 1 })
        );
    }

    #[test]
    fn split_on_step_values() {
        let s = find_best_split(&[0.0, 0.0, 10.0, 10.0], &[-5.0, -5.0, 5.0, 5.0], 1).unwrap();
        assert!(s.threshold > 0.0 && s.threshold <= 10.0);
        assert!(s.gain > 0.0);
    }

    #[test]
    fn constant_feature_has_no_split() {
        assert_eq!(
            find_best_split(&[2.0, 2.0, 2.0], &[1.0, -1.0, 3.0], 1),
            Err(GbdtError::NoValidSplit)
        );
    }

    #[test]
    fn missing_values_pick_better_direction() {
        // missing rows look like the high group
        let nan = f64::NAN;
        let values = [1.0, 2.0, 3.0, 4.0, nan, nan];
        let grads = [-1.0, -1.0, 1.0, 1.0, 1.0, 1.0];
        let s = find_best_split(&values, &grads, 1).unwrap();
        assert_eq!(s.default_direction, Direction::Right);
        assert!(s.threshold > 2.0 && s.threshold <= 3.0);
        assert_eq!((s.left_count, s.right_count), (2, 4));
    }

    #[test]
    fn present_versus_missing_split() {
        let nan = f64::NAN;
        let values = [5.0, 5.0, 5.0, nan, nan, nan];
        let grads = [1.0, 1.0, 1.0, -1.0, -1.0, -1.0];
        let s = find_best_split(&values, &grads, 1).unwrap();
        assert_eq!(s.default_direction, Direction::Right);
        assert_eq!((s.left_count, s.right_count), (3, 3));
    }

    #[test]
    fn pinball_base_is_quantile() {
        let x = col(&[0.0; 10]);
        let y: Vec<f64> = (1..=10).map(f64::from).collect();
        let mut cfg = GbdtConfig::quantile_default();
        cfg.rounds = 1;
        let m = fit(&x, &y, &cfg, Loss::pinball(0.9).unwrap()).unwrap();
        assert_eq!(m.base_score, 10.0);
    }

    #[test]
    fn invalid_inputs() {
        let x = col(&[1.0]);
        assert!(matches!(
            fit(&x, &[1.0], &GbdtConfig::point_default(), Loss::Squared),
            Err(GbdtError::InsufficientData { .. })
        ));
        assert_eq!(Loss::pinball(1.0), Err(GbdtError::InvalidQuantile(1.0)));
        let mut cfg = GbdtConfig::point_default();
        cfg.rounds = 0;
        assert!(cfg.validate().is_err());
        let x = col(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(
            fit(&x, &[1.0, f64::NAN, 1.0, 1.0, 1.0, 1.0], &GbdtConfig::point_default(), Loss::Squared),
            Err(GbdtError::NonFiniteTarget)
        );
    }

    #[test]
    fn serde_round_trip_is_exact() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![i as f64 * 0.37, if i % 3 == 0 { f64::NAN } else { (i * 7 % 11) as f64 }])
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0].sin() * 3.0 + r[1].max(0.0)).collect();
        let x = FeatureMatrix::from_rows(&rows);
        let m = fit(&x, &y, &GbdtConfig::point_default(), Loss::Squared).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: GbdtModel<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn f32_models_fit() {
        let x = FeatureMatrix::<f32>::new(4, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let m = fit(&x, &[0.0f32, 0.0, 10.0, 10.0], &GbdtConfig::stump(), Loss::Squared).unwrap();
        assert_eq!(m.predict(&[3.0]).unwrap(), 10.0);
    }

    #[test]
    fn rejects_bad_tree_indices() {
        let json = r#"{"format":1,"loss":{"kind":"squared"},"base_score":0.0,"feature_width":1,
            "trees":[{"shrinkage":1.0,"feature":[0],"value":[0.5],"default_left":[0],"left":[0],"right":[0]}]}"#;
        assert!(serde_json::from_str::<GbdtModel<f64>>(json).is_err());
    }
}
