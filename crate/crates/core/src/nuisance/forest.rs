//! CART random forest with multi-output leaves.
//!
//! Splits maximize the reduction in summed squared error across all outputs.
//! With one-hot class indicators as outputs this is the Gini criterion, so
//! the same learner serves as a regression forest (one output) and as a
//! probability forest (one output per class, leaves hold class frequencies).

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DtrError, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub num_trees: usize,
    /// `None` grows until `min_leaf` stops splitting.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Fraction of features tried at each split, in `(0, 1]`.
    pub mtry_fraction: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            num_trees: 50,
            max_depth: None,
            min_leaf: 5,
            mtry_fraction: 0.5,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_trees == 0 {
            return Err(DtrError::InvalidInput("forest needs at least one tree".into()));
        }
        if self.min_leaf == 0 {
            return Err(DtrError::InvalidInput("min_leaf must be at least 1".into()));
        }
        if !(self.mtry_fraction > 0.0 && self.mtry_fraction <= 1.0) {
            return Err(DtrError::InvalidInput(format!(
                "mtry_fraction {} is outside (0, 1]",
                self.mtry_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Offset into `Tree::leaf_values`.
    Leaf(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
    leaf_values: Vec<f64>,
    #[serde(skip)]
    in_bag: Vec<bool>,
}

impl Tree {
    fn leaf(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        loop {
            match self.nodes[idx] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => idx = if x[feature] < threshold { left } else { right },
                Node::Leaf(offset) => return offset,
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Forest {
    num_features: usize,
    num_outputs: usize,
    trees: Vec<Tree>,
}

/// Grows one tree. Every feature keeps the bootstrap sample sorted by that
/// feature; a node owns the same `lo..hi` range in each list, and splitting
/// stable-partitions all lists so no node ever re-sorts.
struct Builder<'a> {
    x: &'a Matrix,
    y: &'a Matrix,
    params: &'a ForestParams,
    mtry: usize,
    sorted: Vec<Vec<u32>>,
    go_left: Vec<bool>,
    buf: Vec<u32>,
    nodes: Vec<Node>,
    leaf_values: Vec<f64>,
}

impl Forest {
    /// Fit on rows of `x` with targets `y` (`n × outputs`).
    pub fn fit(x: &Matrix, y: &Matrix, params: &ForestParams) -> Result<Self> {
        params.validate()?;
        let n = x.rows();
        if n == 0 || y.rows() != n {
            return Err(DtrError::InvalidInput(format!(
                "forest fit needs matching non-empty inputs, got {} rows and {} targets",
                n,
                y.rows()
            )));
        }
        let p = x.cols();
        let mtry = ((params.mtry_fraction * p as f64).ceil() as usize).clamp(1, p.max(1));
        let orders: Vec<Vec<u32>> = (0..p)
            .map(|f| {
                let mut o: Vec<u32> = (0..n as u32).collect();
                o.sort_by(|&a, &b| x.get(a as usize, f).total_cmp(&x.get(b as usize, f)).then(a.cmp(&b)));
                o
            })
            .collect();
        let trees = (0..params.num_trees)
            .into_par_iter()
            .map(|b| {
                let mut rng = rng_from_seed(derive_seed(params.seed, &[b as u64]));
                let mut counts = vec![0u32; n];
                let sample: Vec<u32> = (0..n)
                    .map(|_| {
                        let i = rng.random_range(0..n);
                        counts[i] += 1;
                        i as u32
                    })
                    .collect();
                let sorted = if p == 0 {
                    vec![sample]
                } else {
                    orders
                        .iter()
                        .map(|o| {
                            o.iter()
                                .flat_map(|&i| std::iter::repeat_n(i, counts[i as usize] as usize))
                                .collect()
                        })
                        .collect()
                };
                let mut builder = Builder {
                    x,
                    y,
                    params,
                    mtry,
                    sorted,
                    go_left: vec![false; n],
                    buf: Vec::with_capacity(n),
                    nodes: Vec::new(),
                    leaf_values: Vec::new(),
                };
                builder.grow(0, n, 0, &mut rng);
                let in_bag = counts.iter().map(|&c| c > 0).collect();
                Tree {
                    nodes: builder.nodes,
                    leaf_values: builder.leaf_values,
                    in_bag,
                }
            })
            .collect();
        Ok(Self {
            num_features: p,
            num_outputs: y.cols(),
            trees,
        })
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    /// Average of the leaf values reached by `x` across trees.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let k = self.num_outputs;
        let mut out = vec![0.0; k];
        for tree in &self.trees {
            let off = tree.leaf(x);
            for (o, v) in out.iter_mut().zip(&tree.leaf_values[off..off + k]) {
                *o += v;
            }
        }
        let m = self.trees.len() as f64;
        out.iter_mut().for_each(|o| *o /= m);
        out
    }

    /// Out-of-bag prediction for training row `row`: averages only trees
    /// whose bootstrap sample excluded that row. Falls back to all trees when
    /// the row is in every bootstrap sample or bag bookkeeping is absent
    /// (deserialized forests).
    pub fn predict_oob(&self, row: usize, x: &[f64]) -> Vec<f64> {
        let k = self.num_outputs;
        let mut out = vec![0.0; k];
        let mut used = 0usize;
        for tree in &self.trees {
            if tree.in_bag.get(row).copied().unwrap_or(true) {
                continue;
            }
            let off = tree.leaf(x);
            for (o, v) in out.iter_mut().zip(&tree.leaf_values[off..off + k]) {
                *o += v;
            }
            used += 1;
        }
        if used == 0 {
            return self.predict(x);
        }
        out.iter_mut().for_each(|o| *o /= used as f64);
        out
    }
}

impl Builder<'_> {
    fn push_leaf(&mut self, lo: usize, hi: usize) -> usize {
        let samples = &self.sorted[0][lo..hi];
        let k = self.y.cols();
        let offset = self.leaf_values.len();
        let mut sums = vec![0.0; k];
        for &i in samples {
            for (s, v) in sums.iter_mut().zip(self.y.row(i as usize)) {
                *s += v;
            }
        }
        let m = samples.len() as f64;
        for (o, s) in sums.iter().enumerate() {
            // keep pure nodes exact
            let first = self.y.get(samples[0] as usize, o);
            if samples.iter().all(|&i| self.y.get(i as usize, o) == first) {
                self.leaf_values.push(first);
            } else {
                self.leaf_values.push(s / m);
            }
        }
        self.nodes.push(Node::Leaf(offset));
        self.nodes.len() - 1
    }

    fn is_pure(&self, lo: usize, hi: usize) -> bool {
        let samples = &self.sorted[0][lo..hi];
        let first = self.y.row(samples[0] as usize);
        samples.iter().all(|&i| self.y.row(i as usize) == first)
    }

    fn grow(&mut self, lo: usize, hi: usize, depth: usize, rng: &mut Rng) -> usize {
        let min_leaf = self.params.min_leaf;
        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || hi - lo < 2 * min_leaf || self.is_pure(lo, hi) {
            return self.push_leaf(lo, hi);
        }
        let Some((feature, threshold)) = self.best_split(lo, hi, rng) else {
            return self.push_leaf(lo, hi);
        };
        let mut n_left = 0;
        for &i in &self.sorted[feature][lo..hi] {
            let left = self.x.get(i as usize, feature) < threshold;
            self.go_left[i as usize] = left;
            n_left += usize::from(left);
        }
        for list in self.sorted.iter_mut() {
            self.buf.clear();
            let seg = &mut list[lo..hi];
            let mut w = 0;
            for r in 0..seg.len() {
                let i = seg[r];
                if self.go_left[i as usize] {
                    seg[w] = i;
                    w += 1;
                } else {
                    self.buf.push(i);
                }
            }
            seg[w..].copy_from_slice(&self.buf);
        }
        let mid = lo + n_left;
        let idx = self.nodes.len();
        self.nodes.push(Node::Leaf(usize::MAX));
        let l = self.grow(lo, mid, depth + 1, rng);
        let r = self.grow(mid, hi, depth + 1, rng);
        self.nodes[idx] = Node::Split {
            feature,
            threshold,
            left: l,
            right: r,
        };
        idx
    }

    fn best_split(&self, lo: usize, hi: usize, rng: &mut Rng) -> Option<(usize, f64)> {
        let p = self.x.cols();
        if p == 0 {
            return None;
        }
        let k = self.y.cols();
        let n = hi - lo;
        let min_leaf = self.params.min_leaf;
        let mut totals = vec![0.0; k];
        for &i in &self.sorted[0][lo..hi] {
            for (t, v) in totals.iter_mut().zip(self.y.row(i as usize)) {
                *t += v;
            }
        }
        let parent: f64 = totals.iter().map(|t| t * t).sum::<f64>() / n as f64;

        let mut features = sample_indices(rng, p, self.mtry).into_vec();
        features.sort_unstable();

        let mut best: Option<(f64, usize, f64)> = None;
        let mut left_sums = vec![0.0; k];
        for &f in &features {
            let order = &self.sorted[f][lo..hi];
            let value = |pos: usize| self.x.get(order[pos] as usize, f);
            if value(0) == value(n - 1) {
                continue;
            }
            left_sums.iter_mut().for_each(|s| *s = 0.0);
            let mut v = value(0);
            for pos in 0..n - 1 {
                for (s, y) in left_sums.iter_mut().zip(self.y.row(order[pos] as usize)) {
                    *s += y;
                }
                let next = value(pos + 1);
                let here = v;
                v = next;
                let n_left = pos + 1;
                let n_right = n - n_left;
                if n_left < min_leaf || n_right < min_leaf || here == next {
                    continue;
                }
                let mut score = 0.0;
                for (l, t) in left_sums.iter().zip(&totals) {
                    let r = t - l;
                    score += l * l / n_left as f64 + r * r / n_right as f64;
                }
                if best.is_none_or(|(b, _, _)| score > b) {
                    best = Some((score, f, 0.5 * (here + next)));
                }
            }
        }
        best.and_then(|(score, f, thr)| {
            (score - parent > 1e-12 * parent.abs().max(f64::MIN_POSITIVE)).then_some((f, thr))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Matrix {
        Matrix::from_vec(n, 1, (0..n).map(|i| i as f64 / n as f64).collect())
    }

    #[test]
    fn constant_target_gives_constant_prediction() {
        let x = grid(50);
        let y = Matrix::filled(50, 1, 3.25);
        let f = Forest::fit(&x, &y, &ForestParams::default()).unwrap();
        assert_eq!(f.predict(&[0.3]), vec![3.25]);
        assert_eq!(f.predict(&[-10.0]), vec![3.25]);
    }

    #[test]
    fn step_function_is_learned() {
        let x = grid(200);
        let y = Matrix::from_vec(200, 1, (0..200).map(|i| f64::from(i >= 100)).collect());
        let f = Forest::fit(&x, &y, &ForestParams::default()).unwrap();
        assert!(f.predict(&[0.1])[0] < 0.1);
        assert!(f.predict(&[0.9])[0] > 0.9);
    }

    #[test]
    fn class_frequencies_sum_to_one() {
        let x = grid(90);
        let mut y = Matrix::zeros(90, 3);
        for i in 0..90 {
            y.set(i, i % 3, 1.0);
        }
        let f = Forest::fit(&x, &y, &ForestParams::default()).unwrap();
        let p = f.predict(&[0.4]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rejects_bad_params() {
        let p = ForestParams {
            mtry_fraction: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
