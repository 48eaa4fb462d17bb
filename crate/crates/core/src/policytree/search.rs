//! Exact search over depth-0/1/2 axis-aligned trees.
//!
//! Candidate thresholds for feature `f` are `-inf`, the midpoints between
//! consecutive distinct values of `f` over all rows, and `+inf`; threshold
//! index `i` sends every value of rank `< i` to the left. Ties are broken by
//! the lowest feature index, then the lowest threshold, then the lowest leaf
//! actions.
//!
//! Depth 2 is solved as root split × optimal depth-1 subtree on each side.
//! For each root feature the left side grows one rank at a time (and the
//! right side, swept in reverse, likewise), and the optimal depth-1 value of
//! a growing set is maintained per child feature with range-add segment
//! trees over that feature's threshold indices: for a set with action totals
//! `T` and left-prefix sums `L_θ`,
//! `max_θ [max_a L_θ(a) + max_b (T(b) - L_θ(b))] = max_{a,b} [T(b) + max_θ (L_θ(a) - L_θ(b))]`,
//! and inserting a unit of rank `r` adds its score difference to every
//! threshold index above `r`.

use rayon::prelude::*;

use super::{lowest_argmax, PolicyTree, SplitNode, StageConstraint, MAX_DEPTH};
use crate::error::{DtrError, Result};
use crate::matrix::Matrix;
use crate::scores::ScoreMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub tree: PolicyTree,
    /// `Σ_i scores(i, π(H_i))` over all rows, forced rows at their forced action.
    pub objective: f64,
}

struct FeatureIndex {
    distinct: Vec<f64>,
    /// Rank of each free unit's value within `distinct`.
    rank: Vec<usize>,
    /// Free units sorted by rank, then by position.
    order: Vec<usize>,
}

impl FeatureIndex {
    fn num_thresholds(&self) -> usize {
        self.distinct.len() + 1
    }

    fn threshold(&self, idx: usize) -> f64 {
        let q = self.distinct.len();
        if idx == 0 {
            f64::NEG_INFINITY
        } else if idx >= q {
            f64::INFINITY
        } else {
            0.5 * (self.distinct[idx - 1] + self.distinct[idx])
        }
    }
}

struct Problem {
    d: usize,
    /// Free-unit scores, row-major `m × d`.
    scores: Vec<f64>,
    features: Vec<FeatureIndex>,
}

#[derive(Debug, Clone, Copy)]
struct Split1 {
    value: f64,
    feature: usize,
    threshold_idx: usize,
    leaves: [usize; 2],
}

impl Problem {
    fn m(&self) -> usize {
        self.scores.len() / self.d
    }

    fn row(&self, u: usize) -> &[f64] {
        &self.scores[u * self.d..(u + 1) * self.d]
    }

    fn totals(&self, member: impl Fn(usize) -> bool) -> Vec<f64> {
        let mut t = vec![0.0; self.d];
        for u in 0..self.m() {
            if member(u) {
                for (acc, s) in t.iter_mut().zip(self.row(u)) {
                    *acc += s;
                }
            }
        }
        t
    }

    /// Best depth-1 split of the units selected by `member`.
    fn best_split(&self, member: &dyn Fn(usize) -> bool) -> Split1 {
        let d = self.d;
        let totals = self.totals(member);
        let mut best: Option<Split1> = None;
        let mut prefix = vec![0.0; d];
        let mut right = vec![0.0; d];
        let mut consider = |prefix: &[f64], feature: usize, idx: usize, best: &mut Option<Split1>| {
            for a in 0..d {
                right[a] = totals[a] - prefix[a];
            }
            let l = lowest_argmax(prefix);
            let r = lowest_argmax(&right);
            let value = prefix[l] + right[r];
            if best.is_none_or(|b| value > b.value) {
                *best = Some(Split1 {
                    value,
                    feature,
                    threshold_idx: idx,
                    leaves: [l, r],
                });
            }
        };
        for (f, index) in self.features.iter().enumerate() {
            prefix.iter_mut().for_each(|v| *v = 0.0);
            consider(&prefix, f, 0, &mut best);
            let mut last_rank: Option<usize> = None;
            for &u in &index.order {
                if !member(u) {
                    continue;
                }
                let r = index.rank[u];
                if let Some(lr) = last_rank {
                    if r > lr {
                        consider(&prefix, f, lr + 1, &mut best);
                    }
                }
                for (p, s) in prefix.iter_mut().zip(self.row(u)) {
                    *p += s;
                }
                last_rank = Some(r);
            }
            if let Some(lr) = last_rank {
                consider(&prefix, f, lr + 1, &mut best);
            }
        }
        best.expect("at least one feature")
    }
}

/// Segment tree over threshold indices supporting range add and whole-range
/// max/min, without push-down: each node stores its own pending add and the
/// extrema of its subtree including that add.
struct RangeAddTree {
    size: usize,
    tag: Vec<f64>,
    max: Vec<f64>,
    min: Vec<f64>,
}

impl RangeAddTree {
    fn new(size: usize) -> Self {
        let cap = 4 * size.max(1);
        Self {
            size,
            tag: vec![0.0; cap],
            max: vec![0.0; cap],
            min: vec![0.0; cap],
        }
    }

    fn reset(&mut self) {
        self.tag.iter_mut().for_each(|v| *v = 0.0);
        self.max.iter_mut().for_each(|v| *v = 0.0);
        self.min.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Add `v` to indices `from..size`.
    fn add_suffix(&mut self, from: usize, v: f64) {
        if from < self.size && v != 0.0 {
            self.add(1, 0, self.size - 1, from, v);
        }
    }

    fn add(&mut self, node: usize, lo: usize, hi: usize, from: usize, v: f64) {
        if from <= lo {
            self.tag[node] += v;
            self.max[node] += v;
            self.min[node] += v;
            return;
        }
        let mid = (lo + hi) / 2;
        if from <= mid {
            self.add(2 * node, lo, mid, from, v);
        }
        self.add(2 * node + 1, mid + 1, hi, from, v);
        let t = self.tag[node];
        self.max[node] = t + self.max[2 * node].max(self.max[2 * node + 1]);
        self.min[node] = t + self.min[2 * node].min(self.min[2 * node + 1]);
    }

    fn extrema(&self) -> (f64, f64) {
        (self.max[1], self.min[1])
    }
}

/// Incrementally maintained optimal depth-1 value of a growing unit set.
struct GrowingSet<'a> {
    problem: &'a Problem,
    pairs: Vec<(usize, usize)>,
    /// `trees[k * pairs.len() + p]` tracks `L_θ(a) - L_θ(b)` for pair `p` over feature `k`.
    trees: Vec<RangeAddTree>,
    totals: Vec<f64>,
}

impl<'a> GrowingSet<'a> {
    fn new(problem: &'a Problem) -> Self {
        let d = problem.d;
        let pairs: Vec<(usize, usize)> = (0..d)
            .flat_map(|a| (a + 1..d).map(move |b| (a, b)))
            .collect();
        let trees = problem
            .features
            .iter()
            .flat_map(|f| pairs.iter().map(move |_| RangeAddTree::new(f.num_thresholds())))
            .collect();
        Self {
            problem,
            pairs,
            trees,
            totals: vec![0.0; d],
        }
    }

    fn reset(&mut self) {
        self.trees.iter_mut().for_each(RangeAddTree::reset);
        self.totals.iter_mut().for_each(|v| *v = 0.0);
    }

    fn insert(&mut self, u: usize) {
        let s = self.problem.row(u);
        for (t, v) in self.totals.iter_mut().zip(s) {
            *t += v;
        }
        let np = self.pairs.len();
        for (k, feature) in self.problem.features.iter().enumerate() {
            let from = feature.rank[u] + 1;
            for (p, &(a, b)) in self.pairs.iter().enumerate() {
                self.trees[k * np + p].add_suffix(from, s[a] - s[b]);
            }
        }
    }

    fn best_value(&self) -> f64 {
        let np = self.pairs.len();
        let t = &self.totals;
        let mut best = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for k in 0..self.problem.features.len() {
            for (p, &(a, b)) in self.pairs.iter().enumerate() {
                let (mx, mn) = self.trees[k * np + p].extrema();
                best = best.max(t[b] + mx).max(t[a] - mn);
            }
        }
        best
    }
}

impl Problem {
    /// Best root threshold index for root feature `j`, with its value.
    fn best_root(&self, j: usize) -> (f64, usize) {
        let index = &self.features[j];
        let q = index.num_thresholds();
        let mut left_vals = vec![0.0; q];
        let mut set = GrowingSet::new(self);
        let order = &index.order;

        let mut pos = 0;
        for (i, slot) in left_vals.iter_mut().enumerate() {
            while pos < order.len() && index.rank[order[pos]] < i {
                set.insert(order[pos]);
                pos += 1;
            }
            *slot = set.best_value();
        }

        set.reset();
        let mut best: Option<(f64, usize)> = None;
        let mut right_vals = vec![0.0; q];
        let mut pos = order.len();
        for i in (0..q).rev() {
            while pos > 0 && index.rank[order[pos - 1]] >= i {
                pos -= 1;
                set.insert(order[pos]);
            }
            right_vals[i] = set.best_value();
        }
        for i in 0..q {
            let v = left_vals[i] + right_vals[i];
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, i));
            }
        }
        best.expect("non-empty threshold list")
    }
}

/// Find the depth-`depth` tree maximizing `Σ_i scores(i, π(features_i))`.
///
/// Rows whose previous action is absorbing under `constraint` keep their
/// forced action: their score is counted at that action and they do not
/// influence leaf choices (they still contribute candidate thresholds).
pub fn exact_tree_search(
    scores: &ScoreMatrix,
    features: &Matrix,
    depth: usize,
    constraint: &StageConstraint,
    prior_actions: Option<&[usize]>,
) -> Result<SearchResult> {
    let values = scores.values();
    let n = values.rows();
    let d = values.cols();
    if n == 0 {
        return Err(DtrError::InvalidInput("tree search on an empty dataset".into()));
    }
    if features.rows() != n {
        return Err(DtrError::InvalidInput(format!(
            "{} score rows but {} feature rows",
            n,
            features.rows()
        )));
    }
    if depth > MAX_DEPTH {
        return Err(DtrError::InvalidInput(format!(
            "tree depth {depth} exceeds the supported maximum {MAX_DEPTH}"
        )));
    }
    if depth > 0 && features.cols() == 0 {
        return Err(DtrError::InvalidInput(format!(
            "a depth-{depth} tree needs at least one split feature"
        )));
    }
    if let Some(p) = prior_actions {
        if p.len() != n {
            return Err(DtrError::InvalidInput("prior actions length mismatch".into()));
        }
    }
    let forced: Vec<Option<usize>> = (0..n)
        .map(|i| constraint.forced_action(prior_actions.map(|p| p[i])))
        .collect();
    let free: Vec<usize> = (0..n).filter(|&i| forced[i].is_none()).collect();

    let mut local_scores = Vec::with_capacity(free.len() * d);
    for &i in &free {
        local_scores.extend_from_slice(values.row(i));
    }
    let feature_index = (0..features.cols())
        .map(|f| {
            let mut distinct: Vec<f64> = (0..n).map(|i| features.get(i, f)).collect();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            let rank: Vec<usize> = free
                .iter()
                .map(|&i| {
                    distinct
                        .binary_search_by(|v| v.total_cmp(&features.get(i, f)))
                        .expect("value present")
                })
                .collect();
            let mut order: Vec<usize> = (0..free.len()).collect();
            order.sort_by_key(|&u| (rank[u], u));
            FeatureIndex {
                distinct,
                rank,
                order,
            }
        })
        .collect();
    let problem = Problem {
        d,
        scores: local_scores,
        features: feature_index,
    };

    let stage = scores.stage();
    let tree = match depth {
        0 => {
            let totals = problem.totals(|_| true);
            PolicyTree::constant(stage, lowest_argmax(&totals))
        }
        1 => {
            let s = problem.best_split(&|_| true);
            PolicyTree {
                stage,
                depth: 1,
                nodes: vec![SplitNode {
                    feature: s.feature,
                    threshold: problem.features[s.feature].threshold(s.threshold_idx),
                }],
                leaves: s.leaves.to_vec(),
            }
        }
        _ => {
            let roots: Vec<(f64, usize)> = (0..problem.features.len())
                .into_par_iter()
                .map(|j| problem.best_root(j))
                .collect();
            let mut best: Option<(f64, usize, usize)> = None;
            for (j, &(v, i)) in roots.iter().enumerate() {
                if best.is_none_or(|(b, _, _)| v > b) {
                    best = Some((v, j, i));
                }
            }
            let (_, j, i) = best.expect("at least one feature");
            let root = &problem.features[j];
            let goes_left = |u: usize| root.rank[u] < i;
            let left = problem.best_split(&goes_left);
            let right = problem.best_split(&|u| !goes_left(u));
            let node = |s: &Split1| SplitNode {
                feature: s.feature,
                threshold: problem.features[s.feature].threshold(s.threshold_idx),
            };
            PolicyTree {
                stage,
                depth: 2,
                nodes: vec![
                    SplitNode {
                        feature: j,
                        threshold: root.threshold(i),
                    },
                    node(&left),
                    node(&right),
                ],
                leaves: vec![left.leaves[0], left.leaves[1], right.leaves[0], right.leaves[1]],
            }
        }
    };

    let objective = (0..n)
        .map(|i| {
            let a = forced[i].unwrap_or_else(|| tree.route(features.row(i)));
            values.get(i, a)
        })
        .sum();
    Ok(SearchResult { tree, objective })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::Provenance;

    fn sm(rows: &[Vec<f64>]) -> ScoreMatrix {
        ScoreMatrix::new(1, Matrix::from_rows(rows), Provenance::Aipw)
    }

    #[test]
    fn perfect_separation() {
        let scores = sm(&[vec![0.0, 5.0], vec![5.0, 0.0]]);
        let x = Matrix::from_vec(2, 1, vec![0.0, 1.0]);
        let r = exact_tree_search(&scores, &x, 1, &StageConstraint::unconstrained(), None).unwrap();
        assert_eq!(r.objective, 10.0);
        assert_eq!(r.tree.nodes[0].threshold, 0.5);
        assert_eq!(r.tree.leaves, vec![1, 0]);
    }

    #[test]
    fn flat_objective_uses_tie_break() {
        let scores = sm(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]);
        let x = Matrix::from_rows(&[vec![0.3, 1.0], vec![0.1, 2.0], vec![0.2, 3.0]]);
        for depth in 0..=2 {
            let r = exact_tree_search(&scores, &x, depth, &StageConstraint::unconstrained(), None)
                .unwrap();
            assert!(r.tree.leaves.iter().all(|&a| a == 0));
            assert!(r.tree.nodes.iter().all(|n| n.feature == 0 && n.threshold == f64::NEG_INFINITY));
            assert_eq!(r.objective, 6.0);
        }
    }

    #[test]
    fn forced_rows_keep_their_action() {
        // unit 1 is forced to action 1 and would prefer 0
        let scores = sm(&[vec![0.0, 1.0], vec![9.0, 0.0], vec![0.0, 1.0]]);
        let x = Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.0]);
        let c = StageConstraint::absorbing_start(2);
        let r = exact_tree_search(&scores, &x, 1, &c, Some(&[0, 1, 0])).unwrap();
        assert_eq!(r.objective, 2.0);
    }

    #[test]
    fn errors() {
        let scores = sm(&[]);
        let x = Matrix::zeros(0, 1);
        assert!(exact_tree_search(&scores, &x, 1, &StageConstraint::default(), None).is_err());
        let scores = sm(&[vec![0.0, 1.0]]);
        let x = Matrix::zeros(1, 1);
        assert!(exact_tree_search(&scores, &x, 3, &StageConstraint::default(), None).is_err());
    }
}
