use drdtr_core::matrix::Matrix;
use drdtr_core::policytree::{brute_force_search, exact_tree_search, StageConstraint};
use drdtr_core::rng::rng_from_seed;
use drdtr_core::scores::{Provenance, ScoreMatrix};
use rand::Rng;

struct Instance {
    scores: ScoreMatrix,
    features: Matrix,
    depth: usize,
}

/// Small integer instances with repeated feature values so ties and
/// duplicate thresholds come up often.
fn instance(seed: u64) -> Instance {
    let mut rng = rng_from_seed(seed);
    let n = rng.random_range(1..=30);
    let d = rng.random_range(2..=3);
    let depth = rng.random_range(1..=2);
    let features = Matrix::from_vec(n, 2, (0..2 * n).map(|_| f64::from(rng.random_range(0..6))).collect());
    let values = Matrix::from_vec(n, d, (0..n * d).map(|_| f64::from(rng.random_range(-5..=5))).collect());
    Instance {
        scores: ScoreMatrix::new(1, values, Provenance::Aipw),
        features,
        depth,
    }
}

fn objective(scores: &ScoreMatrix, features: &Matrix, tree: &drdtr_core::PolicyTree) -> f64 {
    features
        .iter_rows()
        .enumerate()
        .map(|(i, h)| scores.get(i, tree.route(h)))
        .sum()
}

#[test]
fn exact_search_matches_enumeration() {
    for seed in 0..200 {
        let inst = instance(seed);
        let exact = exact_tree_search(&inst.scores, &inst.features, inst.depth, &StageConstraint::default(), None).unwrap();
        let brute = brute_force_search(&inst.scores, &inst.features, inst.depth).unwrap();
        assert_eq!(exact.objective, brute.objective, "instance {seed}");
        assert_eq!(objective(&inst.scores, &inst.features, &exact.tree), exact.objective, "instance {seed}");
    }
}

#[test]
fn per_row_shift_keeps_the_tree() {
    for seed in 0..50 {
        let inst = instance(seed);
        let mut shifted = inst.scores.values().clone();
        for i in 0..shifted.rows() {
            let c = (i % 7) as f64 - 3.0;
            shifted.row_mut(i).iter_mut().for_each(|v| *v += c);
        }
        let shifted = ScoreMatrix::new(1, shifted, Provenance::Aipw);
        let c = StageConstraint::default();
        let a = exact_tree_search(&inst.scores, &inst.features, inst.depth, &c, None).unwrap();
        let b = exact_tree_search(&shifted, &inst.features, inst.depth, &c, None).unwrap();
        assert_eq!(a.tree, b.tree, "instance {seed}");
    }
}

#[test]
fn row_order_does_not_matter() {
    for seed in 0..50 {
        let inst = instance(seed);
        let n = inst.features.rows();
        let perm: Vec<usize> = (0..n).rev().collect();
        let scores = ScoreMatrix::new(1, inst.scores.values().select_rows(&perm), Provenance::Aipw);
        let features = inst.features.select_rows(&perm);
        let c = StageConstraint::default();
        let a = exact_tree_search(&inst.scores, &inst.features, inst.depth, &c, None).unwrap();
        let b = exact_tree_search(&scores, &features, inst.depth, &c, None).unwrap();
        assert_eq!(a.tree, b.tree, "instance {seed}");
        assert_eq!(a.objective, b.objective);
    }
}

#[test]
fn forced_rows_follow_the_constraint() {
    let features = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 2.0], vec![0.0, 3.0]]);
    let values = Matrix::from_rows(&[vec![0.0, 5.0], vec![4.0, 0.0], vec![0.0, 5.0], vec![4.0, 0.0]]);
    let scores = ScoreMatrix::new(2, values, Provenance::Aipw);
    // units already switched on stay on; only units 1 and 3 are free
    let prior = [1, 0, 1, 0];
    let res = exact_tree_search(&scores, &features, 1, &StageConstraint::absorbing_start(2), Some(&prior)).unwrap();
    assert_eq!(res.objective, 18.0);
}
