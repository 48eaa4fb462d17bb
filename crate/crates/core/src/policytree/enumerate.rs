//! Exhaustive listing of small tree classes.

use std::collections::HashSet;

use super::{PolicyClass, PolicyTree, SearchResult, SplitNode};
use crate::scores::ScoreMatrix;
use crate::error::{DtrError, Result};
use crate::matrix::Matrix;

/// Largest number of raw candidates [`enumerate_policies`] will generate.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Candidate thresholds of one column: `-inf`, midpoints of consecutive
/// distinct values, `+inf`.
fn thresholds(history: &Matrix, column: usize) -> Vec<f64> {
    let mut values = history.column(column);
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut out = Vec::with_capacity(values.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(values.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.push(f64::INFINITY);
    out
}

fn splits(class: &PolicyClass, history: &Matrix) -> Result<Vec<SplitNode>> {
    let columns = class.columns(history.cols())?;
    Ok(columns
        .iter()
        .flat_map(|&feature| {
            thresholds(history, feature)
                .into_iter()
                .map(move |threshold| SplitNode { feature, threshold })
        })
        .collect())
}

/// Number of raw candidates (before removing duplicates) in `class` over
/// the rows of `history`.
pub fn enumerated_class_size(class: &PolicyClass, history: &Matrix, num_actions: usize) -> Result<u128> {
    let s = splits(class, history)?.len() as u128;
    let d = num_actions as u128;
    match class.depth {
        0 => Ok(d),
        1 => Ok(s * d.pow(2)),
        2 => Ok(s.pow(3) * d.pow(4)),
        depth => Err(DtrError::InvalidInput(format!("cannot enumerate depth-{depth} trees"))),
    }
}

fn leaf_tuples(num_leaves: usize, d: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..num_leaves {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..d).map(move |a| {
                    let mut v = prefix.clone();
                    v.push(a);
                    v
                })
            })
            .collect();
    }
    out
}

/// Every tree of `class` at `stage`, in (feature, threshold, leaves) order.
/// Trees that assign the same action to every row of `history` as an earlier
/// tree are dropped.
pub fn enumerate_policies(
    class: &PolicyClass,
    stage: usize,
    history: &Matrix,
    num_actions: usize,
) -> Result<Vec<PolicyTree>> {
    let count = enumerated_class_size(class, history, num_actions)?;
    if count > ENUMERATION_LIMIT {
        return Err(DtrError::ClassTooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let splits = splits(class, history)?;
    let leaves = leaf_tuples(1 << class.depth, num_actions);
    let node_sets: Vec<Vec<SplitNode>> = match class.depth {
        0 => vec![Vec::new()],
        1 => splits.iter().map(|&s| vec![s]).collect(),
        _ => {
            let mut sets = Vec::new();
            for &root in &splits {
                for &left in &splits {
                    for &right in &splits {
                        sets.push(vec![root, left, right]);
                    }
                }
            }
            sets
        }
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for nodes in &node_sets {
        for leaf in &leaves {
            let tree = PolicyTree {
                stage,
                depth: class.depth,
                nodes: nodes.clone(),
                leaves: leaf.clone(),
            };
            let signature: Vec<usize> = history.iter_rows().map(|h| tree.route(h)).collect();
            if seen.insert(signature) {
                out.push(tree);
            }
        }
    }
    Ok(out)
}

/// Reference search: scores every enumerated tree and keeps the first one
/// with the largest objective. Exponential in depth; meant for checking
/// [`exact_tree_search`](super::exact_tree_search) on small inputs.
pub fn brute_force_search(scores: &ScoreMatrix, features: &Matrix, depth: usize) -> Result<SearchResult> {
    if scores.len() != features.rows() {
        return Err(DtrError::InvalidInput(format!(
            "{} score rows for {} feature rows",
            scores.len(),
            features.rows()
        )));
    }
    let trees = enumerate_policies(&PolicyClass::trees(depth), scores.stage(), features, scores.num_actions())?;
    let mut best: Option<SearchResult> = None;
    for tree in trees {
        let objective: f64 = features
            .iter_rows()
            .enumerate()
            .map(|(i, h)| scores.get(i, tree.route(h)))
            .sum();
        if best.as_ref().is_none_or(|b| objective > b.objective) {
            best = Some(SearchResult { tree, objective });
        }
    }
    best.ok_or_else(|| DtrError::InvalidInput("empty policy class".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_class_lists_each_action() {
        let h = Matrix::zeros(5, 0);
        let trees = enumerate_policies(&PolicyClass::constant(), 1, &h, 2).unwrap();
        assert_eq!(trees, vec![PolicyTree::constant(1, 0), PolicyTree::constant(1, 1)]);
    }

    #[test]
    fn depth_one_count_before_and_after_dedup() {
        let h = Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.0]);
        let class = PolicyClass::trees(1);
        assert_eq!(enumerated_class_size(&class, &h, 2).unwrap(), 16);
        let trees = enumerate_policies(&class, 1, &h, 2).unwrap();
        // distinct action vectors reachable by one threshold on 3 sorted points
        assert_eq!(trees.len(), 6);
    }

    #[test]
    fn depth_zero_matches_constant_class() {
        let h = Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.0]);
        let a = enumerate_policies(&PolicyClass::trees(0), 1, &h, 3).unwrap();
        let b = enumerate_policies(&PolicyClass::constant(), 1, &h, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn guard_names_the_limit() {
        let h = Matrix::from_vec(200, 2, (0..400).map(f64::from).collect());
        let err = enumerate_policies(&PolicyClass::trees(2), 1, &h, 2).unwrap_err();
        assert!(err.to_string().contains("1000000"));
    }
}
