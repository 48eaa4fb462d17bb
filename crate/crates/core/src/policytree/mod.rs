//! Stage policies: axis-aligned decision trees, pointwise Q-argmax rules,
//! feasibility constraints, exact tree search and class enumeration.

mod enumerate;
mod search;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{DtrError, Result};
use crate::matrix::Matrix;
use crate::nuisance::QModel;
use crate::scores::ScoreMatrix;

pub use enumerate::{brute_force_search, enumerate_policies, enumerated_class_size, ENUMERATION_LIMIT};
pub use search::{exact_tree_search, SearchResult};

/// Largest tree depth the exact search supports.
pub const MAX_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    #[default]
    Unconstrained,
    /// Once a non-zero arm has started it is continued.
    AbsorbingStart,
    /// Once treatment has stopped (arm 0) it stays stopped.
    AbsorbingStop,
}

/// Restriction on which action a stage policy may output given the previous
/// stage's action. Absorbing actions are repeated: if `a_{t-1}` belongs to
/// the absorbing set, `π_t` must return `a_{t-1}`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageConstraint {
    pub kind: ConstraintKind,
    #[serde(default)]
    pub absorbing: Vec<usize>,
}

impl StageConstraint {
    pub fn unconstrained() -> Self {
        Self::default()
    }

    /// Optimal-starting constraint over `num_actions` arms with 0 as "not started".
    pub fn absorbing_start(num_actions: usize) -> Self {
        Self {
            kind: ConstraintKind::AbsorbingStart,
            absorbing: (1..num_actions).collect(),
        }
    }

    pub fn absorbing_stop() -> Self {
        Self {
            kind: ConstraintKind::AbsorbingStop,
            absorbing: vec![0],
        }
    }

    pub fn forced_action(&self, prior_action: Option<usize>) -> Option<usize> {
        match (self.kind, prior_action) {
            (ConstraintKind::Unconstrained, _) | (_, None) => None,
            (_, Some(a)) => self.absorbing.contains(&a).then_some(a),
        }
    }

    pub fn is_unconstrained(&self) -> bool {
        self.kind == ConstraintKind::Unconstrained
    }
}

/// Internal node: units with `x[feature] < threshold` go left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitNode {
    pub feature: usize,
    #[serde(with = "extended_real")]
    pub threshold: f64,
}

/// Complete binary tree of fixed depth, nodes and leaves in breadth-first
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTree {
    pub stage: usize,
    pub depth: usize,
    pub nodes: Vec<SplitNode>,
    pub leaves: Vec<usize>,
}

impl PolicyTree {
    pub fn constant(stage: usize, action: usize) -> Self {
        Self {
            stage,
            depth: 0,
            nodes: Vec::new(),
            leaves: vec![action],
        }
    }

    pub fn new(stage: usize, depth: usize, nodes: Vec<SplitNode>, leaves: Vec<usize>) -> Result<Self> {
        let tree = Self {
            stage,
            depth,
            nodes,
            leaves,
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn validate(&self) -> Result<()> {
        let internal = (1usize << self.depth) - 1;
        if self.nodes.len() != internal || self.leaves.len() != internal + 1 {
            return Err(DtrError::InvalidInput(format!(
                "depth-{} tree needs {} nodes and {} leaves, got {} and {}",
                self.depth,
                internal,
                internal + 1,
                self.nodes.len(),
                self.leaves.len()
            )));
        }
        Ok(())
    }

    /// Raw tree traversal, ignoring constraints.
    pub fn route(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for _ in 0..self.depth {
            let node = self.nodes[idx];
            idx = if x[node.feature] < node.threshold {
                2 * idx + 1
            } else {
                2 * idx + 2
            };
        }
        self.leaves[idx - self.nodes.len()]
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.nodes.iter().map(|n| n.feature).max()
    }
}

/// Searchable set of trees for one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyClass {
    pub depth: usize,
    /// History columns the tree may split on; `None` means all of them.
    #[serde(default)]
    pub features: Option<Vec<usize>>,
    #[serde(default)]
    pub constraint: StageConstraint,
}

impl PolicyClass {
    pub fn constant() -> Self {
        Self::trees(0)
    }

    pub fn trees(depth: usize) -> Self {
        Self {
            depth,
            features: None,
            constraint: StageConstraint::unconstrained(),
        }
    }

    pub fn with_features(mut self, features: Vec<usize>) -> Self {
        self.features = Some(features);
        self
    }

    pub fn with_constraint(mut self, constraint: StageConstraint) -> Self {
        self.constraint = constraint;
        self
    }

    /// Split columns within a history matrix of width `width`.
    pub fn columns(&self, width: usize) -> Result<Vec<usize>> {
        match &self.features {
            None => Ok((0..width).collect()),
            Some(cols) => {
                if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
                    return Err(DtrError::InvalidInput(format!(
                        "split feature {bad} is outside the {width} history columns"
                    )));
                }
                Ok(cols.clone())
            }
        }
    }

    /// Exact search over this class. `history` is the full stage history,
    /// whose column `stage - 2` holds the previous action.
    pub fn search(&self, scores: &ScoreMatrix, history: &Matrix) -> Result<SearchResult> {
        let stage = scores.stage();
        let columns = self.columns(history.cols())?;
        let prior: Option<Vec<usize>> = (stage >= 2 && !self.constraint.is_unconstrained())
            .then(|| history.column(stage - 2).iter().map(|&a| a as usize).collect());
        let features = history.select_columns(&columns);
        let mut result =
            exact_tree_search(scores, &features, self.depth, &self.constraint, prior.as_deref())?;
        for node in &mut result.tree.nodes {
            node.feature = columns[node.feature];
        }
        Ok(result)
    }
}

/// Evaluate `tree` on history `h`, applying the constraint's forced action
/// when the previous action is absorbing.
pub fn evaluate(
    tree: &PolicyTree,
    h: &[f64],
    constraint: &StageConstraint,
    prior_action: Option<usize>,
) -> usize {
    constraint
        .forced_action(prior_action)
        .unwrap_or_else(|| tree.route(h))
}

/// Greedy rule `h ↦ argmax_a Q̂_t(h, a)` (lowest action on ties).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointwisePolicy {
    pub q: QModel,
}

impl PointwisePolicy {
    pub fn route(&self, h: &[f64], constraint: &StageConstraint, prior: Option<usize>) -> usize {
        let q = self.q.predict_all(h);
        argmax_feasible(&q, constraint, prior)
    }
}

fn argmax_feasible(values: &[f64], constraint: &StageConstraint, prior: Option<usize>) -> usize {
    if let Some(a) = constraint.forced_action(prior) {
        return a;
    }
    lowest_argmax(values)
}

pub(crate) fn lowest_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (a, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = a;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyRule {
    Tree(PolicyTree),
    Pointwise(PointwisePolicy),
}

/// Policy for one stage together with its feasibility constraint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePolicy {
    pub stage: usize,
    pub rule: PolicyRule,
    #[serde(default)]
    pub constraint: StageConstraint,
}

impl StagePolicy {
    pub fn tree(tree: PolicyTree, constraint: StageConstraint) -> Self {
        Self {
            stage: tree.stage,
            rule: PolicyRule::Tree(tree),
            constraint,
        }
    }

    pub fn constant(stage: usize, action: usize) -> Self {
        Self::tree(PolicyTree::constant(stage, action), StageConstraint::unconstrained())
    }

    pub fn pointwise(q: QModel, constraint: StageConstraint) -> Self {
        Self {
            stage: q.stage(),
            rule: PolicyRule::Pointwise(PointwisePolicy { q }),
            constraint,
        }
    }

    /// Action for a full stage history `h`. The previous action is read
    /// from the history itself (column `stage - 2`).
    pub fn evaluate(&self, h: &[f64]) -> usize {
        let prior = (self.stage >= 2).then(|| h[self.stage - 2] as usize);
        match &self.rule {
            PolicyRule::Tree(t) => evaluate(t, h, &self.constraint, prior),
            PolicyRule::Pointwise(p) => p.route(h, &self.constraint, prior),
        }
    }

    pub fn as_tree(&self) -> Option<&PolicyTree> {
        match &self.rule {
            PolicyRule::Tree(t) => Some(t),
            PolicyRule::Pointwise(_) => None,
        }
    }
}

/// A dynamic treatment regime: one policy per stage, in stage order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dtr {
    pub policies: Vec<StagePolicy>,
}

impl Dtr {
    pub fn new(policies: Vec<StagePolicy>) -> Result<Self> {
        for (idx, p) in policies.iter().enumerate() {
            if p.stage != idx + 1 {
                return Err(DtrError::InvalidInput(format!(
                    "policy at position {} is tagged stage {}",
                    idx + 1,
                    p.stage
                )));
            }
        }
        Ok(Self { policies })
    }

    pub fn constant(actions: &[usize]) -> Self {
        Self {
            policies: actions
                .iter()
                .enumerate()
                .map(|(t, &a)| StagePolicy::constant(t + 1, a))
                .collect(),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.policies.len()
    }

    pub fn stage(&self, stage: usize) -> &StagePolicy {
        &self.policies[stage - 1]
    }

    /// Policies for stages `from..=T`.
    pub fn suffix(&self, from: usize) -> &[StagePolicy] {
        &self.policies[(from - 1).min(self.policies.len())..]
    }
}

/// Reals with `±inf` written as the strings `"inf"` / `"-inf"`.
mod extended_real {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("bad threshold `{other}`"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_tree() {
        let t = PolicyTree::constant(1, 1);
        assert_eq!(evaluate(&t, &[5.0], &StageConstraint::unconstrained(), None), 1);
    }

    #[test]
    fn single_split() {
        let t = PolicyTree::new(
            1,
            1,
            vec![SplitNode {
                feature: 0,
                threshold: 0.0,
            }],
            vec![0, 1],
        )
        .unwrap();
        let c = StageConstraint::unconstrained();
        assert_eq!(evaluate(&t, &[-1.0], &c, None), 0);
        assert_eq!(evaluate(&t, &[1.0], &c, None), 1);
    }

    #[test]
    fn absorbing_start_forces_prior_action() {
        let t = PolicyTree::constant(2, 0);
        let c = StageConstraint::absorbing_start(3);
        assert_eq!(evaluate(&t, &[1.0], &c, Some(1)), 1);
        assert_eq!(evaluate(&t, &[2.0], &c, Some(2)), 2);
        assert_eq!(evaluate(&t, &[0.0], &c, Some(0)), 0);
        let stop = StageConstraint::absorbing_stop();
        let t1 = PolicyTree::constant(2, 1);
        assert_eq!(evaluate(&t1, &[0.0], &stop, Some(0)), 0);
        assert_eq!(evaluate(&t1, &[1.0], &stop, Some(1)), 1);
    }

    #[test]
    fn stage_policy_reads_prior_action_from_history() {
        let p = StagePolicy::tree(PolicyTree::constant(2, 0), StageConstraint::absorbing_start(2));
        // history layout for stage 2: [a1, s1..., s2...]
        assert_eq!(p.evaluate(&[1.0, 0.3, 0.2]), 1);
        assert_eq!(p.evaluate(&[0.0, 0.3, 0.2]), 0);
    }

    #[test]
    fn tree_json_shape_and_round_trip() {
        let t = PolicyTree::new(
            2,
            1,
            vec![SplitNode {
                feature: 3,
                threshold: f64::NEG_INFINITY,
            }],
            vec![0, 1],
        )
        .unwrap();
        let json = serde_json::to_value(&t).unwrap();
        assert_eq!(json["nodes"][0]["threshold"], "-inf");
        assert_eq!(json["leaves"], serde_json::json!([0, 1]));
        let back: PolicyTree = serde_json::from_value(json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn malformed_tree_is_rejected() {
        assert!(PolicyTree::new(1, 1, vec![], vec![0, 1]).is_err());
        assert!(Dtr::new(vec![StagePolicy::constant(2, 0)]).is_err());
    }
}
