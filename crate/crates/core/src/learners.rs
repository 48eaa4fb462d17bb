//! End-to-end DTR learners: doubly robust backward induction, Q-learning
//! with and without policy search, IPW backward induction, and simultaneous
//! AIPW maximization over enumerable classes.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use log::debug;
use serde::{Deserialize, Serialize};

use crate::dataset::{FoldAssignment, PanelDataset};
use crate::error::{DtrError, Result};
use crate::matrix::Matrix;
use crate::nuisance::{
    fit_propensities, fit_q_cross, fit_q_full, q_targets, CrossFitPropensities, CrossFitQ,
    ForestParams, PredictorSet, QModel, RegressorSpec, DEFAULT_ETA,
};
use crate::policytree::{enumerate_policies, Dtr, PolicyClass, StagePolicy};
use crate::rng::{derive_seed, label_of};
use crate::scores::{
    aipw_from_parts, check_score_bound, fold_key, ipw_from_parts, score_bound, Provenance,
    ScoreMatrix,
};

/// Largest product class searched by the simultaneous AIPW learner.
pub const SIMULTANEOUS_LIMIT: u128 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dr,
    QLearn,
    QSearch,
    Ipw,
    AipwSimultaneous,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Dr,
        Method::QLearn,
        Method::QSearch,
        Method::Ipw,
        Method::AipwSimultaneous,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dr => "dr",
            Method::QLearn => "q_learn",
            Method::QSearch => "q_search",
            Method::Ipw => "ipw",
            Method::AipwSimultaneous => "aipw_simultaneous",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| DtrError::InvalidInput(format!("unknown method `{name}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub method: Method,
    /// Number of cross-fitting folds.
    pub k: usize,
    pub eta: f64,
    pub propensity: RegressorSpec,
    pub q: RegressorSpec,
    /// Policy class of each stage, `classes[t - 1]`.
    pub classes: Vec<PolicyClass>,
    pub seed: u64,
}

impl LearnerConfig {
    /// Forest nuisances, `K = 5`, `η = 0.01`.
    pub fn new(method: Method, classes: Vec<PolicyClass>, seed: u64) -> Self {
        let forest = RegressorSpec::forest(ForestParams::default());
        Self {
            method,
            k: 5,
            eta: DEFAULT_ETA,
            propensity: forest.clone(),
            q: forest,
            classes,
            seed,
        }
    }

    /// Linear Q-functions on `(D, D·H, H)`.
    pub fn misspecify_q(mut self) -> Self {
        self.q = RegressorSpec::linear();
        self
    }

    /// Logistic propensities on the first-stage states only.
    pub fn misspecify_propensity(mut self) -> Self {
        self.propensity = RegressorSpec::linear().with_predictors(PredictorSet::InitialState);
        self
    }

    pub fn validate(&self, data: &PanelDataset) -> Result<()> {
        if self.k < 2 {
            return Err(DtrError::InvalidInput(format!("K = {} must be at least 2", self.k)));
        }
        if !(self.eta > 0.0 && self.eta < 0.5) {
            return Err(DtrError::InvalidInput(format!("eta = {} must lie in (0, 0.5)", self.eta)));
        }
        if self.classes.len() != data.num_stages() {
            return Err(DtrError::InvalidInput(format!(
                "{} policy classes for {} stages",
                self.classes.len(),
                data.num_stages()
            )));
        }
        for (t, class) in self.classes.iter().enumerate() {
            class.columns(data.schema().history_width(t + 1))?;
        }
        self.propensity.validate()?;
        self.q.validate()
    }

    pub fn fold_seed(&self) -> u64 {
        derive_seed(self.seed, &[label_of("folds")])
    }

    pub fn folds(&self, n: usize) -> Result<FoldAssignment> {
        FoldAssignment::new(n, self.k, self.fold_seed())
    }

    fn propensity_spec(&self) -> RegressorSpec {
        self.propensity.with_seed(derive_seed(self.seed, &[label_of("propensity")]))
    }

    fn q_spec(&self) -> RegressorSpec {
        self.q.with_seed(derive_seed(self.seed, &[label_of("q")]))
    }
}

/// Nuisance values as seen by each unit: propensities and policy-dependent
/// Q-functions evaluated at every action.
pub trait NuisanceSource: Sync {
    /// `n × d_t` matrix of `ê_t(H_{i,t}, a)`.
    fn propensities(&self, stage: usize) -> Result<Matrix>;

    /// `n × d_t` matrix of `Q̂_t(H_{i,t}, a)` when stages after `stage`
    /// follow `future` (policies for `stage+1..=T`).
    fn q_values(&self, stage: usize, future: &[StagePolicy]) -> Result<Matrix>;

    /// Lower bound on every propensity returned.
    fn eta(&self) -> f64;

    fn provenance(&self) -> Provenance;

    fn folds(&self) -> Option<&FoldAssignment> {
        None
    }
}

type QCache = Mutex<HashMap<(usize, String), Arc<CrossFitQ>>>;

/// Cross-fitted nuisances. Q-functions are fitted by fitted Q-evaluation
/// on demand and memoized by policy suffix, since `Q_t^π` depends on `π`
/// only through the stages after `t`.
pub struct CrossFitted<'a> {
    data: &'a PanelDataset,
    folds: FoldAssignment,
    propensities: CrossFitPropensities,
    e: Vec<Matrix>,
    q_spec: RegressorSpec,
    cache: QCache,
}

impl<'a> CrossFitted<'a> {
    pub fn fit(data: &'a PanelDataset, cfg: &LearnerConfig) -> Result<Self> {
        let folds = cfg.folds(data.len())?;
        let propensities = fit_propensities(data, &folds, &cfg.propensity_spec(), cfg.eta)?;
        let e = (1..=data.num_stages())
            .map(|t| propensities.out_of_fold(data, &folds, t))
            .collect();
        Ok(Self {
            data,
            folds,
            propensities,
            e,
            q_spec: cfg.q_spec(),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn cross_fit_propensities(&self) -> &CrossFitPropensities {
        &self.propensities
    }

    /// Fitted `Q̂_t^{future}` models, one per fold.
    pub fn q_model(&self, stage: usize, future: &[StagePolicy]) -> Result<Arc<CrossFitQ>> {
        let key = (stage, serde_json::to_string(future)?);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(hit));
        }
        let targets = if stage == self.data.num_stages() {
            q_targets(self.data, &self.folds, stage, None, None)?
        } else {
            let next = future.first().ok_or_else(|| {
                DtrError::InvalidInput(format!("stage {stage} needs the later-stage policies"))
            })?;
            let q_next = self.q_model(stage + 1, &future[1..])?;
            q_targets(self.data, &self.folds, stage, Some(next), Some(&q_next))?
        };
        let fitted = Arc::new(fit_q_cross(self.data, &self.folds, stage, &targets, &self.q_spec)?);
        debug!("stage {stage} Q fit, per-fold training R² {:?}", fitted.train_r2);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, Arc::clone(&fitted));
        Ok(fitted)
    }
}

impl NuisanceSource for CrossFitted<'_> {
    fn propensities(&self, stage: usize) -> Result<Matrix> {
        self.data.schema().check_stage(stage)?;
        Ok(self.e[stage - 1].clone())
    }

    fn q_values(&self, stage: usize, future: &[StagePolicy]) -> Result<Matrix> {
        Ok(self.q_model(stage, future)?.out_of_fold(self.data, &self.folds))
    }

    fn eta(&self) -> f64 {
        self.propensities.eta()
    }

    fn provenance(&self) -> Provenance {
        Provenance::Aipw
    }

    fn folds(&self) -> Option<&FoldAssignment> {
        Some(&self.folds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    /// `(1/n) Σ_i score_i(π̂_t(H_{i,t}))` for the selected stage policy.
    pub objective: f64,
}

/// A learned regime with the settings that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnedDtr {
    pub method: Method,
    pub seed: u64,
    pub num_folds: usize,
    pub eta: f64,
    pub dtr: Dtr,
    pub trace: Vec<StageTrace>,
    /// Estimated welfare of the selected regime (simultaneous AIPW only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimated_welfare: Option<f64>,
}

impl LearnedDtr {
    fn new(cfg: &LearnerConfig, dtr: Dtr, trace: Vec<StageTrace>) -> Self {
        Self {
            method: cfg.method,
            seed: cfg.seed,
            num_folds: cfg.k,
            eta: cfg.eta,
            dtr,
            trace,
            estimated_welfare: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Run the learner selected by `cfg.method` with cross-fitted nuisances.
pub fn learn(data: &PanelDataset, cfg: &LearnerConfig) -> Result<LearnedDtr> {
    cfg.validate(data)?;
    match cfg.method {
        Method::Dr => {
            let source = CrossFitted::fit(data, cfg)?;
            learn_dr_with(data, cfg, &source)
        }
        Method::Ipw => {
            let source = CrossFitted::fit(data, cfg)?;
            learn_ipw_with(data, cfg, &source)
        }
        Method::AipwSimultaneous => {
            let source = CrossFitted::fit(data, cfg)?;
            learn_aipw_simultaneous_with(data, cfg, &source)
        }
        Method::QLearn => learn_q(data, cfg, false),
        Method::QSearch => learn_q(data, cfg, true),
    }
}

pub fn learn_dr(data: &PanelDataset, cfg: &LearnerConfig) -> Result<LearnedDtr> {
    learn(data, &LearnerConfig { method: Method::Dr, ..cfg.clone() })
}

pub fn learn_ipw(data: &PanelDataset, cfg: &LearnerConfig) -> Result<LearnedDtr> {
    learn(data, &LearnerConfig { method: Method::Ipw, ..cfg.clone() })
}

pub fn learn_aipw_simultaneous(data: &PanelDataset, cfg: &LearnerConfig) -> Result<LearnedDtr> {
    learn(data, &LearnerConfig { method: Method::AipwSimultaneous, ..cfg.clone() })
}

fn assemble(policies: Vec<Option<StagePolicy>>) -> Result<Dtr> {
    Dtr::new(policies.into_iter().map(|p| p.expect("every stage learned")).collect())
}

/// Doubly robust backward induction with nuisances from `source`.
pub fn learn_dr_with(
    data: &PanelDataset,
    cfg: &LearnerConfig,
    source: &dyn NuisanceSource,
) -> Result<LearnedDtr> {
    if cfg.classes.len() != data.num_stages() {
        return Err(DtrError::InvalidInput("one policy class per stage is required".into()));
    }
    let t_max = data.num_stages();
    let mut policies: Vec<Option<StagePolicy>> = vec![None; t_max];
    let mut trace = Vec::with_capacity(t_max);
    let mut next: Option<ScoreMatrix> = None;
    let mut max_q = 0.0_f64;
    for t in (1..=t_max).rev() {
        let future: Vec<StagePolicy> = policies[t..].iter().flatten().cloned().collect();
        let q = source.q_values(t, &future)?;
        let e = source.propensities(t)?;
        max_q = q.as_slice().iter().fold(max_q, |m, v| m.max(v.abs()));
        let pseudo = match &next {
            None => data.outcomes(t).to_vec(),
            Some(scores) => crate::scores::pseudo_outcomes(data, t, scores, &future[0])?,
        };
        let mut scores = aipw_from_parts(t, &pseudo, data.actions(t), &q, &e, source.provenance())?;
        if let Some(folds) = source.folds() {
            scores = scores.with_folds(folds);
            if next.as_ref().is_some_and(|s| s.fold_key() != Some(fold_key(folds))) {
                return Err(DtrError::FoldMismatch);
            }
        }
        check_score_bound(&scores, score_bound(data, max_q, source.eta()))?;
        let class = &cfg.classes[t - 1];
        let result = class.search(&scores, &data.history_features(t))?;
        trace.push(StageTrace {
            stage: t,
            objective: result.objective / data.len() as f64,
        });
        policies[t - 1] = Some(StagePolicy::tree(result.tree, class.constraint.clone()));
        next = Some(scores);
    }
    trace.reverse();
    Ok(LearnedDtr::new(cfg, assemble(policies)?, trace))
}

/// IPW backward induction with propensities from `source`.
pub fn learn_ipw_with(
    data: &PanelDataset,
    cfg: &LearnerConfig,
    source: &dyn NuisanceSource,
) -> Result<LearnedDtr> {
    let t_max = data.num_stages();
    let e: Vec<Matrix> = (1..=t_max).map(|t| source.propensities(t)).collect::<Result<_>>()?;
    let mut policies: Vec<Option<StagePolicy>> = vec![None; t_max];
    let mut trace = Vec::with_capacity(t_max);
    for t in (1..=t_max).rev() {
        let future: Vec<StagePolicy> = policies[t..].iter().flatten().cloned().collect();
        let scores = ipw_from_parts(data, t, &e[t - 1..], &future)?;
        let class = &cfg.classes[t - 1];
        let result = class.search(&scores, &data.history_features(t))?;
        trace.push(StageTrace {
            stage: t,
            objective: result.objective / data.len() as f64,
        });
        policies[t - 1] = Some(StagePolicy::tree(result.tree, class.constraint.clone()));
    }
    trace.reverse();
    Ok(LearnedDtr::new(cfg, assemble(policies)?, trace))
}

/// Q-learning by backward recursion on full-sample regressions. Forest
/// predictions for training units are out-of-bag. With `with_policy_search`
/// each stage picks the tree in its class maximizing `Σ_i Q̂_t(H_{i,t}, π_t)`;
/// otherwise the stage policy is the pointwise argmax of `Q̂_t`.
pub fn learn_q(data: &PanelDataset, cfg: &LearnerConfig, with_policy_search: bool) -> Result<LearnedDtr> {
    let method = if with_policy_search { Method::QSearch } else { Method::QLearn };
    let cfg = LearnerConfig { method, ..cfg.clone() };
    cfg.validate(data)?;
    let t_max = data.num_stages();
    let n = data.len();
    let spec = cfg.q_spec();
    let mut policies: Vec<Option<StagePolicy>> = vec![None; t_max];
    let mut trace = Vec::with_capacity(t_max);
    let mut next: Option<QModel> = None;
    for t in (1..=t_max).rev() {
        let y = data.outcomes(t);
        let targets: Vec<f64> = match (&next, policies.get(t).and_then(Option::as_ref)) {
            (Some(q_next), Some(policy)) => {
                let h_next = data.history_features(t + 1);
                (0..n)
                    .map(|i| {
                        let h = h_next.row(i);
                        y[i] + q_next.predict_all_in_sample(i, h)[policy.evaluate(h)]
                    })
                    .collect()
            }
            _ => y.to_vec(),
        };
        let q = fit_q_full(data, t, &targets, &spec)?;
        let class = &cfg.classes[t - 1];
        let history = data.history_features(t);
        let mut values = Matrix::zeros(n, data.schema().num_actions(t));
        for i in 0..n {
            values
                .row_mut(i)
                .copy_from_slice(&q.predict_all_in_sample(i, history.row(i)));
        }
        let policy = if with_policy_search {
            let scores = ScoreMatrix::new(t, values, Provenance::Aipw);
            let result = class.search(&scores, &history)?;
            trace.push(StageTrace {
                stage: t,
                objective: result.objective / n as f64,
            });
            StagePolicy::tree(result.tree, class.constraint.clone())
        } else {
            let policy = StagePolicy::pointwise(q.clone(), class.constraint.clone());
            let objective = (0..n)
                .map(|i| values.get(i, policy.evaluate(history.row(i))))
                .sum::<f64>()
                / n as f64;
            trace.push(StageTrace { stage: t, objective });
            policy
        };
        policies[t - 1] = Some(policy);
        next = Some(q);
    }
    trace.reverse();
    Ok(LearnedDtr::new(&cfg, assemble(policies)?, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelfareEstimate {
    pub value: f64,
    /// Standard deviation of the per-unit terms over `√n`.
    pub std_error: f64,
}

/// Per-unit terms of the simultaneous AIPW welfare estimate
/// `Σ_t [ψ_t Y_t - (ψ_t - ψ_{t-1}) Q̂_t^π(H_t, π_t(H_t))]`, with
/// `ψ_t = Π_{s≤t} 1{A_s = π_s(H_s)} / ê_s(H_s, A_s)` and `ψ_0 = 1`.
pub fn aipw_welfare_terms(
    data: &PanelDataset,
    dtr: &Dtr,
    source: &dyn NuisanceSource,
) -> Result<Vec<f64>> {
    let t_max = data.num_stages();
    if dtr.num_stages() != t_max {
        return Err(DtrError::InvalidInput(format!(
            "regime has {} stages, data has {t_max}",
            dtr.num_stages()
        )));
    }
    let n = data.len();
    let mut psi = vec![1.0; n];
    let mut total = vec![0.0; n];
    for t in 1..=t_max {
        let e = source.propensities(t)?;
        let q = source.q_values(t, dtr.suffix(t + 1))?;
        let history = data.history_features(t);
        let policy = dtr.stage(t);
        let actions = data.actions(t);
        let y = data.outcomes(t);
        for i in 0..n {
            let a_pi = policy.evaluate(history.row(i));
            let prev = psi[i];
            psi[i] = if actions[i] == a_pi { prev / e.get(i, actions[i]) } else { 0.0 };
            total[i] += psi[i] * y[i] - (psi[i] - prev) * q.get(i, a_pi);
        }
    }
    if total.iter().any(|v| !v.is_finite()) {
        return Err(DtrError::Numerical("non-finite AIPW welfare term".into()));
    }
    Ok(total)
}

pub fn mean_and_se(values: &[f64]) -> WelfareEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    WelfareEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
    }
}

pub fn aipw_welfare(data: &PanelDataset, dtr: &Dtr, source: &dyn NuisanceSource) -> Result<WelfareEstimate> {
    Ok(mean_and_se(&aipw_welfare_terms(data, dtr, source)?))
}

/// Cross-fitted AIPW estimate of the welfare of a fixed regime.
pub fn aipw_welfare_estimate(data: &PanelDataset, dtr: &Dtr, cfg: &LearnerConfig) -> Result<WelfareEstimate> {
    let source = CrossFitted::fit(data, cfg)?;
    aipw_welfare(data, dtr, &source)
}

/// All regimes in the product of the per-stage classes, stage 1 varying slowest.
pub fn enumerate_regimes(data: &PanelDataset, classes: &[PolicyClass]) -> Result<Vec<Dtr>> {
    let mut per_stage = Vec::with_capacity(classes.len());
    for (idx, class) in classes.iter().enumerate() {
        let t = idx + 1;
        let trees = enumerate_policies(class, t, &data.history_features(t), data.schema().num_actions(t))?;
        per_stage.push(
            trees
                .into_iter()
                .map(|tree| StagePolicy::tree(tree, class.constraint.clone()))
                .collect::<Vec<_>>(),
        );
    }
    let count = per_stage
        .iter()
        .try_fold(1u128, |acc, s| acc.checked_mul(s.len() as u128))
        .unwrap_or(u128::MAX);
    if count > SIMULTANEOUS_LIMIT {
        return Err(DtrError::ClassTooLarge {
            count,
            limit: SIMULTANEOUS_LIMIT,
        });
    }
    let mut regimes: Vec<Vec<StagePolicy>> = vec![Vec::new()];
    for stage in &per_stage {
        regimes = regimes
            .into_iter()
            .flat_map(|prefix| {
                stage.iter().map(move |p| {
                    let mut v = prefix.clone();
                    v.push(p.clone());
                    v
                })
            })
            .collect();
    }
    regimes.into_iter().map(Dtr::new).collect()
}

/// Maximize the AIPW welfare estimate over the product class; ties go to
/// the earliest regime in enumeration order.
pub fn learn_aipw_simultaneous_with(
    data: &PanelDataset,
    cfg: &LearnerConfig,
    source: &dyn NuisanceSource,
) -> Result<LearnedDtr> {
    let regimes = enumerate_regimes(data, &cfg.classes)?;
    let mut best: Option<(f64, Dtr)> = None;
    for dtr in regimes {
        let w = aipw_welfare(data, &dtr, source)?.value;
        if best.as_ref().is_none_or(|(b, _)| w > *b) {
            best = Some((w, dtr));
        }
    }
    let (value, dtr) = best.ok_or_else(|| DtrError::InvalidInput("empty policy class".into()))?;
    let mut out = LearnedDtr::new(cfg, dtr, Vec::new());
    out.estimated_welfare = Some(value);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::StageSchema;
    use crate::policytree::PolicyRule;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    /// Fixed nuisances for unit tests.
    struct Fixed {
        e: Vec<Matrix>,
        q: Vec<Matrix>,
    }

    impl NuisanceSource for Fixed {
        fn propensities(&self, stage: usize) -> Result<Matrix> {
            Ok(self.e[stage - 1].clone())
        }
        fn q_values(&self, stage: usize, _future: &[StagePolicy]) -> Result<Matrix> {
            Ok(self.q[stage - 1].clone())
        }
        fn eta(&self) -> f64 {
            0.01
        }
        fn provenance(&self) -> Provenance {
            Provenance::OracleAipw
        }
    }

    fn single_stage(n: usize, seed: u64, y: impl Fn(f64, usize) -> f64) -> PanelDataset {
        let mut rng = rng_from_seed(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let out: Vec<f64> = (0..n).map(|i| y(x[i], a[i])).collect();
        let schema = StageSchema::new(vec![2], vec![1], vec![true]).unwrap();
        PanelDataset::new(
            schema,
            (0..n).map(|i| i.to_string()).collect(),
            vec![a],
            vec![Matrix::from_vec(n, 1, x)],
            vec![out],
        )
        .unwrap()
    }

    #[test]
    fn single_stage_dr_is_static_search() {
        let data = single_stage(400, 1, |x, a| if (x > 0.0) == (a == 1) { 1.0 } else { 0.0 });
        let cfg = LearnerConfig::new(Method::Dr, vec![PolicyClass::trees(1)], 3);
        let learned = learn(&data, &cfg).unwrap();
        let source = CrossFitted::fit(&data, &cfg).unwrap();
        let scores = aipw_from_parts(
            1,
            data.outcomes(1),
            data.actions(1),
            &source.q_values(1, &[]).unwrap(),
            &source.propensities(1).unwrap(),
            Provenance::Aipw,
        )
        .unwrap();
        let direct = PolicyClass::trees(1).search(&scores, &data.history_features(1)).unwrap();
        assert_eq!(learned.dtr.stage(1).as_tree(), Some(&direct.tree));
        assert!((learned.trace[0].objective - direct.objective / 400.0).abs() < 1e-12);
        let node = direct.tree.nodes[0];
        assert!(node.threshold.abs() < 0.1);
        assert_eq!(direct.tree.leaves, vec![0, 1]);
    }

    #[test]
    fn q_learners_recover_action_argmax() {
        let data = single_stage(300, 2, |_, a| a as f64);
        for search in [true, false] {
            let cfg = LearnerConfig::new(Method::QLearn, vec![PolicyClass::trees(1)], 5);
            let learned = learn_q(&data, &cfg, search).unwrap();
            let h = data.history_features(1);
            assert!(h.iter_rows().all(|r| learned.dtr.stage(1).evaluate(r) == 1));
        }
    }

    #[test]
    fn pointwise_q_policy_is_not_constant() {
        let data = single_stage(600, 4, |x, a| if a == 1 { x } else { -x });
        let cfg = LearnerConfig::new(Method::QLearn, vec![PolicyClass::constant()], 5);
        let learned = learn_q(&data, &cfg, false).unwrap();
        assert!(matches!(learned.dtr.stage(1).rule, PolicyRule::Pointwise(_)));
        let h = data.history_features(1);
        let acts: Vec<usize> = h.iter_rows().map(|r| learned.dtr.stage(1).evaluate(r)).collect();
        assert!(acts.contains(&0) && acts.contains(&1));
    }

    #[test]
    fn ipw_with_unit_propensity_is_empirical_welfare() {
        let data = single_stage(6, 7, |x, _| x);
        let fixed = Fixed {
            e: vec![Matrix::filled(6, 2, 1.0)],
            q: vec![Matrix::zeros(6, 2)],
        };
        let cfg = LearnerConfig::new(Method::Ipw, vec![PolicyClass::trees(1)], 0);
        let learned = learn_ipw_with(&data, &cfg, &fixed).unwrap();
        let h = data.history_features(1);
        let value = |dtr: &Dtr| -> f64 {
            (0..6)
                .filter(|&i| dtr.stage(1).evaluate(h.row(i)) == data.actions(1)[i])
                .map(|i| data.outcomes(1)[i])
                .sum()
        };
        let best = crate::policytree::enumerate_policies(&PolicyClass::trees(1), 1, &h, 2)
            .unwrap()
            .into_iter()
            .map(|t| value(&Dtr::new(vec![StagePolicy::tree(t, Default::default())]).unwrap()))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((value(&learned.dtr) - best).abs() < 1e-12);
    }

    #[test]
    fn flat_outcomes_give_constant_zero() {
        let data = single_stage(20, 8, |_, _| 0.0);
        let fixed = Fixed {
            e: vec![Matrix::filled(20, 2, 0.5)],
            q: vec![Matrix::zeros(20, 2)],
        };
        let cfg = LearnerConfig::new(Method::Ipw, vec![PolicyClass::trees(1)], 0);
        let out = learn_ipw_with(&data, &cfg, &fixed).unwrap();
        assert_eq!(out.dtr.stage(1).as_tree().unwrap().leaves, vec![0, 0]);
    }

    #[test]
    fn welfare_terms_telescope_when_policy_matches_data() {
        let data = single_stage(50, 9, |x, a| x + a as f64);
        let dtr = Dtr::constant(&[1]);
        let fixed = Fixed {
            e: vec![Matrix::filled(50, 2, 1.0)],
            q: vec![Matrix::filled(50, 2, 123.0)],
        };
        let terms = aipw_welfare_terms(&data, &dtr, &fixed).unwrap();
        for i in 0..50 {
            let expect = if data.actions(1)[i] == 1 { data.outcomes(1)[i] } else { 123.0 };
            assert!((terms[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn simultaneous_picks_best_constant() {
        let data = single_stage(30, 10, |x, _| x);
        let mut q = Matrix::zeros(30, 2);
        (0..30).for_each(|i| q.set(i, 1, 1.0));
        let fixed = Fixed {
            e: vec![Matrix::filled(30, 2, 0.5)],
            q: vec![q],
        };
        let cfg = LearnerConfig::new(Method::AipwSimultaneous, vec![PolicyClass::constant()], 0);
        assert_eq!(enumerate_regimes(&data, &cfg.classes).unwrap().len(), 2);
        let out = learn_aipw_simultaneous_with(&data, &cfg, &fixed).unwrap();
        let w0 = aipw_welfare(&data, &Dtr::constant(&[0]), &fixed).unwrap().value;
        let w1 = aipw_welfare(&data, &Dtr::constant(&[1]), &fixed).unwrap().value;
        assert_eq!(out.estimated_welfare, Some(w0.max(w1)));
        assert_eq!(out.dtr.stage(1).as_tree(), Some(&crate::policytree::PolicyTree::constant(1, usize::from(w1 > w0))));
    }

    #[test]
    fn config_validation() {
        let data = single_stage(10, 11, |_, _| 0.0);
        let mut cfg = LearnerConfig::new(Method::Dr, vec![PolicyClass::constant()], 0);
        cfg.k = 1;
        assert!(cfg.validate(&data).is_err());
        let cfg = LearnerConfig::new(Method::Dr, vec![], 0);
        assert!(cfg.validate(&data).is_err());
        assert_eq!(Method::parse("q_search").unwrap(), Method::QSearch);
        assert!(Method::parse("qq").is_err());
    }

    #[test]
    fn learning_is_deterministic() {
        let data = single_stage(200, 12, |x, a| x * a as f64);
        let cfg = LearnerConfig::new(Method::Dr, vec![PolicyClass::trees(2)], 9);
        let a = learn(&data, &cfg).unwrap().to_json().unwrap();
        let b = learn(&data, &cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }
}
