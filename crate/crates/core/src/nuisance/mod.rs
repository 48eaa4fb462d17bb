//! Regression backends, cross-fitted propensity scores and fitted
//! Q-evaluation.
//!
//! Every cross-fitted model for fold `k` is trained on the units outside
//! fold `k`; out-of-fold matrices evaluate unit `i` with the model of its own
//! fold `k(i)`.

pub mod forest;
pub mod linear;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FoldAssignment, PanelDataset, StageSchema};
use crate::error::{DtrError, Result};
use crate::matrix::Matrix;
use crate::policytree::StagePolicy;
use crate::rng::derive_seed;

pub use forest::{Forest, ForestParams};
pub use linear::{LinearModel, LogisticModel};

/// Default probability floor for clipped propensity scores.
pub const DEFAULT_ETA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    RandomForest(ForestParams),
    /// Least squares for regressions, logistic regression for propensities.
    Linear,
}

/// Which history columns a model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorSet {
    #[default]
    History,
    /// Only the first-stage state block, at every stage.
    InitialState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorSpec {
    pub kind: ModelKind,
    #[serde(default)]
    pub predictors: PredictorSet,
}

impl RegressorSpec {
    pub fn forest(params: ForestParams) -> Self {
        Self {
            kind: ModelKind::RandomForest(params),
            predictors: PredictorSet::History,
        }
    }

    pub fn linear() -> Self {
        Self {
            kind: ModelKind::Linear,
            predictors: PredictorSet::History,
        }
    }

    pub fn with_predictors(mut self, predictors: PredictorSet) -> Self {
        self.predictors = predictors;
        self
    }

    /// Same spec with the forest seed replaced by one derived from `labels`.
    pub fn derive(&self, labels: &[u64]) -> Self {
        let mut out = self.clone();
        if let ModelKind::RandomForest(p) = &mut out.kind {
            p.seed = derive_seed(p.seed, labels);
        }
        out
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        if let ModelKind::RandomForest(p) = &mut out.kind {
            p.seed = seed;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ModelKind::RandomForest(p) => p.validate(),
            ModelKind::Linear => Ok(()),
        }
    }

    fn columns(&self, schema: &StageSchema, stage: usize) -> Vec<usize> {
        match self.predictors {
            PredictorSet::History => (0..schema.history_width(stage)).collect(),
            PredictorSet::InitialState => {
                let start = stage - 1;
                (start..start + schema.state_dims[0]).collect()
            }
        }
    }
}

/// A fitted regression or classification model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedModel {
    Forest(Forest),
    Linear(LinearModel),
    Logistic {
        model: LogisticModel,
        /// Class code of each logistic category.
        classes: Vec<usize>,
        num_classes: usize,
    },
    Constant { values: Vec<f64> },
}

impl FittedModel {
    /// Scalar prediction (first output).
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            FittedModel::Forest(f) => f.predict(x)[0],
            FittedModel::Linear(m) => m.predict(x),
            FittedModel::Logistic { .. } | FittedModel::Constant { .. } => self.predict_proba(x)[0],
        }
    }

    /// Full output vector; class probabilities for classifiers.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FittedModel::Forest(f) => f.predict(x),
            FittedModel::Linear(m) => vec![m.predict(x)],
            FittedModel::Logistic {
                model,
                classes,
                num_classes,
            } => {
                let mut out = vec![0.0; *num_classes];
                for (p, &c) in model.predict_proba(x).iter().zip(classes) {
                    out[c] = *p;
                }
                out
            }
            FittedModel::Constant { values } => values.clone(),
        }
    }

    /// Out-of-bag prediction for training row `row` where the backend
    /// supports it; the ordinary prediction otherwise.
    pub fn predict_in_sample(&self, row: usize, x: &[f64]) -> Vec<f64> {
        match self {
            FittedModel::Forest(f) => f.predict_oob(row, x),
            _ => self.predict_proba(x),
        }
    }
}

/// Fit a scalar regression of `y` on the rows of `x`.
pub fn fit_regressor(spec: &RegressorSpec, x: &Matrix, y: &[f64]) -> Result<FittedModel> {
    spec.validate()?;
    if x.rows() != y.len() || y.is_empty() {
        return Err(DtrError::InvalidInput(format!(
            "regression needs matching non-empty inputs, got {} rows and {} targets",
            x.rows(),
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(DtrError::Numerical("non-finite regression target".into()));
    }
    match &spec.kind {
        ModelKind::RandomForest(p) => {
            let y = Matrix::from_vec(y.len(), 1, y.to_vec());
            Ok(FittedModel::Forest(Forest::fit(x, &y, p)?))
        }
        ModelKind::Linear => Ok(FittedModel::Linear(LinearModel::fit(x, y)?)),
    }
}

/// Fit class probabilities over `0..num_classes`.
pub fn fit_classifier(
    spec: &RegressorSpec,
    x: &Matrix,
    labels: &[usize],
    num_classes: usize,
) -> Result<FittedModel> {
    spec.validate()?;
    let n = labels.len();
    if x.rows() != n || n == 0 {
        return Err(DtrError::InvalidInput("classifier needs matching non-empty inputs".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| counts[c] > 0).collect();
    if present.len() == 1 {
        let mut values = vec![0.0; num_classes];
        values[present[0]] = 1.0;
        return Ok(FittedModel::Constant { values });
    }
    match &spec.kind {
        ModelKind::RandomForest(p) => {
            let mut y = Matrix::zeros(n, num_classes);
            for (i, &l) in labels.iter().enumerate() {
                y.set(i, l, 1.0);
            }
            Ok(FittedModel::Forest(Forest::fit(x, &y, p)?))
        }
        ModelKind::Linear => {
            let mut code = vec![usize::MAX; num_classes];
            for (j, &c) in present.iter().enumerate() {
                code[c] = j;
            }
            let relabeled: Vec<usize> = labels.iter().map(|&l| code[l]).collect();
            let model = LogisticModel::fit(x, &relabeled, present.len())?;
            Ok(FittedModel::Logistic {
                model,
                classes: present,
                num_classes,
            })
        }
    }
}

/// Floor every class probability at `eta` and rescale the remaining classes
/// so the vector sums to one. Requires `eta * p.len() <= 1`.
pub fn clip_probabilities(p: &mut [f64], eta: f64) {
    let d = p.len();
    for v in p.iter_mut() {
        if !v.is_finite() || *v < 0.0 {
            *v = 0.0;
        }
    }
    let mut floored = vec![false; d];
    loop {
        let n_floored = floored.iter().filter(|&&f| f).count();
        let target = 1.0 - eta * n_floored as f64;
        let free_sum: f64 = (0..d).filter(|&j| !floored[j]).map(|j| p[j]).sum();
        let n_free = d - n_floored;
        for j in 0..d {
            if floored[j] {
                p[j] = eta;
            } else if free_sum > 0.0 {
                p[j] *= target / free_sum;
            } else {
                p[j] = target / n_free as f64;
            }
        }
        let newly: Vec<usize> = (0..d).filter(|&j| !floored[j] && p[j] < eta).collect();
        if newly.is_empty() || n_free == newly.len() {
            for j in newly {
                p[j] = eta;
            }
            break;
        }
        for j in newly {
            floored[j] = true;
        }
    }
}

/// Feature layout for Q-function regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QDesign {
    /// `[h, a]`: the action code appended as one more feature.
    AppendAction,
    /// `[h, D_1..D_{d-1}, D_1·h, ..., D_{d-1}·h]` with action dummies `D_a`.
    Interacted,
}

impl QDesign {
    fn for_kind(kind: &ModelKind) -> Self {
        match kind {
            ModelKind::RandomForest(_) => QDesign::AppendAction,
            ModelKind::Linear => QDesign::Interacted,
        }
    }

    fn width(self, p: usize, d: usize) -> usize {
        match self {
            QDesign::AppendAction => p + 1,
            QDesign::Interacted => p + (d - 1) * (p + 1),
        }
    }

    fn write_row(self, h: &[f64], a: usize, d: usize, out: &mut Vec<f64>) {
        out.extend_from_slice(h);
        match self {
            QDesign::AppendAction => out.push(a as f64),
            QDesign::Interacted => {
                out.extend((1..d).map(|j| f64::from(a == j)));
                for j in 1..d {
                    let on = f64::from(a == j);
                    out.extend(h.iter().map(|v| on * v));
                }
            }
        }
    }
}

fn project(h: &[f64], columns: &[usize]) -> Vec<f64> {
    columns.iter().map(|&c| h[c]).collect()
}

/// Fitted `Q_t(h, a)` for one training sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QModel {
    stage: usize,
    num_actions: usize,
    columns: Vec<usize>,
    design: QDesign,
    model: FittedModel,
}

impl QModel {
    fn fit(
        data: &PanelDataset,
        history: &Matrix,
        stage: usize,
        rows: &[usize],
        targets: &[f64],
        spec: &RegressorSpec,
    ) -> Result<Self> {
        let d = data.schema().num_actions(stage);
        let columns = spec.columns(data.schema(), stage);
        let design = QDesign::for_kind(&spec.kind);
        let width = design.width(columns.len(), d);
        let actions = data.actions(stage);
        let mut x = Vec::with_capacity(rows.len() * width);
        for &i in rows {
            let h = project(history.row(i), &columns);
            design.write_row(&h, actions[i], d, &mut x);
        }
        let x = Matrix::from_vec(rows.len(), width, x);
        let y: Vec<f64> = rows.iter().map(|&i| targets[i]).collect();
        let model = fit_regressor(spec, &x, &y)?;
        Ok(Self {
            stage,
            num_actions: d,
            columns,
            design,
            model,
        })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn row(&self, h: &[f64], a: usize) -> Vec<f64> {
        let mut x = Vec::new();
        self.design
            .write_row(&project(h, &self.columns), a, self.num_actions, &mut x);
        x
    }

    /// `Q̂(h, a)` for a full history row `h`.
    pub fn predict(&self, h: &[f64], a: usize) -> f64 {
        self.model.predict(&self.row(h, a))
    }

    /// `Q̂(h, a)` for every action.
    pub fn predict_all(&self, h: &[f64]) -> Vec<f64> {
        (0..self.num_actions).map(|a| self.predict(h, a)).collect()
    }

    /// Like [`predict_all`](Self::predict_all) but out-of-bag for training row `row`.
    pub fn predict_all_in_sample(&self, row: usize, h: &[f64]) -> Vec<f64> {
        (0..self.num_actions)
            .map(|a| self.model.predict_in_sample(row, &self.row(h, a))[0])
            .collect()
    }
}

/// Clipped class probabilities of `A_t` given `H_t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityModel {
    stage: usize,
    num_actions: usize,
    columns: Vec<usize>,
    eta: f64,
    model: FittedModel,
}

impl PropensityModel {
    pub fn predict(&self, h: &[f64]) -> Vec<f64> {
        let mut p = self.model.predict_proba(&project(h, &self.columns));
        clip_probabilities(&mut p, self.eta);
        p
    }

    pub fn stage(&self) -> usize {
        self.stage
    }
}

fn check_eta(schema: &StageSchema, eta: f64) -> Result<()> {
    let d_max = *schema.actions_per_stage.iter().max().unwrap_or(&2);
    if !(eta > 0.0 && eta < 1.0 / d_max as f64) {
        return Err(DtrError::InvalidInput(format!(
            "overlap floor {eta} must lie in (0, 1/{d_max})"
        )));
    }
    Ok(())
}

/// Per-stage, per-fold propensity models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossFitPropensities {
    eta: f64,
    /// `models[t - 1][k]`.
    models: Vec<Vec<PropensityModel>>,
}

impl CrossFitPropensities {
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn model(&self, stage: usize, fold: usize) -> &PropensityModel {
        &self.models[stage - 1][fold]
    }

    /// `n × d_t` matrix of clipped `ê_t^{-k(i)}(H_{i,t}, a)`.
    pub fn out_of_fold(&self, data: &PanelDataset, folds: &FoldAssignment, stage: usize) -> Matrix {
        let history = data.history_features(stage);
        let d = data.schema().num_actions(stage);
        let mut out = Matrix::zeros(data.len(), d);
        for i in 0..data.len() {
            let p = self.models[stage - 1][folds.fold_of(i)].predict(history.row(i));
            out.row_mut(i).copy_from_slice(&p);
        }
        out
    }
}

/// Fit `ê_t^{-k}` for every stage and fold.
pub fn fit_propensities(
    data: &PanelDataset,
    folds: &FoldAssignment,
    spec: &RegressorSpec,
    eta: f64,
) -> Result<CrossFitPropensities> {
    let schema = data.schema();
    check_eta(schema, eta)?;
    if folds.len() != data.len() {
        return Err(DtrError::FoldMismatch);
    }
    let mut models = Vec::with_capacity(schema.num_stages);
    for stage in 1..=schema.num_stages {
        let history = data.history_features(stage);
        let columns = spec.columns(schema, stage);
        let x_all = history.select_columns(&columns);
        let d = schema.num_actions(stage);
        let actions = data.actions(stage);
        let per_fold = (0..folds.num_folds())
            .into_par_iter()
            .map(|k| {
                let rows = folds.training_indices(k);
                let labels: Vec<usize> = rows.iter().map(|&i| actions[i]).collect();
                let mut seen = vec![false; d];
                labels.iter().for_each(|&l| seen[l] = true);
                if let Some(missing) = seen.iter().position(|s| !s) {
                    warn!(
                        "stage {stage}, fold {k}: action {missing} never observed in training \
                         data; its propensity falls back to the floor {eta}"
                    );
                }
                let spec = spec.derive(&[1, stage as u64, k as u64]);
                let model = fit_classifier(&spec, &x_all.select_rows(&rows), &labels, d)?;
                Ok(PropensityModel {
                    stage,
                    num_actions: d,
                    columns: columns.clone(),
                    eta,
                    model,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        models.push(per_fold);
    }
    Ok(CrossFitPropensities { eta, models })
}

/// Per-fold fitted Q-functions for one stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossFitQ {
    stage: usize,
    models: Vec<QModel>,
    /// In-sample R² of each fold's regression; diagnostic only.
    pub train_r2: Vec<f64>,
}

impl CrossFitQ {
    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn model(&self, fold: usize) -> &QModel {
        &self.models[fold]
    }

    /// `n × d_t` matrix of `Q̂_t^{-k(i)}(H_{i,t}, a)`.
    pub fn out_of_fold(&self, data: &PanelDataset, folds: &FoldAssignment) -> Matrix {
        let history = data.history_features(self.stage);
        let d = data.schema().num_actions(self.stage);
        let mut out = Matrix::zeros(data.len(), d);
        for i in 0..data.len() {
            let q = self.models[folds.fold_of(i)].predict_all(history.row(i));
            out.row_mut(i).copy_from_slice(&q);
        }
        out
    }
}

fn r_squared(model: &QModel, history: &Matrix, data: &PanelDataset, rows: &[usize], targets: &[f64]) -> f64 {
    let actions = data.actions(model.stage);
    let mean = rows.iter().map(|&i| targets[i]).sum::<f64>() / rows.len() as f64;
    let (mut sse, mut sst) = (0.0, 0.0);
    for &i in rows {
        let r = targets[i] - model.predict(history.row(i), actions[i]);
        sse += r * r;
        sst += (targets[i] - mean).powi(2);
    }
    if sst > 0.0 {
        1.0 - sse / sst
    } else {
        1.0
    }
}

/// Cross-fitted regression of `targets` on `(H_t, A_t)`.
pub fn fit_q_cross(
    data: &PanelDataset,
    folds: &FoldAssignment,
    stage: usize,
    targets: &[f64],
    spec: &RegressorSpec,
) -> Result<CrossFitQ> {
    data.schema().check_stage(stage)?;
    if folds.len() != data.len() || targets.len() != data.len() {
        return Err(DtrError::FoldMismatch);
    }
    let history = data.history_features(stage);
    let fitted = (0..folds.num_folds())
        .into_par_iter()
        .map(|k| {
            let rows = folds.training_indices(k);
            let spec = spec.derive(&[2, stage as u64, k as u64]);
            let model = QModel::fit(data, &history, stage, &rows, targets, &spec)?;
            let r2 = r_squared(&model, &history, data, &rows, targets);
            Ok((model, r2))
        })
        .collect::<Result<Vec<_>>>()?;
    let (models, train_r2) = fitted.into_iter().unzip();
    Ok(CrossFitQ {
        stage,
        models,
        train_r2,
    })
}

/// Full-sample regression of `targets` on `(H_t, A_t)`, used by the
/// Q-learning comparators.
pub fn fit_q_full(
    data: &PanelDataset,
    stage: usize,
    targets: &[f64],
    spec: &RegressorSpec,
) -> Result<QModel> {
    data.schema().check_stage(stage)?;
    let history = data.history_features(stage);
    let rows: Vec<usize> = (0..data.len()).collect();
    QModel::fit(data, &history, stage, &rows, targets, &spec.derive(&[3, stage as u64]))
}

/// Fitted-Q targets `Y_t + Q̂_{t+1}^{-k(i)}(H_{i,t+1}, π̂_{t+1}(H_{i,t+1}))`, or `Y_T`.
pub fn q_targets(
    data: &PanelDataset,
    folds: &FoldAssignment,
    stage: usize,
    next_policy: Option<&StagePolicy>,
    q_next: Option<&CrossFitQ>,
) -> Result<Vec<f64>> {
    let t_max = data.num_stages();
    data.schema().check_stage(stage)?;
    let y = data.outcomes(stage);
    if stage == t_max {
        return Ok(y.to_vec());
    }
    let (policy, q_next) = match (next_policy, q_next) {
        (Some(p), Some(q)) => (p, q),
        _ => {
            return Err(DtrError::InvalidInput(format!(
                "stage {stage} needs the next-stage policy and Q-function"
            )))
        }
    };
    if q_next.stage() != stage + 1 {
        return Err(DtrError::InvalidInput(format!(
            "next-stage Q-function is for stage {}, expected {}",
            q_next.stage(),
            stage + 1
        )));
    }
    let next_history = data.history_features(stage + 1);
    Ok((0..data.len())
        .map(|i| {
            let h = next_history.row(i);
            let a = policy.evaluate(h);
            y[i] + q_next.model(folds.fold_of(i)).predict(h, a)
        })
        .collect())
}

/// One backward step of fitted Q-evaluation at `stage`.
///
/// `future` holds the policies for stages `stage+1..=T`; only the first is
/// read, since `q_next` already encodes the later ones.
pub fn fitted_q_evaluation(
    data: &PanelDataset,
    folds: &FoldAssignment,
    future: &[StagePolicy],
    stage: usize,
    spec: &RegressorSpec,
    q_next: Option<&CrossFitQ>,
) -> Result<CrossFitQ> {
    let targets = q_targets(data, folds, stage, future.first(), q_next)?;
    fit_q_cross(data, folds, stage, &targets, spec)
}

/// Propensities for all stages plus the final-stage Q-function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisanceSet {
    pub propensities: CrossFitPropensities,
    pub q_final: CrossFitQ,
}

impl NuisanceSet {
    pub fn fit(
        data: &PanelDataset,
        folds: &FoldAssignment,
        propensity: &RegressorSpec,
        q: &RegressorSpec,
        eta: f64,
    ) -> Result<Self> {
        let propensities = fit_propensities(data, folds, propensity, eta)?;
        let q_final = fitted_q_evaluation(data, folds, &[], data.num_stages(), q, None)?;
        Ok(Self {
            propensities,
            q_final,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_folds;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn single_stage(actions: Vec<usize>, states: Vec<f64>, y: Vec<f64>) -> PanelDataset {
        let n = actions.len();
        let schema = StageSchema::new(vec![2], vec![1], vec![true]).unwrap();
        PanelDataset::new(
            schema,
            (0..n).map(|i| i.to_string()).collect(),
            vec![actions],
            vec![Matrix::from_vec(n, 1, states)],
            vec![y],
        )
        .unwrap()
    }

    #[test]
    fn clipping_floors_and_renormalizes() {
        let mut p = vec![0.001, 0.999];
        clip_probabilities(&mut p, 0.01);
        assert!((p[0] - 0.01).abs() < 1e-12);
        assert!((p[1] - 0.99).abs() < 1e-12);

        let mut p = vec![0.0, 1.0, 0.0];
        clip_probabilities(&mut p, 0.05);
        assert_eq!(p[0], 0.05);
        assert!((p[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn degenerate_class_falls_back_to_floor() {
        let n = 40;
        let data = single_stage(vec![1; n], (0..n).map(|i| i as f64).collect(), vec![0.0; n]);
        let folds = make_folds(n, 4, 3).unwrap();
        let eta = 0.02;
        for spec in [RegressorSpec::forest(ForestParams::default()), RegressorSpec::linear()] {
            let props = fit_propensities(&data, &folds, &spec, eta).unwrap();
            let m = props.out_of_fold(&data, &folds, 1);
            for i in 0..n {
                assert_eq!(m.get(i, 0), eta);
                assert!((m.get(i, 1) - (1.0 - eta)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eta_must_respect_action_count() {
        let data = single_stage(vec![0, 1, 0, 1], vec![0.0; 4], vec![0.0; 4]);
        let folds = make_folds(4, 2, 0).unwrap();
        let spec = RegressorSpec::linear();
        assert!(fit_propensities(&data, &folds, &spec, 0.5).is_err());
        assert!(fit_propensities(&data, &folds, &spec, 0.0).is_err());
    }

    #[test]
    fn final_stage_q_learns_action_effect() {
        let n = 2000;
        let mut rng = rng_from_seed(5);
        let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let states: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = actions.iter().map(|&a| a as f64).collect();
        let data = single_stage(actions, states, y);
        let folds = make_folds(n, 5, 1).unwrap();
        let spec = RegressorSpec::forest(ForestParams::default());
        let q = fitted_q_evaluation(&data, &folds, &[], 1, &spec, None).unwrap();
        for h in [0.1, 0.5, 0.9] {
            for k in 0..5 {
                assert!((q.model(k).predict(&[h], 1) - 1.0).abs() < 0.05);
                assert!(q.model(k).predict(&[h], 0).abs() < 0.05);
            }
        }
    }

    #[test]
    fn stage_out_of_range_and_missing_next() {
        let data = single_stage(vec![0, 1, 0, 1], vec![0.0; 4], vec![0.0; 4]);
        let folds = make_folds(4, 2, 0).unwrap();
        let spec = RegressorSpec::linear();
        assert!(matches!(
            fitted_q_evaluation(&data, &folds, &[], 2, &spec, None),
            Err(DtrError::StageOutOfRange { .. })
        ));
    }

    #[test]
    fn models_never_see_their_own_fold() {
        // a target that is huge only on fold 0 must not leak into fold 0's model
        let n = 50;
        let folds = make_folds(n, 5, 11).unwrap();
        let y: Vec<f64> = (0..n).map(|i| if folds.fold_of(i) == 0 { 1e6 } else { 1.0 }).collect();
        let data = single_stage(vec![0; n].iter().enumerate().map(|(i, _)| i % 2).collect(), vec![0.0; n], y.clone());
        let q = fit_q_cross(&data, &folds, 1, &y, &RegressorSpec::linear()).unwrap();
        assert!((q.model(0).predict(&[0.0], 0) - 1.0).abs() < 1e-6);
        assert!(q.model(1).predict(&[0.0], 0) > 1.0);
        let audit = folds.audit_json();
        let training = audit["folds"][0]["training"].as_array().unwrap();
        assert!(training.iter().all(|i| folds.fold_of(i.as_u64().unwrap() as usize) != 0));
    }
}
