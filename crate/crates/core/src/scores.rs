//! Per-unit AIPW and IPW score matrices.
//!
//! Entry `(i, a)` of a stage-`t` matrix scores action `a` for unit `i`,
//! with the later stages following an already chosen policy suffix.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{FoldAssignment, PanelDataset};
use crate::error::{DtrError, Result};
use crate::matrix::Matrix;
use crate::nuisance::{CrossFitPropensities, CrossFitQ, NuisanceSet};
use crate::policytree::StagePolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Aipw,
    Ipw,
    OracleAipw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    stage: usize,
    values: Matrix,
    provenance: Provenance,
    fold_key: Option<u64>,
}

/// Fingerprint of a fold assignment, used to detect mixing of folds between stages.
pub fn fold_key(folds: &FoldAssignment) -> u64 {
    folds
        .fold_of_unit()
        .iter()
        .fold(0xcbf2_9ce4_8422_2325 ^ folds.num_folds() as u64, |h, &k| {
            (h ^ k as u64).wrapping_mul(0x0100_0000_01b3)
        })
}

impl ScoreMatrix {
    pub fn new(stage: usize, values: Matrix, provenance: Provenance) -> Self {
        Self {
            stage,
            values,
            provenance,
            fold_key: None,
        }
    }

    pub fn with_folds(mut self, folds: &FoldAssignment) -> Self {
        self.fold_key = Some(fold_key(folds));
        self
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn fold_key(&self) -> Option<u64> {
        self.fold_key
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn num_actions(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn get(&self, i: usize, a: usize) -> f64 {
        self.values.get(i, a)
    }

    /// `(1/n) Σ_i values(i, actions_i)`.
    pub fn mean_at(&self, actions: &[usize]) -> f64 {
        let n = self.len();
        actions.iter().enumerate().map(|(i, &a)| self.get(i, a)).sum::<f64>() / n as f64
    }

    pub fn column_means(&self) -> Vec<f64> {
        self.values.column_means()
    }

    /// Debug dump with columns `unit_id, score_a0, ..., score_a{d-1}`.
    pub fn write_csv(&self, path: impl AsRef<Path>, unit_ids: &[String]) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_csv_writer(file, unit_ids)
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W, unit_ids: &[String]) -> Result<()> {
        if unit_ids.len() != self.len() {
            return Err(DtrError::InvalidInput("unit id count does not match score rows".into()));
        }
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["unit_id".to_string()];
        header.extend((0..self.num_actions()).map(|a| format!("score_a{a}")));
        w.write_record(&header)?;
        for (i, id) in unit_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `values(i,a) = (u_i - q(i,A_i)) / e(i,A_i) · 1{A_i = a} + q(i,a)`.
pub fn aipw_from_parts(
    stage: usize,
    pseudo: &[f64],
    actions: &[usize],
    q: &Matrix,
    e: &Matrix,
    provenance: Provenance,
) -> Result<ScoreMatrix> {
    let n = pseudo.len();
    if actions.len() != n || q.rows() != n || e.rows() != n || q.cols() != e.cols() {
        return Err(DtrError::InvalidInput(
            "score inputs have inconsistent shapes".into(),
        ));
    }
    let mut values = q.clone();
    for i in 0..n {
        let a = actions[i];
        let p = e.get(i, a);
        if !(p > 0.0) {
            return Err(DtrError::Numerical(format!(
                "unit {i}: propensity {p} of the observed action is not positive"
            )));
        }
        let v = values.get(i, a) + (pseudo[i] - q.get(i, a)) / p;
        values.set(i, a, v);
    }
    if !values.is_finite() {
        return Err(DtrError::Numerical(format!("non-finite stage-{stage} score")));
    }
    Ok(ScoreMatrix::new(stage, values, provenance))
}

/// `U_i = Y_{i,t} + next(i, π̂_{t+1}(H_{i,t+1}))`.
pub fn pseudo_outcomes(
    data: &PanelDataset,
    stage: usize,
    next_scores: &ScoreMatrix,
    next_policy: &StagePolicy,
) -> Result<Vec<f64>> {
    if next_scores.stage() != stage + 1 || next_policy.stage != stage + 1 {
        return Err(DtrError::InvalidInput(format!(
            "stage-{stage} pseudo-outcomes need stage-{} scores and policy",
            stage + 1
        )));
    }
    let y = data.outcomes(stage);
    let h_next = data.history_features(stage + 1);
    Ok((0..data.len())
        .map(|i| y[i] + next_scores.get(i, next_policy.evaluate(h_next.row(i))))
        .collect())
}

/// Final-stage AIPW scores from cross-fitted nuisances.
pub fn aipw_scores_final(
    data: &PanelDataset,
    folds: &FoldAssignment,
    nuis: &NuisanceSet,
) -> Result<ScoreMatrix> {
    let t = data.num_stages();
    if folds.len() != data.len() {
        return Err(DtrError::FoldMismatch);
    }
    let q = nuis.q_final.out_of_fold(data, folds);
    let e = nuis.propensities.out_of_fold(data, folds, t);
    Ok(aipw_from_parts(t, data.outcomes(t), data.actions(t), &q, &e, Provenance::Aipw)?.with_folds(folds))
}

/// Stage-`t` AIPW scores given the stage-`t+1` scores and policy.
pub fn aipw_scores_stage(
    data: &PanelDataset,
    folds: &FoldAssignment,
    q_t: &CrossFitQ,
    propensities: &CrossFitPropensities,
    next_scores: &ScoreMatrix,
    next_policy: &StagePolicy,
) -> Result<ScoreMatrix> {
    let stage = q_t.stage();
    if next_scores.fold_key() != Some(fold_key(folds)) {
        return Err(DtrError::FoldMismatch);
    }
    let pseudo = pseudo_outcomes(data, stage, next_scores, next_policy)?;
    let q = q_t.out_of_fold(data, folds);
    let e = propensities.out_of_fold(data, folds, stage);
    Ok(aipw_from_parts(stage, &pseudo, data.actions(stage), &q, &e, Provenance::Aipw)?.with_folds(folds))
}

/// IPW scores at `stage` from propensity matrices for stages `stage..=T`
/// (`e[0]` is stage `stage`) and the policies for the later stages.
pub fn ipw_from_parts(
    data: &PanelDataset,
    stage: usize,
    e: &[Matrix],
    future: &[StagePolicy],
) -> Result<ScoreMatrix> {
    let t_max = data.num_stages();
    data.schema().check_stage(stage)?;
    if e.len() != t_max - stage + 1 || future.len() != t_max - stage {
        return Err(DtrError::InvalidInput(format!(
            "stage-{stage} IPW scores need propensities and policies for the later stages"
        )));
    }
    let n = data.len();
    let d = data.schema().num_actions(stage);
    let histories: Vec<Matrix> = (stage + 1..=t_max).map(|s| data.history_features(s)).collect();
    let actions = data.actions(stage);
    let mut values = Matrix::zeros(n, d);
    for i in 0..n {
        let follows = future.iter().zip(&histories).all(|(p, h)| {
            p.evaluate(h.row(i)) == data.actions(p.stage)[i]
        });
        if !follows {
            continue;
        }
        let mut weight = 1.0;
        for (offset, m) in e.iter().enumerate() {
            let s = stage + offset;
            weight *= m.get(i, data.actions(s)[i]);
        }
        if !(weight > 0.0) {
            return Err(DtrError::Numerical(format!(
                "unit {i}: non-positive propensity product"
            )));
        }
        values.set(i, actions[i], data.cumulative_outcome(i, stage) / weight);
    }
    if !values.is_finite() {
        return Err(DtrError::Numerical(format!("non-finite stage-{stage} IPW score")));
    }
    Ok(ScoreMatrix::new(stage, values, Provenance::Ipw))
}

/// IPW scores from cross-fitted propensities.
pub fn ipw_scores(
    data: &PanelDataset,
    folds: &FoldAssignment,
    propensities: &CrossFitPropensities,
    future: &[StagePolicy],
    stage: usize,
) -> Result<ScoreMatrix> {
    data.schema().check_stage(stage)?;
    if folds.len() != data.len() {
        return Err(DtrError::FoldMismatch);
    }
    let e: Vec<Matrix> = (stage..=data.num_stages())
        .map(|s| propensities.out_of_fold(data, folds, s))
        .collect();
    Ok(ipw_from_parts(data, stage, &e, future)?.with_folds(folds))
}

/// Upper bound `(max|Y|·T + 2·max|Q|)·(2/η)^T` on the magnitude of any
/// AIPW score built from propensities at least `eta`.
pub fn score_bound(data: &PanelDataset, max_abs_q: f64, eta: f64) -> f64 {
    let t = data.num_stages();
    let max_y = (1..=t)
        .flat_map(|s| data.outcomes(s).iter().map(|y| y.abs()))
        .fold(0.0, f64::max);
    (max_y * t as f64 + 2.0 * max_abs_q) * (2.0 / eta).powi(t as i32)
}

/// Error if some entry of `scores` exceeds `bound` (with rounding slack).
pub fn check_score_bound(scores: &ScoreMatrix, bound: f64) -> Result<()> {
    let worst = scores
        .values()
        .as_slice()
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    if worst > bound * (1.0 + 1e-9) {
        return Err(DtrError::Numerical(format!(
            "stage-{} score {worst} exceeds the bound {bound}",
            scores.stage()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::StageSchema;

    fn toy(actions: Vec<usize>, y: Vec<f64>) -> PanelDataset {
        let n = actions.len();
        let schema = StageSchema::new(vec![2], vec![1], vec![true]).unwrap();
        PanelDataset::new(
            schema,
            (0..n).map(|i| format!("u{i}")).collect(),
            vec![actions],
            vec![Matrix::zeros(n, 1)],
            vec![y],
        )
        .unwrap()
    }

    #[test]
    fn hand_substitution() {
        let q = Matrix::from_rows(&[vec![1.5, 1.5]]);
        let e = Matrix::from_rows(&[vec![0.5, 0.5]]);
        let s = aipw_from_parts(1, &[2.0], &[1], &q, &e, Provenance::Aipw).unwrap();
        assert_eq!(s.get(0, 1), 2.5);
        assert_eq!(s.get(0, 0), 1.5);
    }

    #[test]
    fn unit_propensity_recovers_outcome() {
        let q = Matrix::from_rows(&[vec![-3.0, 7.25]]);
        let e = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let s = aipw_from_parts(1, &[4.0], &[0], &q, &e, Provenance::Aipw).unwrap();
        assert_eq!(s.get(0, 0), 4.0);
        assert_eq!(s.get(0, 1), 7.25);
    }

    #[test]
    fn zero_q_unit_e_is_plug_in() {
        let q = Matrix::zeros(3, 2);
        let e = Matrix::filled(3, 2, 1.0);
        let u = [1.0, -2.0, 3.0];
        let s = aipw_from_parts(1, &u, &[0, 1, 1], &q, &e, Provenance::Aipw).unwrap();
        assert_eq!(s.values().as_slice(), &[1.0, 0.0, 0.0, -2.0, 0.0, 3.0]);
    }

    #[test]
    fn five_row_column_means_match_hand_aipw() {
        let actions = vec![0, 1, 1, 0, 1];
        let y = vec![1.0, 2.0, 0.0, 3.0, 4.0];
        let q = Matrix::from_rows(&[
            vec![0.5, 1.0],
            vec![0.0, 1.5],
            vec![1.0, 1.0],
            vec![2.0, 0.0],
            vec![0.0, 2.0],
        ]);
        let e = Matrix::from_rows(&[
            vec![0.5, 0.5],
            vec![0.25, 0.75],
            vec![0.5, 0.5],
            vec![0.8, 0.2],
            vec![0.6, 0.4],
        ]);
        let s = aipw_from_parts(1, &y, &actions, &q, &e, Provenance::Aipw).unwrap();
        // action 1: Q column plus residuals of units 1, 2, 4
        let hand1 = (1.0 + 1.5 + 1.0 + 0.0 + 2.0 + (2.0 - 1.5) / 0.75 + (0.0 - 1.0) / 0.5 + (4.0 - 2.0) / 0.4) / 5.0;
        let hand0 = (0.5 + 0.0 + 1.0 + 2.0 + 0.0 + (1.0 - 0.5) / 0.5 + (3.0 - 2.0) / 0.8) / 5.0;
        let means = s.column_means();
        assert!((means[1] - hand1).abs() < 1e-12);
        assert!((means[0] - hand0).abs() < 1e-12);
    }

    #[test]
    fn ipw_with_unit_propensity_is_indicator_weighting() {
        let data = toy(vec![1, 0, 1], vec![2.0, 3.0, -1.0]);
        let e = vec![Matrix::filled(3, 2, 1.0)];
        let s = ipw_from_parts(&data, 1, &e, &[]).unwrap();
        assert_eq!(s.values().as_slice(), &[0.0, 2.0, 3.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn ipw_four_row_constant_policy_welfare() {
        let data = toy(vec![0, 1, 1, 0], vec![1.0, 2.0, 3.0, 4.0]);
        let e = vec![Matrix::from_rows(&[
            vec![0.5, 0.5],
            vec![0.5, 0.5],
            vec![0.25, 0.75],
            vec![0.8, 0.2],
        ])];
        let s = ipw_from_parts(&data, 1, &e, &[]).unwrap();
        let means = s.column_means();
        assert!((means[0] - (1.0 / 0.5 + 4.0 / 0.8) / 4.0).abs() < 1e-12);
        assert!((means[1] - (2.0 / 0.5 + 3.0 / 0.75) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn aipw_with_zero_q_is_ipw() {
        let data = toy(vec![0, 1, 1, 0], vec![1.0, 2.0, 3.0, 4.0]);
        let e = Matrix::from_rows(&[
            vec![0.5, 0.5],
            vec![0.4, 0.6],
            vec![0.25, 0.75],
            vec![0.8, 0.2],
        ]);
        let a = aipw_from_parts(1, data.outcomes(1), data.actions(1), &Matrix::zeros(4, 2), &e, Provenance::Aipw)
            .unwrap();
        let b = ipw_from_parts(&data, 1, &[e], &[]).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn score_csv_layout() {
        let s = ScoreMatrix::new(1, Matrix::from_rows(&[vec![0.5, -1.0]]), Provenance::Ipw);
        let mut out = Vec::new();
        s.to_csv_writer(&mut out, &["x".to_string()]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "unit_id,score_a0,score_a1\nx,0.5,-1\n");
    }
}
