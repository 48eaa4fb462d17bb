//! Multi-stage observational panels.
//!
//! Stages are numbered from 1 in every public function (`stage` ranges over
//! `1..=num_stages`). Actions are 0-based integer codes.
//!
//! History features for stage `t` are laid out as
//! `[a_1, ..., a_{t-1}, s_1 block, ..., s_t block]`: all past actions first
//! (cast to reals), followed by every state block in stage order.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{DtrError, Result};
use crate::matrix::Matrix;
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchema {
    pub num_stages: usize,
    pub actions_per_stage: Vec<usize>,
    pub state_dims: Vec<usize>,
    pub outcome_present: Vec<bool>,
}

impl StageSchema {
    pub fn new(
        actions_per_stage: Vec<usize>,
        state_dims: Vec<usize>,
        outcome_present: Vec<bool>,
    ) -> Result<Self> {
        let schema = Self {
            num_stages: actions_per_stage.len(),
            actions_per_stage,
            state_dims,
            outcome_present,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.num_stages;
        if t == 0 {
            return Err(DtrError::Schema("num_stages must be at least 1".into()));
        }
        if self.actions_per_stage.len() != t
            || self.state_dims.len() != t
            || self.outcome_present.len() != t
        {
            return Err(DtrError::Schema(format!(
                "per-stage lists must all have length {t}"
            )));
        }
        if let Some(pos) = self.actions_per_stage.iter().position(|&d| d < 2) {
            return Err(DtrError::Schema(format!(
                "stage {} declares {} actions; at least 2 are required",
                pos + 1,
                self.actions_per_stage[pos]
            )));
        }
        Ok(())
    }

    pub fn num_actions(&self, stage: usize) -> usize {
        self.actions_per_stage[stage - 1]
    }

    pub fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.num_stages {
            return Err(DtrError::StageOutOfRange {
                stage,
                num_stages: self.num_stages,
            });
        }
        Ok(())
    }

    /// Number of history columns at `stage`: `(t - 1) + sum of state dims up to t`.
    pub fn history_width(&self, stage: usize) -> usize {
        (stage - 1) + self.state_dims[..stage].iter().sum::<usize>()
    }

    /// Column names of `history_features(·, stage)`.
    pub fn history_column_names(&self, stage: usize) -> Vec<String> {
        let mut names: Vec<String> = (1..stage).map(|s| format!("a{s}")).collect();
        for s in 1..=stage {
            names.extend((1..=self.state_dims[s - 1]).map(|j| format!("s{s}_{j}")));
        }
        names
    }

    /// Position of the stage-`stage - 1` action inside the stage-`stage`
    /// history, if there is one.
    pub fn prior_action_column(&self, stage: usize) -> Option<usize> {
        (stage >= 2).then(|| stage - 2)
    }

    fn csv_header(&self) -> Vec<String> {
        let t = self.num_stages;
        let mut header = vec!["unit_id".to_string()];
        header.extend((1..=t).map(|s| format!("a{s}")));
        for s in 1..=t {
            header.extend((1..=self.state_dims[s - 1]).map(|j| format!("s{s}_{j}")));
        }
        header.extend((1..=t).map(|s| format!("y{s}")));
        header
    }
}

/// `n` units observed over `T` stages.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    schema: StageSchema,
    unit_ids: Vec<String>,
    /// `actions[t][i]`, stage-major.
    actions: Vec<Vec<usize>>,
    /// `states[t]` is `n × state_dims[t]`.
    states: Vec<Matrix>,
    outcomes: Vec<Vec<f64>>,
}

impl PanelDataset {
    pub fn new(
        schema: StageSchema,
        unit_ids: Vec<String>,
        actions: Vec<Vec<usize>>,
        states: Vec<Matrix>,
        outcomes: Vec<Vec<f64>>,
    ) -> Result<Self> {
        schema.validate()?;
        let n = unit_ids.len();
        if n == 0 {
            return Err(DtrError::InvalidInput("dataset has no units".into()));
        }
        let t = schema.num_stages;
        if actions.len() != t || states.len() != t || outcomes.len() != t {
            return Err(DtrError::InvalidInput(format!(
                "expected {t} stages of actions, states and outcomes"
            )));
        }
        for s in 0..t {
            let d = schema.actions_per_stage[s];
            if actions[s].len() != n || outcomes[s].len() != n || states[s].rows() != n {
                return Err(DtrError::InvalidInput(format!(
                    "stage {} does not have {n} units",
                    s + 1
                )));
            }
            if states[s].cols() != schema.state_dims[s] {
                return Err(DtrError::InvalidInput(format!(
                    "stage {} states have dimension {}, schema declares {}",
                    s + 1,
                    states[s].cols(),
                    schema.state_dims[s]
                )));
            }
            if let Some(i) = actions[s].iter().position(|&a| a >= d) {
                return Err(DtrError::InvalidInput(format!(
                    "unit {} has action {} at stage {}, outside 0..{d}",
                    unit_ids[i],
                    actions[s][i],
                    s + 1
                )));
            }
        }
        Ok(Self {
            schema,
            unit_ids,
            actions,
            states,
            outcomes,
        })
    }

    pub fn schema(&self) -> &StageSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_ids.is_empty()
    }

    pub fn num_stages(&self) -> usize {
        self.schema.num_stages
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn actions(&self, stage: usize) -> &[usize] {
        &self.actions[stage - 1]
    }

    pub fn states(&self, stage: usize) -> &Matrix {
        &self.states[stage - 1]
    }

    /// Recorded outcomes; stages without an outcome read as zeros.
    pub fn outcomes(&self, stage: usize) -> &[f64] {
        &self.outcomes[stage - 1]
    }

    /// Sum over stages `from..=T` of the recorded outcomes of unit `i`.
    pub fn cumulative_outcome(&self, i: usize, from: usize) -> f64 {
        (from..=self.num_stages()).map(|s| self.outcomes[s - 1][i]).sum()
    }

    /// History features `H_t` for every unit (see module docs for layout).
    pub fn history_features(&self, stage: usize) -> Matrix {
        let n = self.len();
        let width = self.schema.history_width(stage);
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            self.push_history_row(i, stage, &mut data);
        }
        Matrix::from_vec(n, width, data)
    }

    pub fn history_row(&self, i: usize, stage: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.schema.history_width(stage));
        self.push_history_row(i, stage, &mut row);
        row
    }

    fn push_history_row(&self, i: usize, stage: usize, out: &mut Vec<f64>) {
        for s in 0..stage - 1 {
            out.push(self.actions[s][i] as f64);
        }
        for s in 0..stage {
            out.extend_from_slice(self.states[s].row(i));
        }
    }

    /// Subset of units, in the order given.
    pub fn select_units(&self, indices: &[usize]) -> PanelDataset {
        PanelDataset {
            schema: self.schema.clone(),
            unit_ids: indices.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            actions: self
                .actions
                .iter()
                .map(|a| indices.iter().map(|&i| a[i]).collect())
                .collect(),
            states: self.states.iter().map(|m| m.select_rows(indices)).collect(),
            outcomes: self
                .outcomes
                .iter()
                .map(|y| indices.iter().map(|&i| y[i]).collect())
                .collect(),
        }
    }

    pub fn load_csv(path: impl AsRef<Path>, schema: &StageSchema) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, schema, path)
    }

    /// Parse the CSV layout `unit_id, a1..aT, s1_1..sT_pT, y1..yT`.
    /// Columns are located by header name; extra columns are ignored.
    pub fn read_csv<R: Read>(reader: R, schema: &StageSchema, path: &Path) -> Result<Self> {
        schema.validate()?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let locate = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DtrError::MissingColumn {
                    path: path.to_path_buf(),
                    column: name.to_string(),
                })
        };
        let t = schema.num_stages;
        let id_col = locate("unit_id")?;
        let action_cols: Vec<usize> = (1..=t)
            .map(|s| locate(&format!("a{s}")))
            .collect::<Result<_>>()?;
        let state_cols: Vec<Vec<usize>> = (1..=t)
            .map(|s| {
                (1..=schema.state_dims[s - 1])
                    .map(|j| locate(&format!("s{s}_{j}")))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let outcome_cols: Vec<usize> = (1..=t)
            .map(|s| locate(&format!("y{s}")))
            .collect::<Result<_>>()?;

        let mut unit_ids = Vec::new();
        let mut actions = vec![Vec::new(); t];
        let mut states: Vec<Vec<f64>> = vec![Vec::new(); t];
        let mut outcomes = vec![Vec::new(); t];

        for (row_idx, record) in rdr.records().enumerate() {
            // 1-based data row, header excluded
            let row = row_idx + 1;
            let record = record?;
            let cell = |col: usize| -> Result<&str> {
                record.get(col).ok_or_else(|| DtrError::Csv {
                    path: path.to_path_buf(),
                    row,
                    column: headers[col].to_string(),
                    message: "missing cell".into(),
                })
            };
            let number = |col: usize| -> Result<f64> {
                let raw = cell(col)?;
                raw.parse::<f64>().map_err(|_| DtrError::Csv {
                    path: path.to_path_buf(),
                    row,
                    column: headers[col].to_string(),
                    message: format!("`{raw}` is not a number"),
                })
            };
            unit_ids.push(cell(id_col)?.to_string());
            for s in 0..t {
                let col = action_cols[s];
                let raw = cell(col)?;
                let d = schema.actions_per_stage[s];
                let code: usize = raw.parse().map_err(|_| DtrError::Csv {
                    path: path.to_path_buf(),
                    row,
                    column: headers[col].to_string(),
                    message: format!("`{raw}` is not an action code"),
                })?;
                if code >= d {
                    return Err(DtrError::Csv {
                        path: path.to_path_buf(),
                        row,
                        column: headers[col].to_string(),
                        message: format!("action {code} outside range 0..{d}"),
                    });
                }
                actions[s].push(code);
                for &c in &state_cols[s] {
                    states[s].push(number(c)?);
                }
                let y = number(outcome_cols[s])?;
                outcomes[s].push(if schema.outcome_present[s] { y } else { 0.0 });
            }
        }
        let n = unit_ids.len();
        let states = states
            .into_iter()
            .zip(&schema.state_dims)
            .map(|(v, &dim)| Matrix::from_vec(n, dim, v))
            .collect();
        Self::new(schema.clone(), unit_ids, actions, states, outcomes)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_csv_writer(std::io::BufWriter::new(file))
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.schema.csv_header())?;
        let t = self.num_stages();
        for i in 0..self.len() {
            let mut record = vec![self.unit_ids[i].clone()];
            record.extend((0..t).map(|s| self.actions[s][i].to_string()));
            for s in 0..t {
                record.extend(self.states[s].row(i).iter().map(f64::to_string));
            }
            record.extend((0..t).map(|s| self.outcomes[s][i].to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Partition of units into `K` cross-fitting folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    fold_of_unit: Vec<usize>,
    num_folds: usize,
    seed: u64,
}

impl FoldAssignment {
    /// Shuffle `0..n` with the crate's seeded generator and cut the shuffled
    /// order into `k` contiguous slices; the first `n % k` folds get one extra
    /// unit.
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 || k > n {
            return Err(DtrError::TooManyFolds { n, k });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(seed));
        let base = n / k;
        let extra = n % k;
        let mut fold_of_unit = vec![0; n];
        let mut pos = 0;
        for fold in 0..k {
            let size = base + usize::from(fold < extra);
            for &unit in &order[pos..pos + size] {
                fold_of_unit[unit] = fold;
            }
            pos += size;
        }
        Ok(Self {
            fold_of_unit,
            num_folds: k,
            seed,
        })
    }

    pub fn num_folds(&self) -> usize {
        self.num_folds
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.fold_of_unit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fold_of_unit.is_empty()
    }

    #[inline]
    pub fn fold_of(&self, unit: usize) -> usize {
        self.fold_of_unit[unit]
    }

    pub fn fold_of_unit(&self) -> &[usize] {
        &self.fold_of_unit
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.fold_of_unit[i] == fold).collect()
    }

    /// Units outside `fold`, used to fit that fold's nuisance models.
    pub fn training_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.fold_of_unit[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_folds];
        for &f in &self.fold_of_unit {
            sizes[f] += 1;
        }
        sizes
    }

    /// Per-fold training indices as JSON, for auditing cross-fitting.
    pub fn audit_json(&self) -> serde_json::Value {
        let folds: Vec<_> = (0..self.num_folds)
            .map(|k| {
                serde_json::json!({
                    "fold": k,
                    "held_out": self.members(k),
                    "training": self.training_indices(k),
                })
            })
            .collect();
        serde_json::json!({ "seed": self.seed, "num_folds": self.num_folds, "folds": folds })
    }
}

pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    FoldAssignment::new(n, k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_schema() -> StageSchema {
        StageSchema::new(vec![2, 2], vec![1, 1], vec![false, true]).unwrap()
    }

    const TOY: &str = "unit_id,a1,a2,s1_1,s2_1,y1,y2\n\
                       u1,0,1,0.5,1.5,0,2\n\
                       u2,1,0,-0.25,0.75,0,1\n\
                       u3,1,1,2,3,0,-1.5\n";

    fn toy() -> PanelDataset {
        PanelDataset::read_csv(TOY.as_bytes(), &toy_schema(), Path::new("toy.csv")).unwrap()
    }

    #[test]
    fn parses_well_formed_file() {
        let data = toy();
        assert_eq!(data.len(), 3);
        assert_eq!(data.actions(1), &[0, 1, 1]);
        assert_eq!(data.outcomes(2), &[2.0, 1.0, -1.5]);
        assert_eq!(data.unit_ids()[2], "u3");
    }

    #[test]
    fn out_of_range_action_names_row() {
        let bad = TOY.replace("u2,1,0", "u2,2,0");
        let err = PanelDataset::read_csv(bad.as_bytes(), &toy_schema(), Path::new("bad.csv"))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2"), "{msg}");
        assert!(msg.contains("a1"), "{msg}");
    }

    #[test]
    fn missing_column_and_bad_cell() {
        let no_y = "unit_id,a1,a2,s1_1,s2_1,y1\nu1,0,1,0.5,1.5,0\n";
        let err = PanelDataset::read_csv(no_y.as_bytes(), &toy_schema(), Path::new("f.csv"))
            .unwrap_err();
        assert!(matches!(err, DtrError::MissingColumn { ref column, .. } if column == "y2"));

        let text = TOY.replace("-0.25", "abc");
        let err = PanelDataset::read_csv(text.as_bytes(), &toy_schema(), Path::new("f.csv"))
            .unwrap_err();
        assert!(err.to_string().contains("s1_1"));
    }

    #[test]
    fn csv_round_trip() {
        let data = toy();
        let mut buf = Vec::new();
        data.to_csv_writer(&mut buf).unwrap();
        let again =
            PanelDataset::read_csv(buf.as_slice(), &toy_schema(), Path::new("x")).unwrap();
        assert_eq!(data, again);
    }

    #[test]
    fn first_stage_history_is_initial_state() {
        let data = toy();
        let h1 = data.history_features(1);
        assert_eq!(&h1, data.states(1));
    }

    #[test]
    fn history_width_counts_actions_and_states() {
        let schema = StageSchema::new(vec![2, 2], vec![2, 1], vec![true, true]).unwrap();
        assert_eq!(schema.history_width(2), 4);
        assert_eq!(schema.history_column_names(2), vec!["a1", "s1_1", "s1_2", "s2_1"]);
    }

    #[test]
    fn history_columns_nest_across_stages() {
        let schema =
            StageSchema::new(vec![2, 3, 2], vec![2, 1, 3], vec![true, true, true]).unwrap();
        for t in 1..schema.num_stages {
            let cur = schema.history_column_names(t);
            let next = schema.history_column_names(t + 1);
            // drop a_t and the s_{t+1} block from the next history
            let a_t = format!("a{t}");
            let reduced: Vec<_> = next
                .iter()
                .filter(|c| **c != a_t && !c.starts_with(&format!("s{}_", t + 1)))
                .cloned()
                .collect();
            assert_eq!(reduced, cur);
            assert_eq!(cur.len(), schema.history_width(t));
        }
    }

    #[test]
    fn folds_even_split() {
        let f = make_folds(10, 5, 1).unwrap();
        assert_eq!(f.fold_sizes(), vec![2; 5]);
        let mut sizes = make_folds(7, 5, 1).unwrap().fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 1, 1, 2, 2]);
        assert_eq!(make_folds(7, 5, 9).unwrap(), make_folds(7, 5, 9).unwrap());
        assert!(matches!(make_folds(3, 5, 0), Err(DtrError::TooManyFolds { .. })));
    }

    proptest! {
        #[test]
        fn folds_partition_units(n in 2usize..200, k in 2usize..10, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let f = make_folds(n, k, seed).unwrap();
            let sizes = f.fold_sizes();
            let lo = *sizes.iter().min().unwrap();
            let hi = *sizes.iter().max().unwrap();
            prop_assert!(hi - lo <= 1);
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            let mut seen = vec![0; n];
            for fold in 0..k {
                for i in f.members(fold) {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
