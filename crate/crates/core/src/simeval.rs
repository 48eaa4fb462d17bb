//! Simulation designs with stored potential outcomes, true welfare along
//! counterfactual paths, oracle nuisances for discrete designs, and the
//! Monte Carlo benchmark harness.
//!
//! Every design has two binary stages. The stage-1 outcome is identically
//! zero for the continuous designs and the two-arm analytic designs.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{PanelDataset, StageSchema};
use crate::error::{DtrError, Result};
use crate::learners::{learn, mean_and_se, LearnerConfig, Method, NuisanceSource, WelfareEstimate};
use crate::matrix::Matrix;
use crate::policytree::{Dtr, PolicyClass, StagePolicy};
use crate::rng::{derive_seed, label_of, rng_from_seed, Rng};
use crate::scores::Provenance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    Dgp1,
    Dgp2,
    AppendixD,
    AppendixDModified,
    CustomDiscrete,
}

impl DgpKind {
    pub const ALL: [DgpKind; 5] = [
        DgpKind::Dgp1,
        DgpKind::Dgp2,
        DgpKind::AppendixD,
        DgpKind::AppendixDModified,
        DgpKind::CustomDiscrete,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DgpKind::Dgp1 => "dgp1",
            DgpKind::Dgp2 => "dgp2",
            DgpKind::AppendixD => "appendix_d",
            DgpKind::AppendixDModified => "appendix_d_modified",
            DgpKind::CustomDiscrete => "custom_discrete",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        DgpKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| DtrError::InvalidInput(format!("unknown DGP `{name}`")))
    }

    pub fn schema(self) -> StageSchema {
        match self {
            DgpKind::Dgp1 | DgpKind::Dgp2 => {
                StageSchema::new(vec![2, 2], vec![20, 1], vec![false, true]).expect("valid schema")
            }
            _ => self.discrete().expect("discrete design").schema(),
        }
    }

    /// The discrete design behind this kind, if any.
    pub fn discrete(self) -> Option<DiscreteDgp> {
        match self {
            DgpKind::AppendixD => Some(DiscreteDgp::appendix_d()),
            DgpKind::AppendixDModified => Some(DiscreteDgp::appendix_d_modified()),
            DgpKind::CustomDiscrete => Some(DiscreteDgp::confounded()),
            DgpKind::Dgp1 | DgpKind::Dgp2 => None,
        }
    }

    /// Depth-1 trees at stage 1 and depth-2 trees at stage 2 for the
    /// continuous designs; constants for the analytic ones.
    pub fn default_classes(self) -> Vec<PolicyClass> {
        match self {
            DgpKind::Dgp1 | DgpKind::Dgp2 | DgpKind::CustomDiscrete => {
                vec![PolicyClass::trees(1), PolicyClass::trees(2)]
            }
            DgpKind::AppendixD | DgpKind::AppendixDModified => {
                vec![PolicyClass::constant(), PolicyClass::constant()]
            }
        }
    }
}

impl std::fmt::Display for DgpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub seed: u64,
}

/// Observed panel plus every unit's potential second-stage states and
/// potential outcomes.
#[derive(Debug, Clone)]
pub struct PotentialOutcomePanel {
    pub data: PanelDataset,
    /// `s2[a1]`: `n × dim(S_2)` potential states under first action `a1`.
    pub s2: Vec<Matrix>,
    /// `y1[a1][i]`.
    pub y1: Vec<Vec<f64>>,
    /// `y2[a1 * 2 + a2][i]`.
    pub y2: Vec<Vec<f64>>,
}

impl PotentialOutcomePanel {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn y2(&self, a1: usize, a2: usize) -> &[f64] {
        &self.y2[a1 * 2 + a2]
    }

    fn sidecar_header(p2: usize) -> Vec<String> {
        let mut h = vec!["unit_id".to_string()];
        for a1 in 0..2 {
            h.extend((1..=p2).map(|j| format!("s2_{j}_a{a1}")));
        }
        h.extend((0..2).map(|a1| format!("y1_a{a1}")));
        for a1 in 0..2 {
            h.extend((0..2).map(|a2| format!("y2_a{a1}{a2}")));
        }
        h
    }

    /// Write the potential-outcome sidecar CSV.
    pub fn write_sidecar<W: Write>(&self, writer: W) -> Result<()> {
        let p2 = self.s2[0].cols();
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::sidecar_header(p2))?;
        for i in 0..self.len() {
            let mut rec = vec![self.data.unit_ids()[i].clone()];
            for s in &self.s2 {
                rec.extend(s.row(i).iter().map(|v| v.to_string()));
            }
            rec.extend(self.y1.iter().map(|y| y[i].to_string()));
            rec.extend(self.y2.iter().map(|y| y[i].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Attach a sidecar to an observed panel, checking consistency with the
    /// observed columns.
    pub fn read_sidecar<R: Read>(data: PanelDataset, reader: R, path: &Path) -> Result<Self> {
        let schema = data.schema();
        if schema.num_stages != 2 || schema.actions_per_stage != [2, 2] {
            return Err(DtrError::MissingPotentialOutcomes(
                "sidecars describe two binary stages".into(),
            ));
        }
        let p2 = schema.state_dims[1];
        let header = Self::sidecar_header(p2);
        let mut r = csv::Reader::from_reader(reader);
        let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut index = Vec::with_capacity(header.len());
        for col in &header {
            let pos = found.iter().position(|h| h == col).ok_or_else(|| DtrError::MissingColumn {
                path: path.to_path_buf(),
                column: col.clone(),
            })?;
            index.push(pos);
        }
        let n = data.len();
        let mut s2 = vec![Matrix::zeros(n, p2), Matrix::zeros(n, p2)];
        let mut y1 = vec![vec![0.0; n]; 2];
        let mut y2 = vec![vec![0.0; n]; 4];
        let mut rows = 0;
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            if row >= n {
                return Err(DtrError::MissingPotentialOutcomes(format!(
                    "{}: more rows than the dataset",
                    path.display()
                )));
            }
            let cell = |c: usize| -> Result<f64> {
                let raw = rec.get(index[c]).unwrap_or("");
                raw.trim().parse::<f64>().map_err(|_| DtrError::Csv {
                    path: path.to_path_buf(),
                    row: row + 2,
                    column: header[c].clone(),
                    message: format!("`{raw}` is not a number"),
                })
            };
            if rec.get(index[0]) != Some(data.unit_ids()[row].as_str()) {
                return Err(DtrError::MissingPotentialOutcomes(format!(
                    "{}: row {} has unit id {:?}, dataset has {:?}",
                    path.display(),
                    row + 2,
                    rec.get(index[0]),
                    data.unit_ids()[row]
                )));
            }
            let mut c = 1;
            for s in s2.iter_mut() {
                for j in 0..p2 {
                    s.set(row, j, cell(c)?);
                    c += 1;
                }
            }
            for y in y1.iter_mut().chain(y2.iter_mut()) {
                y[row] = cell(c)?;
                c += 1;
            }
            rows += 1;
        }
        if rows != n {
            return Err(DtrError::MissingPotentialOutcomes(format!(
                "{}: {rows} rows for {n} units",
                path.display()
            )));
        }
        Ok(Self { data, s2, y1, y2 })
    }

    pub fn load_sidecar(data: PanelDataset, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        Self::read_sidecar(data, file, path)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn logistic_draw(rng: &mut Rng, index: f64) -> usize {
    let p = 1.0 / (1.0 + index.exp());
    usize::from(rng.random::<f64>() < p)
}

fn generate_continuous(kind: DgpKind, n: usize, seed: u64) -> Result<PotentialOutcomePanel> {
    let mut rng = rng_from_seed(seed);
    let mut s1 = Matrix::zeros(n, 20);
    let mut s2 = vec![Matrix::zeros(n, 1), Matrix::zeros(n, 1)];
    let mut y2 = vec![vec![0.0; n]; 4];
    let mut a1 = vec![0; n];
    let mut a2 = vec![0; n];
    let mut s2_obs = Matrix::zeros(n, 1);
    let mut y2_obs = vec![0.0; n];
    for i in 0..n {
        for j in 0..20 {
            s1.set(i, j, rng.sample(StandardNormal));
        }
        let x = s1.row(i).to_vec();
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        for a in 0..2 {
            let af = a as f64;
            let s = sign(x[0]) * af + x[1] + x[2] * x[2] + x[3] + e1;
            s2[a].set(i, 0, s);
            let phi = match kind {
                DgpKind::Dgp1 => sign(s * (af - 0.5)),
                _ => s + (af - 0.5),
            };
            for b in 0..2 {
                y2[a * 2 + b][i] = phi * b as f64 + 0.5 * s + x[3] - x[4] * x[4] + x[5] + e2;
            }
        }
        a1[i] = logistic_draw(&mut rng, 0.5 * x[1] - 0.5 * x[2] - x[4]);
        let s = s2[a1[i]].get(i, 0);
        a2[i] = logistic_draw(&mut rng, 0.5 * x[4] + 0.5 * s - 0.2 * a1[i] as f64);
        s2_obs.set(i, 0, s);
        y2_obs[i] = y2[a1[i] * 2 + a2[i]][i];
    }
    let data = PanelDataset::new(
        kind.schema(),
        (0..n).map(|i| i.to_string()).collect(),
        vec![a1, a2],
        vec![s1, s2_obs],
        vec![vec![0.0; n], y2_obs],
    )?;
    Ok(PotentialOutcomePanel {
        data,
        s2,
        y1: vec![vec![0.0; n]; 2],
        y2,
    })
}

/// Two binary stages with binary states `S_1`, `S_2` (or no states at
/// all), conditional means given by lookup tables, and additive Gaussian
/// outcome noise. Tables are indexed `[s1][a1][s2][a2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDgp {
    pub with_states: bool,
    /// `P(S_1 = 1)`.
    pub p_s1: f64,
    /// `P(A_1 = 1 | s1)`.
    pub e1: [f64; 2],
    /// `P(S_2 = 1 | s1, a1)`.
    pub p_s2: [[f64; 2]; 2],
    /// `P(A_2 = 1 | s1, a1, s2)`.
    pub e2: [[[f64; 2]; 2]; 2],
    /// `E[Y_1 | s1, a1]`.
    pub m1: [[f64; 2]; 2],
    pub y1_present: bool,
    /// `E[Y_2 | s1, a1, s2, a2]`.
    pub m2: [[[[f64; 2]; 2]; 2]; 2],
    pub noise_sd: f64,
}

impl DiscreteDgp {
    /// No states, independent fair-coin actions, second-stage means
    /// `E[Y_2(1,1)] = 1.0`, `E[Y_2(1,0)] = 0.5`, `E[Y_2(0,1)] = y01`,
    /// `E[Y_2(0,0)] = 0.6`.
    fn analytic(y01: f64) -> Self {
        let mut m2 = [[[[0.0; 2]; 2]; 2]; 2];
        m2[0][1][0] = [0.5, 1.0];
        m2[0][0][0] = [0.6, y01];
        Self {
            with_states: false,
            p_s1: 0.0,
            e1: [0.5; 2],
            p_s2: [[0.0; 2]; 2],
            e2: [[[0.5; 2]; 2]; 2],
            m1: [[0.0; 2]; 2],
            y1_present: false,
            m2,
            noise_sd: 1.0,
        }
    }

    pub fn appendix_d() -> Self {
        Self::analytic(0.0)
    }

    pub fn appendix_d_modified() -> Self {
        Self::analytic(0.4)
    }

    /// A design with strong confounding through both states: treatment
    /// probabilities and outcome means both move with `S_1` and `S_2`.
    pub fn confounded() -> Self {
        let mut m2 = [[[[0.0; 2]; 2]; 2]; 2];
        for (s1, by_a1) in m2.iter_mut().enumerate() {
            for (a1, by_s2) in by_a1.iter_mut().enumerate() {
                for (s2, by_a2) in by_s2.iter_mut().enumerate() {
                    for (a2, m) in by_a2.iter_mut().enumerate() {
                        let (s1, a1, s2, a2) = (s1 as f64, a1 as f64, s2 as f64, a2 as f64);
                        *m = 2.0 * s2 + 0.3 * a1 + a2 * (s1 - 0.5 + 0.5 * a1 - 0.8 * s2);
                    }
                }
            }
        }
        Self {
            with_states: true,
            p_s1: 0.5,
            e1: [0.3, 0.7],
            p_s2: [[0.3, 0.6], [0.5, 0.8]],
            e2: [[[0.2, 0.8], [0.3, 0.7]], [[0.25, 0.75], [0.4, 0.85]]],
            m1: [[0.0, 0.5], [0.2, -0.3]],
            y1_present: true,
            m2,
            noise_sd: 1.0,
        }
    }

    pub fn schema(&self) -> StageSchema {
        let dim = usize::from(self.with_states);
        StageSchema::new(vec![2, 2], vec![dim, dim], vec![self.y1_present, true]).expect("valid schema")
    }

    fn h1(&self, s1: usize) -> Vec<f64> {
        if self.with_states {
            vec![s1 as f64]
        } else {
            Vec::new()
        }
    }

    fn h2(&self, s1: usize, a1: usize, s2: usize) -> Vec<f64> {
        if self.with_states {
            vec![a1 as f64, s1 as f64, s2 as f64]
        } else {
            vec![a1 as f64]
        }
    }

    fn bern(p: f64, a: usize) -> f64 {
        if a == 1 {
            p
        } else {
            1.0 - p
        }
    }

    fn p_s1_of(&self, s1: usize) -> f64 {
        if self.with_states {
            Self::bern(self.p_s1, s1)
        } else {
            f64::from(s1 == 0)
        }
    }

    fn p_s2_of(&self, s1: usize, a1: usize, s2: usize) -> f64 {
        if self.with_states {
            Self::bern(self.p_s2[s1][a1], s2)
        } else {
            f64::from(s2 == 0)
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<PotentialOutcomePanel> {
        let mut rng = rng_from_seed(seed);
        let dim = usize::from(self.with_states);
        let mut s1m = Matrix::zeros(n, dim);
        let mut s2m = Matrix::zeros(n, dim);
        let mut s2p = vec![Matrix::zeros(n, dim), Matrix::zeros(n, dim)];
        let mut y1p = vec![vec![0.0; n]; 2];
        let mut y2p = vec![vec![0.0; n]; 4];
        let (mut a1v, mut a2v) = (vec![0; n], vec![0; n]);
        let (mut y1v, mut y2v) = (vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let s1 = usize::from(self.with_states && rng.random::<f64>() < self.p_s1);
            let a1 = usize::from(rng.random::<f64>() < self.e1[s1]);
            let u2: f64 = rng.random();
            let eps1: f64 = rng.sample::<f64, _>(StandardNormal) * self.noise_sd;
            let eps2: f64 = rng.sample::<f64, _>(StandardNormal) * self.noise_sd;
            let mut s2_of = [0usize; 2];
            for a in 0..2 {
                s2_of[a] = usize::from(self.with_states && u2 < self.p_s2[s1][a]);
                if self.with_states {
                    s2p[a].set(i, 0, s2_of[a] as f64);
                }
                if self.y1_present {
                    y1p[a][i] = self.m1[s1][a] + eps1;
                }
                for b in 0..2 {
                    y2p[a * 2 + b][i] = self.m2[s1][a][s2_of[a]][b] + eps2;
                }
            }
            let s2 = s2_of[a1];
            let a2 = usize::from(rng.random::<f64>() < self.e2[s1][a1][s2]);
            if self.with_states {
                s1m.set(i, 0, s1 as f64);
                s2m.set(i, 0, s2 as f64);
            }
            a1v[i] = a1;
            a2v[i] = a2;
            y1v[i] = y1p[a1][i];
            y2v[i] = y2p[a1 * 2 + a2][i];
        }
        let data = PanelDataset::new(
            self.schema(),
            (0..n).map(|i| i.to_string()).collect(),
            vec![a1v, a2v],
            vec![s1m, s2m],
            vec![y1v, y2v],
        )?;
        Ok(PotentialOutcomePanel {
            data,
            s2: s2p,
            y1: y1p,
            y2: y2p,
        })
    }

    /// `Q_2(h_2, a)` at the cell `(s1, a1, s2)`.
    pub fn q2(&self, s1: usize, a1: usize, s2: usize, a: usize) -> f64 {
        self.m2[s1][a1][s2][a]
    }

    /// `Q_1^{π_2}(s1, a)`.
    pub fn q1(&self, s1: usize, a: usize, pi2: &StagePolicy) -> f64 {
        let y1 = if self.y1_present { self.m1[s1][a] } else { 0.0 };
        y1 + (0..2)
            .map(|s2| {
                let p = self.p_s2_of(s1, a, s2);
                if p == 0.0 {
                    return 0.0;
                }
                p * self.q2(s1, a, s2, pi2.evaluate(&self.h2(s1, a, s2)))
            })
            .sum::<f64>()
    }

    /// Exact welfare `W(π)` by enumeration of the discrete design.
    pub fn value(&self, dtr: &Dtr) -> f64 {
        (0..2)
            .map(|s1| {
                let p = self.p_s1_of(s1);
                if p == 0.0 {
                    return 0.0;
                }
                let a = dtr.stage(1).evaluate(&self.h1(s1));
                p * self.q1(s1, a, dtr.stage(2))
            })
            .sum()
    }

    /// Exact `E[Y_2(A_1, a)]` with `A_1` drawn from the observational policy.
    pub fn final_stage_mean(&self, a: usize) -> f64 {
        let mut total = 0.0;
        for s1 in 0..2 {
            for a1 in 0..2 {
                for s2 in 0..2 {
                    let p = self.p_s1_of(s1) * Self::bern(self.e1[s1], a1) * self.p_s2_of(s1, a1, s2);
                    total += p * self.m2[s1][a1][s2][a];
                }
            }
        }
        total
    }

    /// True propensity `P(A_t = a | h_t)`.
    pub fn propensity(&self, stage: usize, h: &[f64], a: usize) -> f64 {
        let bit = |v: f64| v as usize;
        if stage == 1 {
            let s1 = if self.with_states { bit(h[0]) } else { 0 };
            Self::bern(self.e1[s1], a)
        } else {
            let (s1, s2) = if self.with_states { (bit(h[1]), bit(h[2])) } else { (0, 0) };
            Self::bern(self.e2[s1][bit(h[0])][s2], a)
        }
    }

    fn cells(&self, stage: usize, h: &[f64]) -> (usize, usize, usize) {
        let bit = |v: f64| v as usize;
        match (stage, self.with_states) {
            (1, true) => (bit(h[0]), 0, 0),
            (1, false) => (0, 0, 0),
            (_, true) => (bit(h[1]), bit(h[0]), bit(h[2])),
            (_, false) => (0, bit(h[0]), 0),
        }
    }

    /// True `Q_t^{future}(h, a)` for every action.
    pub fn q_all(&self, stage: usize, h: &[f64], future: &[StagePolicy]) -> Vec<f64> {
        let (s1, a1, s2) = self.cells(stage, h);
        (0..2)
            .map(|a| match stage {
                1 => self.q1(s1, a, &future[0]),
                _ => self.q2(s1, a1, s2, a),
            })
            .collect()
    }
}

/// True propensities and true Q-functions of a discrete design.
pub struct OracleNuisance<'a> {
    pub dgp: &'a DiscreteDgp,
    pub data: &'a PanelDataset,
}

impl NuisanceSource for OracleNuisance<'_> {
    fn propensities(&self, stage: usize) -> Result<Matrix> {
        let h = self.data.history_features(stage);
        let mut out = Matrix::zeros(self.data.len(), 2);
        for i in 0..self.data.len() {
            for a in 0..2 {
                out.set(i, a, self.dgp.propensity(stage, h.row(i), a));
            }
        }
        Ok(out)
    }

    fn q_values(&self, stage: usize, future: &[StagePolicy]) -> Result<Matrix> {
        self.data.schema().check_stage(stage)?;
        if future.len() != 2 - stage {
            return Err(DtrError::InvalidInput("oracle Q needs the later-stage policies".into()));
        }
        let h = self.data.history_features(stage);
        let mut out = Matrix::zeros(self.data.len(), 2);
        for i in 0..self.data.len() {
            out.row_mut(i).copy_from_slice(&self.dgp.q_all(stage, h.row(i), future));
        }
        Ok(out)
    }

    fn eta(&self) -> f64 {
        let mut m: f64 = 1.0;
        for s1 in 0..2 {
            m = m.min(self.dgp.e1[s1]).min(1.0 - self.dgp.e1[s1]);
            for a1 in 0..2 {
                for s2 in 0..2 {
                    let p = self.dgp.e2[s1][a1][s2];
                    m = m.min(p).min(1.0 - p);
                }
            }
        }
        m
    }

    fn provenance(&self) -> Provenance {
        Provenance::OracleAipw
    }
}

pub fn generate(spec: &DgpSpec) -> Result<PotentialOutcomePanel> {
    if spec.n == 0 {
        return Err(DtrError::InvalidInput("sample size must be at least 1".into()));
    }
    match spec.kind {
        DgpKind::Dgp1 | DgpKind::Dgp2 => generate_continuous(spec.kind, spec.n, spec.seed),
        kind => kind.discrete().expect("discrete design").generate(spec.n, spec.seed),
    }
}

/// Per-unit total outcome along the counterfactual path of `dtr`.
pub fn true_welfare_terms(pop: &PotentialOutcomePanel, dtr: &Dtr) -> Result<Vec<f64>> {
    let data = &pop.data;
    let schema = data.schema();
    if schema.num_stages != 2 || dtr.num_stages() != 2 || pop.y2.len() != 4 || pop.s2.len() != 2 {
        return Err(DtrError::MissingPotentialOutcomes(
            "true welfare needs a two-stage regime and full potential-outcome maps".into(),
        ));
    }
    let s1 = data.states(1);
    let present = schema.outcome_present[0];
    let mut h2 = Vec::with_capacity(schema.history_width(2));
    Ok((0..data.len())
        .map(|i| {
            let h1 = s1.row(i);
            let a1 = dtr.stage(1).evaluate(h1);
            h2.clear();
            h2.push(a1 as f64);
            h2.extend_from_slice(h1);
            h2.extend_from_slice(pop.s2[a1].row(i));
            let a2 = dtr.stage(2).evaluate(&h2);
            let y1 = if present { pop.y1[a1][i] } else { 0.0 };
            y1 + pop.y2[a1 * 2 + a2][i]
        })
        .collect())
}

pub fn true_welfare(pop: &PotentialOutcomePanel, dtr: &Dtr) -> Result<f64> {
    Ok(true_welfare_with_se(pop, dtr)?.value)
}

pub fn true_welfare_with_se(pop: &PotentialOutcomePanel, dtr: &Dtr) -> Result<WelfareEstimate> {
    Ok(mean_and_se(&true_welfare_terms(pop, dtr)?))
}

/// A benchmark entry: a learner plus optional misspecified nuisances,
/// labelled like `dr`, `dr+miss_q`, `ipw+miss_ps`.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkMethod {
    pub label: String,
    pub config: LearnerConfig,
}

impl BenchmarkMethod {
    /// Parse `method[+miss_q][+miss_ps]` on top of `base`.
    pub fn parse(label: &str, base: &LearnerConfig) -> Result<Self> {
        let mut parts = label.split('+');
        let method = Method::parse(parts.next().unwrap_or(""))?;
        let mut config = LearnerConfig {
            method,
            ..base.clone()
        };
        for flag in parts {
            config = match flag {
                "miss_q" => config.misspecify_q(),
                "miss_ps" => config.misspecify_propensity(),
                other => {
                    return Err(DtrError::InvalidInput(format!(
                        "unknown method modifier `{other}` in `{label}`"
                    )))
                }
            };
        }
        Ok(Self {
            label: label.to_string(),
            config,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub method: String,
    pub seed: u64,
    pub welfare: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean: Option<f64>,
    /// Absent with fewer than two successful reps.
    pub sd: Option<f64>,
    pub reps: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub dgp: DgpKind,
    pub n_train: usize,
    pub n_test: usize,
    pub reps: usize,
    pub master_seed: u64,
    pub records: Vec<RepRecord>,
    pub summaries: Vec<MethodSummary>,
    pub notes: Vec<String>,
}

impl BenchmarkReport {
    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn mean(&self, method: &str) -> Option<f64> {
        self.summary(method).and_then(|s| s.mean)
    }

    /// One JSON object per rep and method, then one summary object per method.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let mut v = serde_json::to_value(r)?;
            v["type"] = "rep".into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        for s in &self.summaries {
            let mut v = serde_json::to_value(s)?;
            v["type"] = "summary".into();
            v["dgp"] = self.dgp.name().into();
            v["n_train"] = self.n_train.into();
            v["n_test"] = self.n_test.into();
            v["master_seed"] = self.master_seed.into();
            v["notes"] = serde_json::to_value(&self.notes)?;
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Fixed-width table: one row per method with mean (sd) welfare.
    pub fn table(&self) -> String {
        let width = self
            .summaries
            .iter()
            .map(|s| s.method.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut out = String::new();
        let _ = writeln!(out, "{} n = {}, {} reps, test n = {}", self.dgp, self.n_train, self.reps, self.n_test);
        let _ = writeln!(out, "{:<width$}  {:>16}  {:>8}", "method", "welfare (sd)", "failures");
        for s in &self.summaries {
            let cell = match (s.mean, s.sd) {
                (Some(m), Some(sd)) => format!("{m:.2} ({sd:.2})"),
                (Some(m), None) => format!("{m:.2}"),
                _ => "-".to_string(),
            };
            let _ = writeln!(out, "{:<width$}  {:>16}  {:>8}", s.method, cell, s.failures);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    pub n_train: usize,
    pub n_test: usize,
    pub reps: usize,
    pub master_seed: u64,
    /// Record wall-clock time per fit. Off by default so reports are
    /// reproducible byte for byte.
    pub timings: bool,
}

/// Seed of rep `rep`.
pub fn rep_seed(master_seed: u64, rep: usize) -> u64 {
    derive_seed(master_seed, &[label_of("rep"), rep as u64])
}

/// Seed handed to a method within a rep; depends only on the rep seed and
/// the method label.
pub fn method_seed(rep_seed: u64, label: &str) -> u64 {
    derive_seed(rep_seed, &[label_of("method"), label_of(label)])
}

fn summarize(label: &str, records: &[RepRecord]) -> MethodSummary {
    let values: Vec<f64> = records
        .iter()
        .filter(|r| r.method == label)
        .filter_map(|r| r.welfare)
        .collect();
    let failures = records
        .iter()
        .filter(|r| r.method == label && r.welfare.is_none())
        .count();
    let n = values.len();
    let mean = (n > 0).then(|| values.iter().sum::<f64>() / n as f64);
    let sd = (n > 1).then(|| {
        let m = mean.expect("non-empty");
        (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    });
    MethodSummary {
        method: label.to_string(),
        mean,
        sd,
        reps: n,
        failures,
    }
}

/// Monte Carlo comparison of `methods` on fresh train and test panels per rep.
pub fn run_benchmark(
    methods: &[BenchmarkMethod],
    dgp: DgpKind,
    opts: &BenchmarkOptions,
) -> Result<BenchmarkReport> {
    if opts.reps == 0 {
        return Err(DtrError::InvalidInput("reps must be at least 1".into()));
    }
    if methods.is_empty() {
        return Err(DtrError::InvalidInput("no methods to benchmark".into()));
    }
    let per_rep: Vec<Result<Vec<RepRecord>>> = (0..opts.reps)
        .into_par_iter()
        .map(|rep| {
            let seed = rep_seed(opts.master_seed, rep);
            let train = generate(&DgpSpec {
                kind: dgp,
                n: opts.n_train,
                seed: derive_seed(seed, &[label_of("train")]),
            })?;
            let test = generate(&DgpSpec {
                kind: dgp,
                n: opts.n_test,
                seed: derive_seed(seed, &[label_of("test")]),
            })?;
            Ok(methods
                .iter()
                .map(|m| {
                    let cfg = LearnerConfig {
                        seed: method_seed(seed, &m.label),
                        ..m.config.clone()
                    };
                    let start = Instant::now();
                    let outcome = learn(&train.data, &cfg).and_then(|l| true_welfare(&test, &l.dtr));
                    let wall_ms = opts.timings.then(|| start.elapsed().as_millis() as u64);
                    let (welfare, error) = match outcome {
                        Ok(w) => (Some(w), None),
                        Err(e) => {
                            log::warn!("rep {rep}, {}: {e}", m.label);
                            (None, Some(e.to_string()))
                        }
                    };
                    RepRecord {
                        rep,
                        method: m.label.clone(),
                        seed: cfg.seed,
                        welfare,
                        error,
                        wall_ms,
                    }
                })
                .collect())
        })
        .collect();
    let mut records = Vec::with_capacity(opts.reps * methods.len());
    for r in per_rep {
        records.extend(r?);
    }
    let summaries = methods.iter().map(|m| summarize(&m.label, &records)).collect();
    let mut notes = vec![format!(
        "welfare is the mean total outcome along counterfactual paths in a test panel of {} units",
        opts.n_test
    )];
    if matches!(dgp, DgpKind::Dgp1 | DgpKind::Dgp2 | DgpKind::AppendixD | DgpKind::AppendixDModified) {
        notes.push("stage-1 outcome is identically zero".into());
    }
    Ok(BenchmarkReport {
        dgp,
        n_train: opts.n_train,
        n_test: opts.n_test,
        reps: opts.reps,
        master_seed: opts.master_seed,
        records,
        summaries,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observed_columns_match_potential_values() {
        for kind in DgpKind::ALL {
            let pop = generate(&DgpSpec { kind, n: 300, seed: 4 }).unwrap();
            let d = &pop.data;
            for i in 0..d.len() {
                let (a1, a2) = (d.actions(1)[i], d.actions(2)[i]);
                assert_eq!(d.outcomes(2)[i], pop.y2(a1, a2)[i]);
                assert_eq!(d.states(2).row(i), pop.s2[a1].row(i));
                if d.schema().outcome_present[0] {
                    assert_eq!(d.outcomes(1)[i], pop.y1[a1][i]);
                }
            }
        }
    }

    #[test]
    fn continuous_design_shapes() {
        let pop = generate(&DgpSpec { kind: DgpKind::Dgp1, n: 50, seed: 1 }).unwrap();
        assert_eq!(pop.data.states(1).cols(), 20);
        assert_eq!(pop.data.history_features(2).cols(), 22);
        assert!(pop.data.outcomes(1).iter().all(|&y| y == 0.0));
    }

    #[test]
    fn analytic_exact_values() {
        let d = DiscreteDgp::appendix_d();
        assert_eq!(d.value(&Dtr::constant(&[1, 1])), 1.0);
        assert_eq!(d.value(&Dtr::constant(&[0, 0])), 0.6);
        assert_eq!(d.value(&Dtr::constant(&[1, 0])), 0.5);
        assert_eq!(d.value(&Dtr::constant(&[0, 1])), 0.0);
        assert_eq!(DiscreteDgp::appendix_d_modified().value(&Dtr::constant(&[0, 1])), 0.4);
    }

    #[test]
    fn identical_regimes_have_identical_welfare() {
        let pop = generate(&DgpSpec { kind: DgpKind::Dgp1, n: 500, seed: 2 }).unwrap();
        let a = Dtr::constant(&[1, 0]);
        let b = Dtr::constant(&[1, 0]);
        assert_eq!(true_welfare(&pop, &a).unwrap(), true_welfare(&pop, &b).unwrap());
    }

    #[test]
    fn sidecar_round_trip() {
        let pop = generate(&DgpSpec { kind: DgpKind::CustomDiscrete, n: 20, seed: 3 }).unwrap();
        let mut buf = Vec::new();
        pop.write_sidecar(&mut buf).unwrap();
        let back = PotentialOutcomePanel::read_sidecar(pop.data.clone(), buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back.y2, pop.y2);
        assert_eq!(back.s2, pop.s2);
    }

    #[test]
    fn benchmark_single_rep_has_no_sd() {
        let base = LearnerConfig::new(Method::Dr, DgpKind::AppendixD.default_classes(), 0);
        let m = BenchmarkMethod::parse("dr", &base).unwrap();
        let opts = BenchmarkOptions {
            n_train: 200,
            n_test: 1000,
            reps: 1,
            master_seed: 5,
            timings: false,
        };
        let report = run_benchmark(&[m], DgpKind::AppendixD, &opts).unwrap();
        assert_eq!(report.records.len(), 1);
        assert!(report.summaries[0].sd.is_none());
        assert!(report.summaries[0].mean.is_some());
    }

    #[test]
    fn method_labels() {
        let base = LearnerConfig::new(Method::Dr, vec![], 0);
        let m = BenchmarkMethod::parse("ipw+miss_ps", &base).unwrap();
        assert_eq!(m.config.method, Method::Ipw);
        assert_eq!(m.config.propensity.predictors, crate::nuisance::PredictorSet::InitialState);
        assert!(BenchmarkMethod::parse("dr+bogus", &base).is_err());
        assert_ne!(method_seed(1, "dr"), method_seed(1, "ipw"));
    }
}
