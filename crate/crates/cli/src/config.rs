//! Run-config file: dataset schema, per-stage policy classes, learner knobs.
//!
//! ```toml
//! [schema]
//! actions_per_stage = [2, 2]
//! state_dims = [20, 1]
//! outcome_present = [false, true]
//!
//! [[stage]]
//! depth = 1
//!
//! [[stage]]
//! depth = 2
//! features = [0, 21]
//! constraint = "absorbing_start"
//!
//! [learner]
//! k = 5
//! eta = 0.01
//! trees = 50
//! ```

use std::path::Path;

use anyhow::{bail, Context, Result};
use drdtr_core::nuisance::{ForestParams, RegressorSpec};
use drdtr_core::{LearnerConfig, Method, PolicyClass, StageConstraint, StageSchema};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaSection {
    pub actions_per_stage: Vec<usize>,
    pub state_dims: Vec<usize>,
    pub outcome_present: Vec<bool>,
}

impl SchemaSection {
    pub fn from_schema(s: &StageSchema) -> Self {
        Self {
            actions_per_stage: s.actions_per_stage.clone(),
            state_dims: s.state_dims.clone(),
            outcome_present: s.outcome_present.clone(),
        }
    }

    pub fn to_schema(&self) -> Result<StageSchema> {
        Ok(StageSchema::new(
            self.actions_per_stage.clone(),
            self.state_dims.clone(),
            self.outcome_present.clone(),
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<usize>>,
    /// `none`, `absorbing_start` or `absorbing_stop`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSection {
    pub k: Option<usize>,
    pub eta: Option<f64>,
    pub trees: Option<usize>,
    pub min_leaf: Option<usize>,
    pub mtry_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: SchemaSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage: Vec<StageSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learner: Option<LearnerSection>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn for_schema(schema: &StageSchema) -> Self {
        Self {
            schema: SchemaSection::from_schema(schema),
            stage: Vec::new(),
            learner: None,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Policy classes per stage. `depths` from the command line replaces the
    /// file's depths; stages absent from both default to depth 1.
    pub fn classes(&self, schema: &StageSchema, depths: Option<&[usize]>) -> Result<Vec<PolicyClass>> {
        let t_max = schema.num_stages;
        if !self.stage.is_empty() && self.stage.len() != t_max {
            bail!("config has {} [[stage]] sections for {t_max} stages", self.stage.len());
        }
        if let Some(d) = depths {
            if d.len() != t_max {
                bail!("--depth lists {} depths for {t_max} stages", d.len());
            }
        }
        (0..t_max)
            .map(|t| {
                let section = self.stage.get(t);
                let depth = depths
                    .map(|d| d[t])
                    .or(section.map(|s| s.depth))
                    .unwrap_or(1);
                let mut class = PolicyClass::trees(depth);
                if let Some(f) = section.and_then(|s| s.features.clone()) {
                    class = class.with_features(f);
                }
                let constraint = match section.and_then(|s| s.constraint.as_deref()) {
                    None | Some("none") => StageConstraint::unconstrained(),
                    Some("absorbing_start") => StageConstraint::absorbing_start(schema.num_actions(t + 1)),
                    Some("absorbing_stop") => StageConstraint::absorbing_stop(),
                    Some(other) => bail!("unknown constraint `{other}` at stage {}", t + 1),
                };
                if t == 0 && !constraint.is_unconstrained() {
                    bail!("stage 1 has no previous action to constrain on");
                }
                Ok(class.with_constraint(constraint))
            })
            .collect()
    }

    /// Apply the `[learner]` section to a fresh config.
    pub fn learner_config(&self, method: Method, classes: Vec<PolicyClass>, seed: u64) -> LearnerConfig {
        let mut cfg = LearnerConfig::new(method, classes, seed);
        if let Some(l) = &self.learner {
            apply_learner_section(&mut cfg, l);
        }
        cfg
    }
}

pub fn apply_learner_section(cfg: &mut LearnerConfig, l: &LearnerSection) {
    if let Some(k) = l.k {
        cfg.k = k;
    }
    if let Some(eta) = l.eta {
        cfg.eta = eta;
    }
    let defaults = ForestParams::default();
    let forest = ForestParams {
        num_trees: l.trees.unwrap_or(defaults.num_trees),
        min_leaf: l.min_leaf.unwrap_or(defaults.min_leaf),
        mtry_fraction: l.mtry_fraction.unwrap_or(defaults.mtry_fraction),
        ..defaults
    };
    cfg.propensity = RegressorSpec::forest(forest.clone());
    cfg.q = RegressorSpec::forest(forest);
}

/// Comma-separated list of non-negative integers.
pub fn parse_list(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .with_context(|| format!("`{p}` in `{raw}` is not a non-negative integer"))
        })
        .collect()
}
