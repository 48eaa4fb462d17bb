//! Doubly robust estimation of dynamic treatment regimes with tree-based
//! policy classes.
//!
//! The pipeline runs backward over stages: cross-fitted propensities and
//! Q-functions feed AIPW scores, and an exact tree search picks each stage's
//! policy given the later ones.

pub mod dataset;
pub mod error;
pub mod learners;
pub mod matrix;
pub mod nuisance;
pub mod policytree;
pub mod rng;
pub mod scores;
pub mod simeval;

pub use dataset::{FoldAssignment, PanelDataset, StageSchema};
pub use error::{DtrError, Result};
pub use learners::{learn, LearnedDtr, LearnerConfig, Method};
pub use matrix::Matrix;
pub use policytree::{Dtr, PolicyClass, PolicyTree, StageConstraint, StagePolicy};
pub use scores::ScoreMatrix;
