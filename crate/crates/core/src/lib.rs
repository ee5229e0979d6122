//! Censored-outcome Q-learning for multi-stage treatment regimes.
//!
//! Stage outcomes are right-censored survival times. Each stage's
//! counterfactual outcome model is fit per treatment arm with
//! Buckley-James boosting, classical Buckley-James, or a Cox model, and the
//! estimated rule picks the action sequence with the largest predicted
//! value.

pub mod base_learners;
pub mod bj_boost;
pub mod cox_baseline;
pub mod data_model;
pub mod ingest;
pub mod kaplan_meier;
pub mod q_learning;
pub mod simulation;

pub use bj_boost::{bj_boost_fit, bj_linear_fit, BoostConfig, BoostModel};
pub use cox_baseline::{cox_fit, cox_rmst, CoxModel};
pub use data_model::{Action, ActionSeq, Subject, TrialDataset};
pub use q_learning::{backward_induction, Method, Mode, Policy, QConfig};
