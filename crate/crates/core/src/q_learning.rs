//! Stage-wise counterfactual Q estimation and treatment-rule extraction.
//!
//! Each stage gets one outcome model per treatment arm, fit on the subjects
//! who received that arm. Evaluating every arm's model on a subject's
//! recorded history gives that subject's counterfactual Q-values; the
//! estimated rule picks the action sequence with the largest total.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bj_boost::{
    bj_boost_fit, bj_linear_fit, cv_tune, BoostConfig, BoostError, BoostModel, LinearModel,
};
use crate::cox_baseline::{cox_fit, cox_rmst, CoxError, CoxModel};
use crate::data_model::{Action, ActionSeq, Subject, TrialDataset};

pub const POLICY_FORMAT: &str = "bjq-policy";
pub const POLICY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum QError {
    #[error("positivity violated at stage {stage}, action {action}")]
    PositivityViolated { stage: usize, action: Action },
    #[error("stage {stage}, action {action}: {source}")]
    Fit {
        stage: usize,
        action: Action,
        #[source]
        source: FitError,
    },
    #[error("stage {stage}: {len} targets for {expected} subjects in the fitting set")]
    TargetLength {
        stage: usize,
        len: usize,
        expected: usize,
    },
    #[error("stage {stage}: histories have inconsistent dimensions")]
    RaggedHistory { stage: usize },
    #[error("subject `{subject}` has no history for stage {stage}")]
    MissingHistory { subject: String, stage: usize },
    #[error("policy has no model for stage {0}")]
    MissingStage(usize),
    #[error("policy has no model for action {action} at stage {stage}")]
    MissingArm { stage: usize, action: Action },
    #[error("stage {stage} is outside 1..={num_stages}")]
    InvalidStage { stage: usize, num_stages: usize },
    #[error("empty Q-value map")]
    EmptyQMap,
    #[error("decision lists differ in length ({estimated} vs {oracle})")]
    LengthMismatch { estimated: usize, oracle: usize },
    #[error("decision lists are empty")]
    EmptyDecisions,
    #[error("evaluation failed: {0}")]
    Evaluate(FitError),
    #[error("policy file: {0}")]
    Format(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error(transparent)]
    Boost(#[from] BoostError),
    #[error(transparent)]
    Cox(#[from] CoxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Classical linear Buckley-James.
    #[serde(rename = "bj")]
    Bj,
    /// Buckley-James boosting with componentwise least squares.
    #[serde(rename = "bj-ls")]
    BjLs,
    /// Buckley-James boosting with regression trees.
    #[serde(rename = "bj-tree")]
    BjTree,
    /// Cox proportional hazards, Q-value = restricted mean survival time.
    #[serde(rename = "cox")]
    Cox,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Bj, Method::BjLs, Method::BjTree, Method::Cox];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bj => "bj",
            Method::BjLs => "bj-ls",
            Method::BjTree => "bj-tree",
            Method::Cox => "cox",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected one of bj, bj-ls, bj-tree, cox)"))
    }
}

/// How stage targets are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Each stage is fit on its own outcomes and sequence values add up the
    /// per-stage Q-values.
    #[default]
    Additive,
    /// Earlier stages are fit on pseudo-outcomes: the stage outcome plus the
    /// best next-stage Q-value.
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSettings {
    pub folds: usize,
    pub seed: u64,
    pub iterations: Vec<usize>,
    pub learning_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QConfig {
    pub tree: BoostConfig,
    pub componentwise: BoostConfig,
    pub linear_max_iter: usize,
    pub linear_tol: f64,
    /// Tune boosting iterations and learning rate per arm when set.
    pub cv: Option<CvSettings>,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            tree: BoostConfig::tree(),
            componentwise: BoostConfig::componentwise(),
            linear_max_iter: 100,
            linear_tol: 1e-6,
            cv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArmModel {
    Boost(BoostModel),
    Linear(LinearModel),
    Cox(CoxModel),
}

impl ArmModel {
    pub fn q_value(&self, history: &[f64]) -> Result<f64, FitError> {
        Ok(match self {
            ArmModel::Boost(m) => m.predict(history)?,
            ArmModel::Linear(m) => m.predict(history)?,
            ArmModel::Cox(m) => cox_rmst(m, history, m.train_horizon)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QStageModel {
    pub stage_index: usize,
    pub method: Method,
    #[serde(with = "arm_list")]
    pub per_arm_models: BTreeMap<Action, ArmModel>,
}

/// JSON object keys are strings, so arm models travel as a list of
/// `{action, model}` entries.
mod arm_list {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::ArmModel;
    use crate::data_model::Action;

    #[derive(Serialize)]
    struct EntryRef<'a> {
        action: Action,
        model: &'a ArmModel,
    }

    #[derive(Deserialize)]
    struct Entry {
        action: Action,
        model: ArmModel,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<Action, ArmModel>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter().map(|(&action, model)| EntryRef { action, model }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Action, ArmModel>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        let mut map = BTreeMap::new();
        for e in entries {
            if map.insert(e.action, e.model).is_some() {
                return Err(serde::de::Error::custom(format!("duplicate action {}", e.action)));
            }
        }
        Ok(map)
    }
}

impl QStageModel {
    pub fn q_values(&self, history: &[f64]) -> Result<BTreeMap<Action, f64>, FitError> {
        self.per_arm_models
            .iter()
            .map(|(&a, m)| Ok((a, m.q_value(history)?)))
            .collect()
    }

    fn max_q(&self, history: &[f64]) -> Result<f64, FitError> {
        Ok(self
            .q_values(history)?
            .values()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub method: Method,
    pub mode: Mode,
    pub config: QConfig,
    pub action_set: Vec<Action>,
    pub num_stages: usize,
    /// Stage models from the last stage down to stage 1.
    pub stage_models: Vec<QStageModel>,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    policy: Policy,
}

impl Policy {
    pub fn stage(&self, stage: usize) -> Option<&QStageModel> {
        self.stage_models.iter().find(|m| m.stage_index == stage)
    }

    pub fn to_json(&self) -> String {
        let file = PolicyFile {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            policy: self.clone(),
        };
        serde_json::to_string_pretty(&file).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, QError> {
        let file: PolicyFile =
            serde_json::from_str(text).map_err(|e| QError::Format(e.to_string()))?;
        if file.format != POLICY_FORMAT {
            return Err(QError::Format(format!("unexpected format `{}`", file.format)));
        }
        if file.version != POLICY_VERSION {
            return Err(QError::Format(format!("unsupported version {}", file.version)));
        }
        let policy = file.policy;
        for k in 1..=policy.num_stages {
            let stage = policy.stage(k).ok_or(QError::MissingStage(k))?;
            for &a in &policy.action_set {
                if !stage.per_arm_models.contains_key(&a) {
                    return Err(QError::MissingArm { stage: k, action: a });
                }
            }
        }
        Ok(policy)
    }
}

/// Stage-`stage` observed times of the fitting set, in fitting-set order.
pub fn observed_targets(dataset: &TrialDataset, stage: usize) -> Vec<f64> {
    dataset
        .fitting_set(stage)
        .into_iter()
        .map(|i| dataset.subjects[i].stages[stage - 1].observed_time)
        .collect()
}

fn history_matrix(
    dataset: &TrialDataset,
    stage: usize,
    rows: &[usize],
) -> Result<DMatrix<f64>, QError> {
    let p = dataset.subjects[rows[0]].stages[stage - 1].history.len();
    if rows
        .iter()
        .any(|&i| dataset.subjects[i].stages[stage - 1].history.len() != p)
    {
        return Err(QError::RaggedHistory { stage });
    }
    Ok(DMatrix::from_fn(rows.len(), p, |r, j| {
        dataset.subjects[rows[r]].stages[stage - 1].history.values[j]
    }))
}

fn fit_arm(
    method: Method,
    config: &QConfig,
    x: &DMatrix<f64>,
    y: &[f64],
    d: &[bool],
) -> Result<ArmModel, FitError> {
    let boost = |base: &BoostConfig| -> Result<ArmModel, FitError> {
        let chosen = match &config.cv {
            Some(cv) => {
                let grid: Vec<BoostConfig> = cv
                    .iterations
                    .iter()
                    .flat_map(|&m| {
                        cv.learning_rates.iter().map(move |&nu| BoostConfig {
                            iterations: m,
                            learning_rate: nu,
                            ..*base
                        })
                    })
                    .collect();
                if grid.is_empty() {
                    *base
                } else {
                    cv_tune(x, y, d, &grid, cv.folds, cv.seed)?
                }
            }
            None => *base,
        };
        Ok(ArmModel::Boost(bj_boost_fit(x, y, d, &chosen)?))
    };
    match method {
        Method::Bj => Ok(ArmModel::Linear(
            bj_linear_fit(x, y, d, config.linear_max_iter, config.linear_tol)?.model,
        )),
        Method::BjLs => boost(&config.componentwise),
        Method::BjTree => boost(&config.tree),
        Method::Cox => Ok(ArmModel::Cox(cox_fit(x, y, d)?)),
    }
}

/// Fits one outcome model per action on stage `stage`.
///
/// `targets` is aligned with [`TrialDataset::fitting_set`]; the event flags
/// come from the stage records, so censoring is handled by the chosen
/// fitter.
pub fn fit_stage_q(
    dataset: &TrialDataset,
    stage: usize,
    targets: &[f64],
    method: Method,
    config: &QConfig,
) -> Result<QStageModel, QError> {
    if stage == 0 || stage > dataset.num_stages {
        return Err(QError::InvalidStage {
            stage,
            num_stages: dataset.num_stages,
        });
    }
    let set = dataset.fitting_set(stage);
    if targets.len() != set.len() {
        return Err(QError::TargetLength {
            stage,
            len: targets.len(),
            expected: set.len(),
        });
    }

    let mut per_arm_models = BTreeMap::new();
    for &action in &dataset.action_set {
        let (rows, y): (Vec<usize>, Vec<f64>) = set
            .iter()
            .zip(targets)
            .filter(|(&i, _)| dataset.subjects[i].stages[stage - 1].treatment == action)
            .map(|(&i, &t)| (i, t))
            .unzip();
        if rows.is_empty() {
            return Err(QError::PositivityViolated { stage, action });
        }
        let d: Vec<bool> = rows
            .iter()
            .map(|&i| dataset.subjects[i].stages[stage - 1].event)
            .collect();
        let x = history_matrix(dataset, stage, &rows)?;
        let model = fit_arm(method, config, &x, &y, &d).map_err(|source| QError::Fit {
            stage,
            action,
            source,
        })?;
        per_arm_models.insert(action, model);
    }
    Ok(QStageModel {
        stage_index: stage,
        method,
        per_arm_models,
    })
}

/// Stage-`stage` observed times plus the best stage-`stage + 1` Q-value at
/// each subject's next-stage history (zero when the next stage was not
/// reached), aligned with the stage fitting set.
pub fn pseudo_outcomes(
    dataset: &TrialDataset,
    stage: usize,
    next: &QStageModel,
) -> Result<Vec<f64>, QError> {
    dataset
        .fitting_set(stage)
        .into_iter()
        .map(|i| {
            let subject = &dataset.subjects[i];
            let y = subject.stages[stage - 1].observed_time;
            match subject.stage(next.stage_index) {
                Some(rec) if rec.reached => Ok(y + next
                    .max_q(&rec.history.values)
                    .map_err(QError::Evaluate)?),
                _ => Ok(y),
            }
        })
        .collect()
}

/// Fits stage models from the last stage backwards.
pub fn backward_induction(
    dataset: &TrialDataset,
    method: Method,
    config: &QConfig,
    mode: Mode,
) -> Result<Policy, QError> {
    let mut stage_models: Vec<QStageModel> = Vec::with_capacity(dataset.num_stages);
    for stage in (1..=dataset.num_stages).rev() {
        let targets = match (mode, stage_models.last()) {
            (Mode::Backward, Some(next)) => pseudo_outcomes(dataset, stage, next)?,
            _ => observed_targets(dataset, stage),
        };
        stage_models.push(fit_stage_q(dataset, stage, &targets, method, config)?);
    }
    Ok(Policy {
        method,
        mode,
        config: config.clone(),
        action_set: dataset.action_set.clone(),
        num_stages: dataset.num_stages,
        stage_models,
    })
}

/// Every action sequence of length `len` in lexicographic order.
pub fn all_sequences(actions: &[Action], len: usize) -> Vec<ActionSeq> {
    let mut out = vec![ActionSeq::default()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                actions.iter().map(move |&a| {
                    let mut next = prefix.0.clone();
                    next.push(a);
                    ActionSeq(next)
                })
            })
            .collect();
    }
    out
}

/// Estimated value of every action sequence over the stages the subject
/// reached, evaluated on the subject's recorded histories.
///
/// In additive mode a sequence's value is the sum of its per-stage
/// Q-values. In backward mode stage-1 Q-values already carry the best
/// continuation, so each later stage contributes its Q-value minus its best
/// Q-value.
pub fn q_values(policy: &Policy, subject: &Subject) -> Result<BTreeMap<ActionSeq, f64>, QError> {
    let reached = subject.reached_stages().min(policy.num_stages);
    if reached == 0 {
        return Err(QError::MissingHistory {
            subject: subject.id.clone(),
            stage: 1,
        });
    }
    let mut per_stage = Vec::with_capacity(reached);
    for k in 1..=reached {
        let model = policy.stage(k).ok_or(QError::MissingStage(k))?;
        let rec = subject.stage(k).ok_or_else(|| QError::MissingHistory {
            subject: subject.id.clone(),
            stage: k,
        })?;
        let q = model
            .q_values(&rec.history.values)
            .map_err(QError::Evaluate)?;
        let best = q.values().copied().fold(f64::NEG_INFINITY, f64::max);
        let offset = match policy.mode {
            Mode::Backward if k > 1 => best,
            _ => 0.0,
        };
        per_stage.push((q, offset));
    }

    let mut out = BTreeMap::new();
    for seq in all_sequences(&policy.action_set, reached) {
        let mut value = 0.0;
        for (k, a) in seq.0.iter().enumerate() {
            let (q, offset) = &per_stage[k];
            let v = q.get(a).ok_or(QError::MissingArm {
                stage: k + 1,
                action: *a,
            })?;
            value += v - offset;
        }
        out.insert(seq, value);
    }
    Ok(out)
}

/// Argmax with ties going to the lexicographically smallest sequence.
pub fn optimal_decision(qmap: &BTreeMap<ActionSeq, f64>) -> Result<ActionSeq, QError> {
    let mut best: Option<(&ActionSeq, f64)> = None;
    for (seq, &v) in qmap {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((seq, v));
        }
    }
    best.map(|(s, _)| s.clone()).ok_or(QError::EmptyQMap)
}

/// Fraction of positions where the two decision lists agree exactly.
pub fn decision_accuracy(estimated: &[ActionSeq], oracle: &[ActionSeq]) -> Result<f64, QError> {
    if estimated.len() != oracle.len() {
        return Err(QError::LengthMismatch {
            estimated: estimated.len(),
            oracle: oracle.len(),
        });
    }
    if estimated.is_empty() {
        return Err(QError::EmptyDecisions);
    }
    let hits = estimated.iter().zip(oracle).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / estimated.len() as f64)
}
