//! Record types for longitudinal right-censored trial data.
//!
//! A [`TrialDataset`] holds one [`Subject`] per patient, each carrying one
//! [`StageRecord`] per decision stage. The history stored on a stage record
//! is already flattened: baseline covariates, every earlier stage's
//! covariates and indicator columns for earlier treatments, followed by the
//! current stage's covariates. The current treatment is never part of the
//! history; per-arm models take it into account by construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("covariate vector is empty")]
    EmptyCovariates,
    #[error("covariate names ({names}) and values ({values}) differ in length")]
    LengthMismatch { names: usize, values: usize },
    #[error("covariate `{name}` is not finite ({value})")]
    NonFinite { name: String, value: f64 },
    #[error("dataset has no subjects")]
    EmptyDataset,
    #[error("action set is empty")]
    EmptyActionSet,
    #[error("subject `{id}` has {found} stages, expected {expected}")]
    StageCount {
        id: String,
        found: usize,
        expected: usize,
    },
    #[error("subject `{id}`: stage at position {position} has index {index}")]
    StageIndex {
        id: String,
        position: usize,
        index: usize,
    },
}

/// Treatment identifier drawn from the trial's finite action set.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct Action(pub u32);

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One action per stage, ordered from stage 1.
///
/// Sequences compare lexicographically, which is the tie-breaking order used
/// when extracting decisions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct ActionSeq(pub Vec<Action>);

impl ActionSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ActionSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let compact = self.0.iter().all(|a| a.0 < 10);
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 && !compact {
                f.write_str("-")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for ActionSeq {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |t: &str| {
            t.parse::<u32>()
                .map(Action)
                .map_err(|_| format!("invalid action sequence `{s}`"))
        };
        if s.is_empty() {
            return Ok(ActionSeq::default());
        }
        let actions = if s.contains('-') {
            s.split('-').map(parse).collect::<Result<Vec<_>, _>>()?
        } else {
            s.chars()
                .map(|c| parse(&c.to_string()))
                .collect::<Result<Vec<_>, _>>()?
        };
        Ok(ActionSeq(actions))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl CovariateVector {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self, DataError> {
        if names.len() != values.len() {
            return Err(DataError::LengthMismatch {
                names: names.len(),
                values: values.len(),
            });
        }
        if values.is_empty() {
            return Err(DataError::EmptyCovariates);
        }
        if let Some((name, &value)) = names.iter().zip(&values).find(|(_, v)| !v.is_finite()) {
            return Err(DataError::NonFinite {
                name: name.clone(),
                value,
            });
        }
        Ok(Self { names, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// 1-based stage index.
    pub stage_index: usize,
    pub history: CovariateVector,
    pub treatment: Action,
    pub observed_time: f64,
    pub event: bool,
    /// Whether the subject reached this stage. When false, `observed_time`
    /// and `event` carry no information.
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub stages: Vec<StageRecord>,
}

impl Subject {
    pub fn stage(&self, stage: usize) -> Option<&StageRecord> {
        stage.checked_sub(1).and_then(|i| self.stages.get(i))
    }

    /// Whether this subject's stage-`stage` outcome was actually followed up:
    /// the stage was reached and every earlier stage ended in an observed
    /// event. A censored earlier stage means follow-up stopped there.
    pub fn followed_at(&self, stage: usize) -> bool {
        match self.stage(stage) {
            Some(rec) if rec.reached => self.stages[..stage - 1].iter().all(|s| s.event),
            _ => false,
        }
    }

    /// Whether the subject's follow-up ended in censoring.
    pub fn is_censored(&self) -> bool {
        for (k, rec) in self.stages.iter().enumerate() {
            if !self.followed_at(k + 1) {
                break;
            }
            if !rec.event {
                return true;
            }
        }
        false
    }

    /// Number of leading stages with `reached = true`.
    pub fn reached_stages(&self) -> usize {
        self.stages.iter().take_while(|s| s.reached).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    pub subjects: Vec<Subject>,
    pub action_set: Vec<Action>,
    pub num_stages: usize,
}

impl TrialDataset {
    /// Builds a dataset after checking its shape: every subject has exactly
    /// `num_stages` records indexed `1..=num_stages`. Content-level checks
    /// (positivity, finiteness, monotone `reached`) live in
    /// [`validate_dataset`].
    pub fn new(
        subjects: Vec<Subject>,
        mut action_set: Vec<Action>,
        num_stages: usize,
    ) -> Result<Self, DataError> {
        if subjects.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        if action_set.is_empty() {
            return Err(DataError::EmptyActionSet);
        }
        action_set.sort();
        action_set.dedup();
        for s in &subjects {
            if s.stages.len() != num_stages {
                return Err(DataError::StageCount {
                    id: s.id.clone(),
                    found: s.stages.len(),
                    expected: num_stages,
                });
            }
            for (pos, rec) in s.stages.iter().enumerate() {
                if rec.stage_index != pos + 1 {
                    return Err(DataError::StageIndex {
                        id: s.id.clone(),
                        position: pos,
                        index: rec.stage_index,
                    });
                }
            }
        }
        Ok(Self {
            subjects,
            action_set,
            num_stages,
        })
    }

    /// Indices of subjects contributing to stage-`stage` fitting.
    pub fn fitting_set(&self, stage: usize) -> Vec<usize> {
        (0..self.subjects.len())
            .filter(|&i| self.subjects[i].followed_at(stage))
            .collect()
    }

    pub fn censoring_rate(&self) -> f64 {
        let censored = self.subjects.iter().filter(|s| s.is_censored()).count();
        censored as f64 / self.subjects.len() as f64
    }
}

/// Flattens a history for stage `k`: baseline covariates, then for each
/// earlier stage its covariates followed by treatment indicators, then the
/// current stage's covariates.
///
/// Treatments are one-hot encoded against the first action in `action_set`
/// (the reference level gets no column), so a binary trial contributes one
/// `A{l}=a` column per earlier stage.
pub fn flatten_history(
    baseline: &CovariateVector,
    stage_covariates: &[CovariateVector],
    past_actions: &[Action],
    action_set: &[Action],
) -> Result<CovariateVector, DataError> {
    let mut names = baseline.names.clone();
    let mut values = baseline.values.clone();
    for (l, cov) in stage_covariates.iter().enumerate() {
        names.extend(cov.names.iter().cloned());
        values.extend(cov.values.iter().copied());
        if let Some(&a) = past_actions.get(l) {
            for &level in action_set.iter().skip(1) {
                names.push(format!("A{}={}", l + 1, level));
                values.push(if a == level { 1.0 } else { 0.0 });
            }
        }
    }
    CovariateVector::new(names, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    ActionUnobserved { stage: usize, action: Action },
    UnknownAction { subject: String, stage: usize, action: Action },
    NonFiniteCovariate { subject: String, stage: usize, name: String },
    NonMonotoneReached { subject: String, stage: usize },
    NegativeTime { subject: String, stage: usize },
    NoSubjectReached { stage: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ActionUnobserved { stage, action } => {
                write!(f, "action {action} unobserved at stage {stage}")
            }
            Violation::UnknownAction {
                subject,
                stage,
                action,
            } => write!(
                f,
                "subject {subject}: action {action} at stage {stage} is not in the action set"
            ),
            Violation::NonFiniteCovariate {
                subject,
                stage,
                name,
            } => write!(
                f,
                "subject {subject}: covariate `{name}` at stage {stage} is not finite"
            ),
            Violation::NonMonotoneReached { subject, stage } => write!(
                f,
                "subject {subject}: reached at stage {stage} after an unreached stage"
            ),
            Violation::NegativeTime { subject, stage } => {
                write!(f, "subject {subject}: negative observed time at stage {stage}")
            }
            Violation::NoSubjectReached { stage } => {
                write!(f, "no subject reached stage {stage}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub observed_actions: Vec<Action>,
    pub action_counts: BTreeMap<Action, usize>,
    /// Fraction of followed-up subjects censored at this stage.
    pub censoring_rate: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub stages: Vec<StageSummary>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Empirical positivity and consistency checks. Never fails; every problem
/// found is listed in the report.
pub fn validate_dataset(dataset: &TrialDataset) -> ValidationReport {
    let actions: BTreeSet<Action> = dataset.action_set.iter().copied().collect();
    let mut violations = Vec::new();
    let mut stages = Vec::with_capacity(dataset.num_stages);

    for subject in &dataset.subjects {
        let mut seen_unreached = false;
        for rec in &subject.stages {
            if !rec.reached {
                seen_unreached = true;
            } else if seen_unreached {
                violations.push(Violation::NonMonotoneReached {
                    subject: subject.id.clone(),
                    stage: rec.stage_index,
                });
            }
            if let Some(name) = rec
                .history
                .names
                .iter()
                .zip(&rec.history.values)
                .find(|(_, v)| !v.is_finite())
                .map(|(n, _)| n.clone())
            {
                violations.push(Violation::NonFiniteCovariate {
                    subject: subject.id.clone(),
                    stage: rec.stage_index,
                    name,
                });
            }
            if rec.reached && !actions.contains(&rec.treatment) {
                violations.push(Violation::UnknownAction {
                    subject: subject.id.clone(),
                    stage: rec.stage_index,
                    action: rec.treatment,
                });
            }
            if rec.reached && !(rec.observed_time >= 0.0) {
                violations.push(Violation::NegativeTime {
                    subject: subject.id.clone(),
                    stage: rec.stage_index,
                });
            }
        }
    }

    for stage in 1..=dataset.num_stages {
        let mut counts: BTreeMap<Action, usize> = BTreeMap::new();
        let mut followed = 0usize;
        let mut censored = 0usize;
        let mut reached = 0usize;
        for subject in &dataset.subjects {
            let Some(rec) = subject.stage(stage) else {
                continue;
            };
            if !rec.reached {
                continue;
            }
            reached += 1;
            *counts.entry(rec.treatment).or_default() += 1;
            if subject.followed_at(stage) {
                followed += 1;
                if !rec.event {
                    censored += 1;
                }
            }
        }
        if reached == 0 {
            violations.push(Violation::NoSubjectReached { stage });
        }
        for &a in &dataset.action_set {
            if !counts.contains_key(&a) {
                violations.push(Violation::ActionUnobserved { stage, action: a });
            }
        }
        let censoring_rate = if followed == 0 {
            0.0
        } else {
            censored as f64 / followed as f64
        };
        let mut warnings = Vec::new();
        if followed > 0 && censored == followed {
            warnings.push(format!("every followed-up outcome at stage {stage} is censored"));
        }
        stages.push(StageSummary {
            stage,
            observed_actions: counts.keys().copied().collect(),
            action_counts: counts,
            censoring_rate,
            warnings,
        });
    }

    ValidationReport { stages, violations }
}
