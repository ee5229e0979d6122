//! Trial CSV ingestion, the cutoff-based two-stage split, and the long
//! stage-per-row format used to move multi-stage data between commands.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{Action, CovariateVector, DataError, StageRecord, Subject, TrialDataset};

pub const LONG_HEADER: [&str; 6] = ["id", "stage", "time", "event", "treatment", "reached"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("line {line}, column `{column}`: cannot parse `{value}`")]
    Parse {
        line: usize,
        column: String,
        value: String,
    },
    #[error("line {line}, column `{column}`: missing value")]
    MissingValue { line: usize, column: String },
    #[error("line {line}, column `{column}`: {message}")]
    Invalid {
        line: usize,
        column: String,
        message: String,
    },
    #[error("line {line}: treatment code `{code}` is not mapped to an arm")]
    UnmappedCode { line: usize, code: String },
    #[error("no data rows")]
    Empty,
    #[error("expected a single-stage dataset, got {0} stages")]
    NotSingleStage(usize),
    #[error("invalid split parameters: {0}")]
    InvalidSplit(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which columns of a wide, one-row-per-subject CSV carry what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub time: String,
    pub event: String,
    pub treatment: String,
    pub covariates: Vec<String>,
    pub id: Option<String>,
    /// Treatment code to action. When absent, codes are read as
    /// non-negative integers.
    pub arm_codes: Option<BTreeMap<String, u32>>,
    /// Treatment codes whose rows are skipped.
    pub drop_codes: Vec<String>,
    /// Replace missing covariates with the column mean instead of failing.
    pub impute_missing: bool,
}

impl CsvSchema {
    pub fn new(time: &str, event: &str, treatment: &str, covariates: &[&str]) -> Self {
        Self {
            time: time.into(),
            event: event.into(),
            treatment: treatment.into(),
            covariates: covariates.iter().map(|c| c.to_string()).collect(),
            id: None,
            arm_codes: None,
            drop_codes: Vec::new(),
            impute_missing: false,
        }
    }
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "NaN" | ".")
}

fn column(header: &csv::StringRecord, name: &str) -> Result<usize, IngestError> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| IngestError::UnknownColumn(name.to_string()))
}

fn parse_real(field: &str, line: usize, column: &str) -> Result<f64, IngestError> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| IngestError::Parse {
            line,
            column: column.to_string(),
            value: field.to_string(),
        })
}

fn parse_flag(field: &str, line: usize, column: &str) -> Result<bool, IngestError> {
    match parse_real(field, line, column)? {
        1.0 => Ok(true),
        0.0 => Ok(false),
        _ => Err(IngestError::Invalid {
            line,
            column: column.to_string(),
            message: format!("expected 0 or 1, got `{field}`"),
        }),
    }
}

fn parse_time(field: &str, line: usize, column: &str) -> Result<f64, IngestError> {
    if is_missing(field) {
        return Err(IngestError::MissingValue {
            line,
            column: column.to_string(),
        });
    }
    let t = parse_real(field, line, column)?;
    if t < 0.0 {
        return Err(IngestError::Invalid {
            line,
            column: column.to_string(),
            message: format!("negative time {t}"),
        });
    }
    Ok(t)
}

fn parse_action(field: &str, line: usize, column: &str) -> Result<Action, IngestError> {
    field
        .trim()
        .parse::<u32>()
        .map(Action)
        .map_err(|_| IngestError::Parse {
            line,
            column: column.to_string(),
            value: field.to_string(),
        })
}

/// Reads a wide trial CSV into a single-stage dataset.
pub fn read_trial_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<TrialDataset, IngestError> {
    let mut csv = csv::Reader::from_reader(reader);
    let header = csv.headers()?.clone();
    let time_col = column(&header, &schema.time)?;
    let event_col = column(&header, &schema.event)?;
    let trt_col = column(&header, &schema.treatment)?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| column(&header, c))
        .collect::<Result<Vec<_>, _>>()?;
    let id_col = schema.id.as_deref().map(|c| column(&header, c)).transpose()?;

    struct Row {
        id: String,
        time: f64,
        event: bool,
        action: Action,
        covariates: Vec<Option<f64>>,
    }

    let mut rows = Vec::new();
    for (i, record) in csv.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let field = |k: usize| record.get(k).unwrap_or("");
        let code = field(trt_col).trim();
        if schema.drop_codes.iter().any(|d| d == code) {
            continue;
        }
        let action = match &schema.arm_codes {
            Some(map) => Action(*map.get(code).ok_or_else(|| IngestError::UnmappedCode {
                line,
                code: code.to_string(),
            })?),
            None => parse_action(code, line, &schema.treatment)?,
        };
        let covariates = cov_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&k, name)| {
                let f = field(k);
                if is_missing(f) {
                    if schema.impute_missing {
                        Ok(None)
                    } else {
                        Err(IngestError::MissingValue {
                            line,
                            column: name.clone(),
                        })
                    }
                } else {
                    parse_real(f, line, name).map(Some)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(Row {
            id: id_col.map_or_else(|| format!("r{}", i + 1), |k| field(k).trim().to_string()),
            time: parse_time(field(time_col), line, &schema.time)?,
            event: parse_flag(field(event_col), line, &schema.event)?,
            action,
            covariates,
        });
    }
    if rows.is_empty() {
        return Err(IngestError::Empty);
    }

    let means: Vec<f64> = (0..cov_cols.len())
        .map(|j| {
            let present: Vec<f64> = rows.iter().filter_map(|r| r.covariates[j]).collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        })
        .collect();

    let mut actions: Vec<Action> = rows.iter().map(|r| r.action).collect();
    if let Some(map) = &schema.arm_codes {
        actions.extend(map.values().map(|&a| Action(a)));
    }
    let subjects = rows
        .into_iter()
        .map(|r| {
            let values = r
                .covariates
                .iter()
                .zip(&means)
                .map(|(v, m)| v.unwrap_or(*m))
                .collect();
            Ok(Subject {
                id: r.id,
                stages: vec![StageRecord {
                    stage_index: 1,
                    history: CovariateVector::new(schema.covariates.clone(), values)?,
                    treatment: r.action,
                    observed_time: r.time,
                    event: r.event,
                    reached: true,
                }],
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(TrialDataset::new(subjects, actions, 1)?)
}

/// Splits single-stage follow-up at a random cutoff `u ~ Unif(low, high)`.
///
/// Subjects whose follow-up ends by the cutoff keep their record as stage 1
/// and do not reach stage 2. The rest survive stage 1 in full (`Y1 = u`,
/// event observed) and continue to stage 2 with the residual time and the
/// original event flag. The stage-2 treatment repeats stage 1 with
/// probability `keep_prob` and otherwise switches to another arm, drawn
/// uniformly.
pub fn synthetic_two_stage_split(
    dataset: &TrialDataset,
    cutoff_low: f64,
    cutoff_high: f64,
    keep_prob: f64,
    seed: u64,
) -> Result<TrialDataset, IngestError> {
    if dataset.num_stages != 1 {
        return Err(IngestError::NotSingleStage(dataset.num_stages));
    }
    if !(0.0 <= cutoff_low && cutoff_low <= cutoff_high && cutoff_high.is_finite()) {
        return Err(IngestError::InvalidSplit(format!(
            "cutoffs must satisfy 0 <= low <= high, got {cutoff_low} and {cutoff_high}"
        )));
    }
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(IngestError::InvalidSplit(format!(
            "keep probability {keep_prob} is outside [0, 1]"
        )));
    }
    let arms = &dataset.action_set;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects = Vec::with_capacity(dataset.subjects.len());
    for s in &dataset.subjects {
        let rec = &s.stages[0];
        let u = if cutoff_low < cutoff_high {
            rng.random_range(cutoff_low..=cutoff_high)
        } else {
            cutoff_low
        };
        let a1 = rec.treatment;
        let a2 = if arms.len() < 2 || rng.random_bool(keep_prob) {
            a1
        } else {
            let others: Vec<Action> = arms.iter().copied().filter(|&a| a != a1).collect();
            others[rng.random_range(0..others.len())]
        };

        let mut names = rec.history.names.clone();
        let mut values = rec.history.values.clone();
        for &level in arms.iter().skip(1) {
            names.push(format!("A1={level}"));
            values.push(if a1 == level { 1.0 } else { 0.0 });
        }
        let h2 = CovariateVector::new(names, values)?;

        let survives = rec.observed_time > u;
        let stage1 = StageRecord {
            observed_time: if survives { u } else { rec.observed_time },
            event: survives || rec.event,
            ..rec.clone()
        };
        let stage2 = StageRecord {
            stage_index: 2,
            history: h2,
            treatment: a2,
            observed_time: if survives { rec.observed_time - u } else { 0.0 },
            event: survives && rec.event,
            reached: survives,
        };
        subjects.push(Subject {
            id: s.id.clone(),
            stages: vec![stage1, stage2],
        });
    }
    Ok(TrialDataset::new(subjects, arms.clone(), 2)?)
}

/// Writes one row per (subject, stage). Covariate columns are the union of
/// all history names in order of first appearance; a stage without a given
/// covariate leaves its cell empty.
pub fn write_long_csv<W: Write>(w: W, dataset: &TrialDataset) -> Result<(), IngestError> {
    let mut names: Vec<&str> = Vec::new();
    for s in &dataset.subjects {
        for rec in &s.stages {
            for n in &rec.history.names {
                if !names.contains(&n.as_str()) {
                    names.push(n);
                }
            }
        }
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(LONG_HEADER.iter().copied().chain(names.iter().copied()))?;
    for s in &dataset.subjects {
        for rec in &s.stages {
            let mut row = vec![
                s.id.clone(),
                rec.stage_index.to_string(),
                rec.observed_time.to_string(),
                u8::from(rec.event).to_string(),
                rec.treatment.to_string(),
                u8::from(rec.reached).to_string(),
            ];
            for n in &names {
                row.push(
                    rec.history
                        .names
                        .iter()
                        .position(|h| h == n)
                        .map_or_else(String::new, |k| rec.history.values[k].to_string()),
                );
            }
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads the long format back. Rows of one subject must be contiguous and in
/// stage order; each stage's history is its non-empty covariate cells.
pub fn read_long_csv<R: Read>(reader: R) -> Result<TrialDataset, IngestError> {
    let mut csv = csv::Reader::from_reader(reader);
    let header = csv.headers()?.clone();
    for (k, expected) in LONG_HEADER.iter().enumerate() {
        if header.get(k).map(str::trim) != Some(*expected) {
            return Err(IngestError::UnknownColumn(expected.to_string()));
        }
    }
    let cov_names: Vec<String> = header.iter().skip(LONG_HEADER.len()).map(String::from).collect();

    let mut subjects: Vec<Subject> = Vec::new();
    let mut actions = Vec::new();
    for (i, record) in csv.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let field = |k: usize| record.get(k).unwrap_or("");
        let id = field(0).trim().to_string();
        let stage: usize = field(1).trim().parse().map_err(|_| IngestError::Parse {
            line,
            column: "stage".into(),
            value: field(1).to_string(),
        })?;
        let reached = parse_flag(field(5), line, "reached")?;
        let treatment = parse_action(field(4), line, "treatment")?;
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (j, name) in cov_names.iter().enumerate() {
            let f = field(LONG_HEADER.len() + j);
            if !f.trim().is_empty() {
                names.push(name.clone());
                values.push(parse_real(f, line, name)?);
            }
        }
        let rec = StageRecord {
            stage_index: stage,
            history: CovariateVector::new(names, values)?,
            treatment,
            observed_time: parse_time(field(2), line, "time")?,
            event: parse_flag(field(3), line, "event")?,
            reached,
        };
        if reached {
            actions.push(treatment);
        }
        match subjects.last_mut() {
            Some(s) if s.id == id => s.stages.push(rec),
            _ => subjects.push(Subject {
                id,
                stages: vec![rec],
            }),
        }
    }
    if subjects.is_empty() {
        return Err(IngestError::Empty);
    }
    let k = subjects[0].stages.len();
    Ok(TrialDataset::new(subjects, actions, k)?)
}
