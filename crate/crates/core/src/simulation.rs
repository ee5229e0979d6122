//! Synthetic single- and two-stage trials with known optimal rules, plus the
//! replication harness that scores each method against them.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{
    flatten_history, Action, ActionSeq, CovariateVector, DataError, StageRecord, Subject,
    TrialDataset,
};
use crate::q_learning::{
    backward_induction, optimal_decision, q_values, Method, Mode, QConfig, QError,
};

const STREAM_COVARIATES: u64 = 1;
const STREAM_TREATMENT: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_CENSORING: u64 = 4;

pub const RESULTS_HEADER: [&str; 7] = ["rep", "method", "n", "stages", "accuracy", "censor_rate", "seed"];
pub const SUMMARY_HEADER: [&str; 8] = ["method", "n", "min", "q1", "median", "mean", "q3", "max"];
pub const QDUMP_HEADER: [&str; 6] = ["rep", "method", "subject", "sequence", "true_q", "estimated_q"];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("results line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    /// Intercept, sex, transformed tumor size, log BMI, sqrt age, treatment,
    /// treatment by transformed tumor size.
    pub beta: [f64; 7],
    pub noise_sd: f64,
    pub tumor_power: f64,
    pub censor_quantiles: (f64, f64),
    /// Censor stage 2 against `C` directly instead of the time left after
    /// stage 1.
    pub literal_censoring: bool,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            beta: [10.0, 0.4, -1.0, -0.4, -0.01, 0.05, 1.3],
            noise_sd: 1.0,
            tumor_power: 2.3,
            censor_quantiles: (0.2, 0.8),
            literal_censoring: false,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let (lo, hi) = self.censor_quantiles;
        if !(self.noise_sd > 0.0) {
            return Err(SimError::InvalidConfig("noise_sd must be positive".into()));
        }
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(SimError::InvalidConfig(format!(
                "censor quantiles ({lo}, {hi}) must satisfy 0 <= low < high <= 1"
            )));
        }
        if self.beta.iter().any(|b| !b.is_finite()) || !self.tumor_power.is_finite() {
            return Err(SimError::InvalidConfig("non-finite coefficient".into()));
        }
        Ok(())
    }
}

/// A generated trial together with the noiseless value of every action
/// sequence for every subject.
#[derive(Debug, Clone)]
pub struct SimData {
    pub dataset: TrialDataset,
    pub oracle: Vec<BTreeMap<ActionSeq, f64>>,
}

impl SimData {
    pub fn oracle_decisions(&self) -> Vec<ActionSeq> {
        self.oracle
            .iter()
            .map(|q| optimal_decision(q).expect("oracle maps are non-empty"))
            .collect()
    }
}

fn substream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Linear-interpolation empirical quantile with inclusive endpoints.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, p)
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn censoring_times(times: &[f64], low: f64, high: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (a, b) = (quantile(times, low), quantile(times, high));
    times
        .iter()
        .map(|_| if a < b { rng.random_range(a..=b) } else { a })
        .collect()
}

/// Draws `C_i ~ Unif(q_low, q_high)` from the empirical quantiles of the
/// event times and returns `(min(T, C), T <= C)`.
pub fn apply_censoring(times: &[f64], low: f64, high: f64, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = substream(seed, STREAM_CENSORING);
    let c = censoring_times(times, low, high, &mut rng);
    times
        .iter()
        .zip(&c)
        .map(|(&t, &c)| (t.min(c), t <= c))
        .unzip()
}

struct Baseline {
    sex: Vec<f64>,
    bmi: Vec<f64>,
    age: Vec<f64>,
}

fn positive_normal(rng: &mut ChaCha8Rng, dist: &Normal<f64>) -> f64 {
    loop {
        let v = dist.sample(rng);
        if v > 0.0 {
            return v;
        }
    }
}

fn draw_baseline(n: usize, rng: &mut ChaCha8Rng) -> Baseline {
    let bmi_dist = Normal::new(25.0, 5.0).expect("valid normal");
    let age_dist = Normal::new(50.0, 10.0).expect("valid normal");
    let mut b = Baseline {
        sex: Vec::with_capacity(n),
        bmi: Vec::with_capacity(n),
        age: Vec::with_capacity(n),
    };
    for _ in 0..n {
        b.sex.push(if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        b.bmi.push(positive_normal(rng, &bmi_dist));
        b.age.push(positive_normal(rng, &age_dist));
    }
    b
}

/// Raw tumor sizes and their median-centered power transform.
fn draw_tumor(n: usize, power: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..3.0)).collect();
    let powered: Vec<f64> = raw.iter().map(|t| t.powf(power)).collect();
    let median = quantile(&powered, 0.5);
    (raw, powered.iter().map(|v| v - median).collect())
}

/// Noiseless stage outcome under treatment `a`.
fn mean_outcome(cfg: &DgpConfig, b: &Baseline, tumor: f64, i: usize, a: u32) -> f64 {
    let beta = &cfg.beta;
    let treated = f64::from(a);
    beta[0]
        + beta[1] * b.sex[i]
        + beta[2] * tumor
        + beta[3] * b.bmi[i].ln()
        + beta[4] * b.age[i].sqrt()
        + treated * (beta[5] + beta[6] * tumor)
}

fn binary_arms() -> Vec<Action> {
    vec![Action(0), Action(1)]
}

fn baseline_vector(b: &Baseline, i: usize) -> CovariateVector {
    CovariateVector {
        names: vec!["sex".into(), "bmi".into(), "age".into()],
        values: vec![b.sex[i], b.bmi[i], b.age[i]],
    }
}

fn tumor_vector(stage: usize, value: f64) -> CovariateVector {
    CovariateVector {
        names: vec![format!("tumor_size_{stage}")],
        values: vec![value],
    }
}

/// Single-stage trial: randomized binary treatment, outcome from the
/// nonlinear treatment-by-tumor-size model, quantile censoring.
///
/// Generated times are floored at zero. Censoring draws come from their own
/// random stream, so covariates, treatments and the oracle do not depend on
/// the censoring mechanism.
#[allow(clippy::needless_range_loop)]
pub fn gen_single_stage(n: usize, seed: u64, cfg: &DgpConfig) -> Result<SimData, SimError> {
    cfg.validate()?;
    if n < 2 {
        return Err(SimError::InvalidConfig("n must be at least 2".into()));
    }
    let mut cov_rng = substream(seed, STREAM_COVARIATES);
    let mut trt_rng = substream(seed, STREAM_TREATMENT);
    let mut noise_rng = substream(seed, STREAM_NOISE);
    let noise = Normal::new(0.0, cfg.noise_sd).expect("validated sd");

    let base = draw_baseline(n, &mut cov_rng);
    let (raw, trans) = draw_tumor(n, cfg.tumor_power, &mut cov_rng);
    let arms = binary_arms();

    let mut oracle = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    for i in 0..n {
        let q: BTreeMap<ActionSeq, f64> = arms
            .iter()
            .map(|&a| (ActionSeq(vec![a]), mean_outcome(cfg, &base, trans[i], i, a.0)))
            .collect();
        let a = u32::from(trt_rng.random_bool(0.5));
        let eps = noise.sample(&mut noise_rng);
        times.push((q[&ActionSeq(vec![Action(a)])] + eps).max(0.0));
        actions.push(Action(a));
        oracle.push(q);
    }

    let (lo, hi) = cfg.censor_quantiles;
    let (y, d) = apply_censoring(&times, lo, hi, seed);
    let subjects = (0..n)
        .map(|i| {
            let history = flatten_history(
                &baseline_vector(&base, i),
                &[tumor_vector(1, raw[i])],
                &[],
                &arms,
            )?;
            Ok(Subject {
                id: format!("s{}", i + 1),
                stages: vec![StageRecord {
                    stage_index: 1,
                    history,
                    treatment: actions[i],
                    observed_time: y[i],
                    event: d[i],
                    reached: true,
                }],
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(SimData {
        dataset: TrialDataset::new(subjects, arms, 1)?,
        oracle,
    })
}

/// Two-stage trial: fresh tumor size and independent noise per stage, one
/// censoring time per subject drawn from quantiles of `T1 + T2`.
///
/// By default `C` is allocated against cumulative time: stage 1 is censored
/// when `T1 > C` and stage 2 sees the remaining `C - T1`. With
/// `literal_censoring` each stage is censored against `C` on its own.
/// Every subject reaches stage 2; stage-2 records of subjects censored in
/// stage 1 are excluded from fitting by the follow-up rule.
pub fn gen_two_stage(n: usize, seed: u64, cfg: &DgpConfig) -> Result<SimData, SimError> {
    cfg.validate()?;
    if n < 2 {
        return Err(SimError::InvalidConfig("n must be at least 2".into()));
    }
    let mut cov_rng = substream(seed, STREAM_COVARIATES);
    let mut trt_rng = substream(seed, STREAM_TREATMENT);
    let mut noise_rng = substream(seed, STREAM_NOISE);
    let mut cens_rng = substream(seed, STREAM_CENSORING);
    let noise = Normal::new(0.0, cfg.noise_sd).expect("validated sd");

    let base = draw_baseline(n, &mut cov_rng);
    let (raw1, trans1) = draw_tumor(n, cfg.tumor_power, &mut cov_rng);
    let (raw2, trans2) = draw_tumor(n, cfg.tumor_power, &mut cov_rng);
    let arms = binary_arms();

    let mut oracle = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    let mut stage_times = Vec::with_capacity(n);
    for i in 0..n {
        let q1 = [0, 1].map(|a| mean_outcome(cfg, &base, trans1[i], i, a));
        let q2 = [0, 1].map(|a| mean_outcome(cfg, &base, trans2[i], i, a));
        let mut q = BTreeMap::new();
        for a1 in 0..2u32 {
            for a2 in 0..2u32 {
                q.insert(
                    ActionSeq(vec![Action(a1), Action(a2)]),
                    q1[a1 as usize] + q2[a2 as usize],
                );
            }
        }
        let a1 = u32::from(trt_rng.random_bool(0.5));
        let a2 = u32::from(trt_rng.random_bool(0.5));
        let t1 = (q1[a1 as usize] + noise.sample(&mut noise_rng)).max(0.0);
        let t2 = (q2[a2 as usize] + noise.sample(&mut noise_rng)).max(0.0);
        actions.push((Action(a1), Action(a2)));
        stage_times.push((t1, t2));
        oracle.push(q);
    }

    let totals: Vec<f64> = stage_times.iter().map(|(a, b)| a + b).collect();
    let (lo, hi) = cfg.censor_quantiles;
    let c = censoring_times(&totals, lo, hi, &mut cens_rng);

    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let (t1, t2) = stage_times[i];
        let (y1, d1) = (t1.min(c[i]), t1 <= c[i]);
        let (y2, d2) = if cfg.literal_censoring {
            (t2.min(c[i]), t2 <= c[i])
        } else {
            (t2.min((c[i] - t1).max(0.0)), t1 + t2 <= c[i])
        };
        let baseline = baseline_vector(&base, i);
        let h1 = flatten_history(&baseline, &[tumor_vector(1, raw1[i])], &[], &arms)?;
        let h2 = flatten_history(
            &baseline,
            &[tumor_vector(1, raw1[i]), tumor_vector(2, raw2[i])],
            &[actions[i].0],
            &arms,
        )?;
        subjects.push(Subject {
            id: format!("s{}", i + 1),
            stages: vec![
                StageRecord {
                    stage_index: 1,
                    history: h1,
                    treatment: actions[i].0,
                    observed_time: y1,
                    event: d1,
                    reached: true,
                },
                StageRecord {
                    stage_index: 2,
                    history: h2,
                    treatment: actions[i].1,
                    observed_time: y2,
                    event: d2,
                    reached: true,
                },
            ],
        });
    }
    Ok(SimData {
        dataset: TrialDataset::new(subjects, arms, 2)?,
        oracle,
    })
}

pub fn generate(stages: usize, n: usize, seed: u64, cfg: &DgpConfig) -> Result<SimData, SimError> {
    match stages {
        1 => gen_single_stage(n, seed, cfg),
        2 => gen_two_stage(n, seed, cfg),
        other => Err(SimError::InvalidConfig(format!(
            "stages must be 1 or 2, got {other}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub rep: usize,
    pub method: Method,
    pub n: usize,
    pub stages: usize,
    /// `None` when the fit failed; `reason` says why.
    pub accuracy: Option<f64>,
    pub censor_rate: f64,
    pub seed: u64,
    #[serde(skip)]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplicationResults {
    pub rows: Vec<ReplicationRow>,
}

impl ReplicationResults {
    pub fn failures(&self) -> impl Iterator<Item = &ReplicationRow> {
        self.rows.iter().filter(|r| r.accuracy.is_none())
    }
}

/// Estimated and true value of one action sequence for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct QDumpRow {
    pub rep: usize,
    pub method: Method,
    pub subject: String,
    pub sequence: ActionSeq,
    pub true_q: f64,
    pub estimated_q: f64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub methods: Vec<Method>,
    pub n: usize,
    pub stages: usize,
    pub reps: usize,
    pub base_seed: u64,
    pub dgp: DgpConfig,
    pub mode: Mode,
    pub q: QConfig,
    /// Worker threads; `None` uses every available processor.
    pub jobs: Option<usize>,
    pub dump_q: bool,
}

impl RunConfig {
    pub fn new(methods: Vec<Method>, n: usize, stages: usize, reps: usize, base_seed: u64) -> Self {
        Self {
            methods,
            n,
            stages,
            reps,
            base_seed,
            dgp: DgpConfig::default(),
            mode: Mode::Additive,
            q: QConfig::default(),
            jobs: None,
            dump_q: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub results: ReplicationResults,
    pub q_dump: Vec<QDumpRow>,
}

fn score(
    data: &SimData,
    method: Method,
    cfg: &RunConfig,
    rep: usize,
) -> Result<(f64, Vec<QDumpRow>), QError> {
    let policy = backward_induction(&data.dataset, method, &cfg.q, cfg.mode)?;
    let mut hits = 0usize;
    let mut dump = Vec::new();
    for (subject, truth) in data.dataset.subjects.iter().zip(&data.oracle) {
        let est = q_values(&policy, subject)?;
        if optimal_decision(&est)? == optimal_decision(truth)? {
            hits += 1;
        }
        if cfg.dump_q {
            for (seq, &q) in &est {
                dump.push(QDumpRow {
                    rep,
                    method,
                    subject: subject.id.clone(),
                    sequence: seq.clone(),
                    true_q: truth.get(seq).copied().unwrap_or(f64::NAN),
                    estimated_q: q,
                });
            }
        }
    }
    Ok((hits as f64 / data.oracle.len() as f64, dump))
}

fn run_rep(cfg: &RunConfig, rep: usize) -> Result<Vec<(ReplicationRow, Vec<QDumpRow>)>, SimError> {
    let seed = cfg.base_seed.wrapping_add(rep as u64);
    let data = generate(cfg.stages, cfg.n, seed, &cfg.dgp)?;
    let censor_rate = data.dataset.censoring_rate();
    Ok(cfg
        .methods
        .iter()
        .map(|&method| {
            let (accuracy, reason, dump) = match score(&data, method, cfg, rep) {
                Ok((acc, dump)) => (Some(acc), None, dump),
                Err(e) => (None, Some(e.to_string()), Vec::new()),
            };
            let row = ReplicationRow {
                rep,
                method,
                n: cfg.n,
                stages: cfg.stages,
                accuracy,
                censor_rate,
                seed,
                reason,
            };
            (row, dump)
        })
        .collect())
}

/// Runs every method on `reps` generated trials (seed `base_seed + r` for
/// replicate `r`). Fit failures become rows with no accuracy. Output order is
/// replicate then method, independent of the thread count.
pub fn run_replications(cfg: &RunConfig) -> Result<RunOutput, SimError> {
    cfg.dgp.validate()?;
    if cfg.methods.is_empty() {
        return Err(SimError::InvalidConfig("no methods requested".into()));
    }
    if cfg.stages != 1 && cfg.stages != 2 {
        return Err(SimError::InvalidConfig(format!(
            "stages must be 1 or 2, got {}",
            cfg.stages
        )));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cfg.jobs {
        builder = builder.num_threads(jobs.max(1));
    }
    let pool = builder.build().map_err(|e| SimError::Pool(e.to_string()))?;
    let per_rep: Vec<_> = pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| run_rep(cfg, rep))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let mut out = RunOutput::default();
    for (row, dump) in per_rep.into_iter().flatten() {
        out.results.rows.push(row);
        out.q_dump.extend(dump);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

/// Six-number summary of accuracy per (method, n), skipping failed rows.
/// Groups with no successful replicate are omitted.
pub fn summarize(results: &ReplicationResults) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, usize), Vec<f64>> = BTreeMap::new();
    for row in &results.rows {
        let entry = groups.entry((row.method, row.n)).or_default();
        if let Some(a) = row.accuracy {
            entry.push(a);
        }
    }
    groups
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|((method, n), mut v)| {
            v.sort_by(f64::total_cmp);
            SummaryRow {
                method,
                n,
                min: v[0],
                q1: quantile_sorted(&v, 0.25),
                median: quantile_sorted(&v, 0.5),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                q3: quantile_sorted(&v, 0.75),
                max: v[v.len() - 1],
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn write_results_csv<W: Write>(w: W, results: &ReplicationResults) -> Result<(), SimError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RESULTS_HEADER)?;
    for r in &results.rows {
        out.write_record([
            r.rep.to_string(),
            r.method.to_string(),
            r.n.to_string(),
            r.stages.to_string(),
            fmt_opt(r.accuracy),
            r.censor_rate.to_string(),
            r.seed.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results_csv<R: Read>(r: R) -> Result<ReplicationResults, SimError> {
    let mut reader = csv::Reader::from_reader(r);
    let header = reader.headers()?.clone();
    if header.iter().ne(RESULTS_HEADER) {
        return Err(SimError::Parse {
            line: 1,
            message: format!("expected header `{}`", RESULTS_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let err = |message: String| SimError::Parse { line, message };
        let field = |k: usize| record.get(k).unwrap_or("");
        let int = |k: usize| {
            field(k)
                .parse::<u64>()
                .map_err(|e| err(format!("{}: {e}", RESULTS_HEADER[k])))
        };
        let real = |k: usize| {
            field(k)
                .parse::<f64>()
                .map_err(|e| err(format!("{}: {e}", RESULTS_HEADER[k])))
        };
        let accuracy = match field(4) {
            "NA" | "" => None,
            _ => Some(real(4)?),
        };
        rows.push(ReplicationRow {
            rep: int(0)? as usize,
            method: field(1).parse().map_err(err)?,
            n: int(2)? as usize,
            stages: int(3)? as usize,
            accuracy,
            censor_rate: real(5)?,
            seed: int(6)?,
            reason: None,
        });
    }
    Ok(ReplicationResults { rows })
}

pub fn write_summary_csv<W: Write>(w: W, summary: &[SummaryRow]) -> Result<(), SimError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER)?;
    for s in summary {
        out.write_record([
            s.method.to_string(),
            s.n.to_string(),
            s.min.to_string(),
            s.q1.to_string(),
            s.median.to_string(),
            s.mean.to_string(),
            s.q3.to_string(),
            s.max.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_qdump_csv<W: Write>(w: W, rows: &[QDumpRow]) -> Result<(), SimError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(QDUMP_HEADER)?;
    for r in rows {
        out.write_record([
            r.rep.to_string(),
            r.method.to_string(),
            r.subject.clone(),
            r.sequence.to_string(),
            r.true_q.to_string(),
            r.estimated_q.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Fixed-width table of a summary, one line per group.
pub fn format_summary(summary: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<8} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "method", "n", "min", "q1", "median", "mean", "q3", "max"
    );
    for r in summary {
        s.push_str(&format!(
            "{:<8} {:>6} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}\n",
            r.method.name(),
            r.n,
            r.min,
            r.q1,
            r.median,
            r.mean,
            r.q3,
            r.max
        ));
    }
    s
}
