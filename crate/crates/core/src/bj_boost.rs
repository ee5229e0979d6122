//! Buckley-James fitting engines for right-censored outcomes.
//!
//! Every engine alternates between imputing censored outcomes from a
//! Kaplan-Meier estimate of the current residual distribution and refitting
//! a regression on the imputed targets:
//!
//! - [`bj_boost_fit`]: functional gradient boosting with componentwise least
//!   squares or regression trees as the base learner, re-imputing at every
//!   iteration.
//! - [`bj_linear_fit`]: the classical linear Buckley-James fixed point.
//! - [`cv_tune`]: K-fold selection of a boosting configuration.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base_learners::{
    componentwise_ls_fit, tree_fit, tree_predict, ComponentTerm, LearnerError, RegressionTree,
    Standardization,
};
use crate::kaplan_meier::{km_fit, km_tail_expectation, KmCurve, KmError};

/// Minimum training rows accepted by the boosted fitter.
pub const MIN_ROWS: usize = 10;

/// Any fitted value beyond this magnitude aborts the fit.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

const CV_MAX_REDRAWS: u64 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoostError {
    #[error("need at least {min} rows, got {n}")]
    TooFewRows { n: usize, min: usize },
    #[error("all censored: no observed events")]
    AllCensored,
    #[error("diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("input lengths disagree: {0}")]
    LengthMismatch(String),
    #[error("expected {expected} covariates, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cross-validation: {0}")]
    CrossValidation(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Km(#[from] KmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    ComponentwiseLs,
    Tree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Start from the mean observed time.
    Mean,
    /// Start from an ordinary least-squares fit of the observed times.
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub learner: LearnerKind,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Componentwise only: refit a second round restricted to the covariates
    /// selected in the first round.
    pub twin: bool,
    pub init_mode: InitMode,
}

impl BoostConfig {
    pub fn tree() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.1,
            learner: LearnerKind::Tree,
            max_depth: 2,
            min_leaf: 5,
            twin: false,
            init_mode: InitMode::Mean,
        }
    }

    pub fn componentwise() -> Self {
        Self {
            learner: LearnerKind::ComponentwiseLs,
            twin: true,
            ..Self::tree()
        }
    }

    pub fn validate(&self) -> Result<(), BoostError> {
        if self.iterations == 0 {
            return Err(BoostError::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(BoostError::InvalidConfig(format!(
                "learning rate {} outside (0, 1]",
                self.learning_rate
            )));
        }
        if self.learner == LearnerKind::Tree && self.max_depth == 0 {
            return Err(BoostError::InvalidConfig("max_depth must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self::tree()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseLearner {
    Component(ComponentTerm),
    Tree(RegressionTree),
}

impl BaseLearner {
    fn predict(&self, z: &[f64]) -> Result<f64, LearnerError> {
        match self {
            BaseLearner::Component(t) => t.predict(z),
            BaseLearner::Tree(t) => tree_predict(t, z),
        }
    }
}

/// A base learner and the weight it enters the ensemble with: the learning
/// rate for boosting steps, 1 for least-squares initialization terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledTerm {
    pub weight: f64,
    pub learner: BaseLearner,
}

/// `offset + sum(weight * term(standardize(x)))`, evaluated in term order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostModel {
    pub offset: f64,
    pub terms: Vec<ScaledTerm>,
    pub standardization: Standardization,
}

impl BoostModel {
    pub fn constant(offset: f64, dim: usize) -> Self {
        Self {
            offset,
            terms: Vec::new(),
            standardization: Standardization::identity(dim),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64, BoostError> {
        if x.len() != self.standardization.dim() {
            return Err(BoostError::DimensionMismatch {
                expected: self.standardization.dim(),
                found: x.len(),
            });
        }
        let z = self.standardization.apply_row(x);
        self.predict_standardized(&z)
    }

    fn predict_standardized(&self, z: &[f64]) -> Result<f64, BoostError> {
        let mut value = self.offset;
        for term in &self.terms {
            value += term.weight * term.learner.predict(z)?;
        }
        Ok(value)
    }

    /// Covariate indices used by componentwise terms, in first-use order.
    pub fn selected_covariates(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for term in &self.terms {
            if let BaseLearner::Component(c) = &term.learner {
                if !out.contains(&c.covariate_index) {
                    out.push(c.covariate_index);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64, BoostError> {
        if x.len() != self.coefficients.len() {
            return Err(BoostError::DimensionMismatch {
                expected: self.coefficients.len(),
                found: x.len(),
            });
        }
        Ok(self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub model: LinearModel,
    pub iterations: usize,
    pub converged: bool,
    /// The iteration settled into a two-cycle; `model` is the average of the
    /// pair.
    pub oscillated: bool,
}

/// Buckley-James imputation. Events keep their observed value; a censored
/// row becomes `fitted + E[residual | residual > observed - fitted]` under
/// `curve`. A censored row with no curve mass above its residual keeps its
/// observed value.
pub fn bj_impute(observed: &[f64], events: &[bool], fitted: &[f64], curve: &KmCurve) -> Vec<f64> {
    observed
        .iter()
        .zip(events)
        .zip(fitted)
        .map(|((&y, &event), &f)| {
            if event {
                y
            } else {
                match km_tail_expectation(curve, y - f) {
                    Ok(tail) => f + tail,
                    Err(_) => y,
                }
            }
        })
        .collect()
}

fn check_inputs(
    features: &DMatrix<f64>,
    observed: &[f64],
    events: &[bool],
) -> Result<(), BoostError> {
    if features.nrows() != observed.len() || observed.len() != events.len() {
        return Err(BoostError::LengthMismatch(format!(
            "{} feature rows, {} times, {} event flags",
            features.nrows(),
            observed.len(),
            events.len()
        )));
    }
    if !events.iter().any(|&e| e) {
        return Err(BoostError::AllCensored);
    }
    Ok(())
}

/// Residuals of `observed` against `fitted`, then a fresh residual curve.
fn residual_curve(observed: &[f64], events: &[bool], fitted: &[f64]) -> Result<KmCurve, KmError> {
    let resid: Vec<f64> = observed.iter().zip(fitted).map(|(y, f)| y - f).collect();
    km_fit(&resid, events)
}

/// Boosted Buckley-James regression.
///
/// Starting from the initial estimate, each of the `iterations` steps
/// imputes censored outcomes against the current fit, fits one base learner
/// to the imputed residuals and adds it with weight `learning_rate`. The
/// residual curve is refit after every update. Covariates are standardized on
/// the training rows and the transform is stored with the model.
pub fn bj_boost_fit(
    features: &DMatrix<f64>,
    observed: &[f64],
    events: &[bool],
    config: &BoostConfig,
) -> Result<BoostModel, BoostError> {
    config.validate()?;
    check_inputs(features, observed, events)?;
    let n = observed.len();
    if n < MIN_ROWS {
        return Err(BoostError::TooFewRows { n, min: MIN_ROWS });
    }

    let standardization = Standardization::fit(features);
    let z = standardization.apply(features);
    let initial = initial_model(&z, observed, config, standardization)?;

    match (config.learner, config.twin) {
        (LearnerKind::ComponentwiseLs, true) => {
            let first = boost_rounds(&z, observed, events, config, initial.clone(), None)?;
            let selected = first.selected_covariates();
            if selected.is_empty() {
                return Ok(first);
            }
            boost_rounds(&z, observed, events, config, initial, Some(&selected))
        }
        _ => boost_rounds(&z, observed, events, config, initial, None),
    }
}

fn initial_model(
    z: &DMatrix<f64>,
    observed: &[f64],
    config: &BoostConfig,
    standardization: Standardization,
) -> Result<BoostModel, BoostError> {
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let mut model = BoostModel {
        offset: mean,
        terms: Vec::new(),
        standardization,
    };
    if config.init_mode == InitMode::LeastSquares {
        // Constant columns standardize to zero; leave them out of the design.
        let usable: Vec<usize> = (0..z.ncols())
            .filter(|&j| z.column(j).iter().any(|&v| v != 0.0))
            .collect();
        let sub = select_columns(z, &usable);
        if let Ok(beta) = least_squares(&sub, observed) {
            model.offset = beta[0];
            for (k, &j) in usable.iter().enumerate() {
                model.terms.push(ScaledTerm {
                    weight: 1.0,
                    learner: BaseLearner::Component(ComponentTerm {
                        covariate_index: j,
                        coefficient: beta[k + 1],
                    }),
                });
            }
        }
    }
    Ok(model)
}

fn boost_rounds(
    z: &DMatrix<f64>,
    observed: &[f64],
    events: &[bool],
    config: &BoostConfig,
    mut model: BoostModel,
    candidates: Option<&[usize]>,
) -> Result<BoostModel, BoostError> {
    let n = observed.len();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| z.row(i).iter().copied().collect()).collect();
    let mut fitted = rows
        .iter()
        .map(|r| model.predict_standardized(r))
        .collect::<Result<Vec<f64>, _>>()?;

    let nu = config.learning_rate;
    for iteration in 1..=config.iterations {
        let curve = residual_curve(observed, events, &fitted)?;
        let imputed = bj_impute(observed, events, &fitted, &curve);
        let residuals: Vec<f64> = imputed.iter().zip(&fitted).map(|(y, f)| y - f).collect();

        let learner = match config.learner {
            LearnerKind::ComponentwiseLs => {
                BaseLearner::Component(componentwise_ls_fit(z, &residuals, candidates)?)
            }
            LearnerKind::Tree => {
                BaseLearner::Tree(tree_fit(z, &residuals, config.max_depth, config.min_leaf)?)
            }
        };
        for (f, row) in fitted.iter_mut().zip(&rows) {
            *f += nu * learner.predict(row)?;
            if !f.is_finite() || f.abs() > DIVERGENCE_LIMIT {
                return Err(BoostError::Diverged { iteration });
            }
        }
        model.terms.push(ScaledTerm {
            weight: nu,
            learner,
        });
    }
    Ok(model)
}

fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, k| m[(i, cols[k])])
}

pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |k, j| m[(rows[k], j)])
}

/// Least squares with an intercept prepended; returns `[intercept, coefs..]`.
pub(crate) fn least_squares(features: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>, BoostError> {
    let n = features.nrows();
    let p = features.ncols() + 1;
    if n < p {
        return Err(BoostError::RankDeficient);
    }
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { features[(i, j - 1)] });
    let qr = design.qr();
    let r = qr.r();
    let max_diag = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if !(max_diag > 0.0) || (0..p).any(|j| r[(j, j)].abs() <= 1e-10 * max_diag) {
        return Err(BoostError::RankDeficient);
    }
    let qty = qr.q().transpose() * DVector::from_column_slice(y);
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(BoostError::RankDeficient)?;
    Ok(beta.iter().copied().collect())
}

/// Classical linear Buckley-James estimator.
///
/// Starts from least squares on the observed times and alternates residual
/// curve, imputation and least-squares refit until the largest coefficient
/// change drops below `tol`. If the iterate returns to within `tol` of the
/// vector two steps back, the fit is declared oscillating and the average of
/// the two-cycle is returned.
pub fn bj_linear_fit(
    features: &DMatrix<f64>,
    observed: &[f64],
    events: &[bool],
    max_iter: usize,
    tol: f64,
) -> Result<LinearFit, BoostError> {
    check_inputs(features, observed, events)?;
    let mut beta = least_squares(features, observed)?;
    let mut previous: Option<Vec<f64>> = None;
    let mut converged = false;
    let mut oscillated = false;
    let mut iterations = 0;

    let fitted_for = |b: &[f64]| -> Vec<f64> {
        (0..features.nrows())
            .map(|i| {
                b[0] + features
                    .row(i)
                    .iter()
                    .zip(&b[1..])
                    .map(|(x, c)| x * c)
                    .sum::<f64>()
            })
            .collect()
    };
    let max_change = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };

    while iterations < max_iter {
        iterations += 1;
        let fitted = fitted_for(&beta);
        let curve = residual_curve(observed, events, &fitted)?;
        let imputed = bj_impute(observed, events, &fitted, &curve);
        let next = least_squares(features, &imputed)?;

        if max_change(&next, &beta) < tol {
            beta = next;
            converged = true;
            break;
        }
        if let Some(prev) = &previous {
            if max_change(&next, prev) < tol {
                beta = beta.iter().zip(&next).map(|(a, b)| 0.5 * (a + b)).collect();
                oscillated = true;
                break;
            }
        }
        previous = Some(std::mem::replace(&mut beta, next));
    }

    if beta.iter().any(|b| !b.is_finite()) {
        return Err(BoostError::Diverged {
            iteration: iterations,
        });
    }
    Ok(LinearFit {
        model: LinearModel {
            intercept: beta[0],
            coefficients: beta[1..].to_vec(),
        },
        iterations,
        converged,
        oscillated,
    })
}

/// Assigns each row to a fold, dealing events and censored rows round-robin
/// after a seeded shuffle within each group.
fn stratified_folds(events: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut with_event: Vec<usize> = (0..events.len()).filter(|&i| events[i]).collect();
    let mut censored: Vec<usize> = (0..events.len()).filter(|&i| !events[i]).collect();
    with_event.shuffle(&mut rng);
    censored.shuffle(&mut rng);
    let mut assignment = vec![0; events.len()];
    for (pos, &i) in with_event.iter().chain(&censored).enumerate() {
        assignment[i] = pos % folds;
    }
    assignment
}

/// Selects the configuration with the lowest cross-validated squared error
/// on validation events (censored validation rows carry no loss). Ties go to
/// fewer iterations, then to the smaller learning rate.
pub fn cv_tune(
    features: &DMatrix<f64>,
    observed: &[f64],
    events: &[bool],
    grid: &[BoostConfig],
    folds: usize,
    seed: u64,
) -> Result<BoostConfig, BoostError> {
    if grid.is_empty() {
        return Err(BoostError::CrossValidation("empty grid".into()));
    }
    if folds < 2 {
        return Err(BoostError::CrossValidation("need at least 2 folds".into()));
    }
    check_inputs(features, observed, events)?;
    if grid.len() == 1 {
        return Ok(grid[0]);
    }

    let assignment = (0..=CV_MAX_REDRAWS)
        .map(|attempt| stratified_folds(events, folds, seed.wrapping_add(attempt)))
        .find(|a| {
            (0..folds).all(|f| (0..events.len()).any(|i| a[i] != f && events[i]))
        })
        .ok_or_else(|| {
            BoostError::CrossValidation(format!(
                "a training split had no events after {CV_MAX_REDRAWS} redraws"
            ))
        })?;

    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|f| {
            let (valid, train): (Vec<usize>, Vec<usize>) =
                (0..events.len()).partition(|&i| assignment[i] == f);
            (train, valid)
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|c| (0..folds).map(move |f| (c, f)))
        .collect();
    let losses: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(c, f)| fold_loss(features, observed, events, &grid[c], &splits[f]))
        .collect::<Result<_, _>>()?;

    let mut scored: Vec<(f64, &BoostConfig)> = grid
        .iter()
        .enumerate()
        .map(|(c, cfg)| {
            let fold_losses: Vec<f64> = losses[c * folds..(c + 1) * folds]
                .iter()
                .flatten()
                .copied()
                .collect();
            let err = if fold_losses.is_empty() {
                f64::INFINITY
            } else {
                fold_losses.iter().sum::<f64>() / fold_losses.len() as f64
            };
            (err, cfg)
        })
        .collect();
    scored.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.iterations.cmp(&b.1.iterations))
            .then(a.1.learning_rate.total_cmp(&b.1.learning_rate))
    });
    Ok(*scored[0].1)
}

fn fold_loss(
    features: &DMatrix<f64>,
    observed: &[f64],
    events: &[bool],
    config: &BoostConfig,
    (train, valid): &(Vec<usize>, Vec<usize>),
) -> Result<Option<f64>, BoostError> {
    let scored: Vec<usize> = valid.iter().copied().filter(|&i| events[i]).collect();
    if scored.is_empty() {
        return Ok(None);
    }
    let x = select_rows(features, train);
    let y: Vec<f64> = train.iter().map(|&i| observed[i]).collect();
    let d: Vec<bool> = train.iter().map(|&i| events[i]).collect();
    let model = bj_boost_fit(&x, &y, &d, config)?;
    let mut sse = 0.0;
    for &i in &scored {
        let row: Vec<f64> = features.row(i).iter().copied().collect();
        let r = observed[i] - model.predict(&row)?;
        sse += r * r;
    }
    Ok(Some(sse / scored.len() as f64))
}
