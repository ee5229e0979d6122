//! Cox proportional-hazards comparator.
//!
//! Models are fit on standardized covariates by damped Newton-Raphson on the
//! Breslow partial likelihood. Q-values are restricted mean survival times,
//! which puts the comparator on the same time scale as the Buckley-James
//! fits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base_learners::Standardization;

pub const GRADIENT_TOL: f64 = 1e-8;
pub const MAX_NEWTON_ITER: usize = 100;
pub const SEPARATION_LIMIT: f64 = 50.0;
const MAX_HALVINGS: usize = 20;
const STEP_TOL: f64 = 1e-6;
/// Relative log-likelihood gain below which a Newton step is noise.
const PRECISION_GAIN: f64 = 1e-13;
/// Per-event curvature below which a standardized covariate is separated.
const FLAT_INFORMATION: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoxError {
    #[error("need at least 2 events, got {0}")]
    TooFewEvents(usize),
    #[error("input lengths disagree: {0}")]
    LengthMismatch(String),
    #[error("non-finite input at row {0}")]
    NonFinite(usize),
    #[error("Newton-Raphson did not converge (last gradient max-norm {gradient_norm:e})")]
    NonConvergence { gradient_norm: f64 },
    #[error("separation: partial likelihood is monotone in covariate {covariate}")]
    Separation { covariate: usize },
    #[error("expected {expected} covariates, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselinePoint {
    pub time: f64,
    pub cumulative_hazard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    /// Coefficients on the standardized scale.
    pub coefficients: Vec<f64>,
    pub standardization: Standardization,
    /// Breslow cumulative baseline hazard at each distinct event time.
    pub baseline: Vec<BaselinePoint>,
    /// Largest observed time in the training data.
    pub train_horizon: f64,
}

/// Diagnostics from the Newton iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxTrace {
    /// Partial log-likelihood at the start and after every accepted step.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    /// Standard errors on the standardized scale from the final information.
    pub standard_errors: Vec<f64>,
}

impl CoxModel {
    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64, CoxError> {
        if x.len() != self.coefficients.len() {
            return Err(CoxError::DimensionMismatch {
                expected: self.coefficients.len(),
                found: x.len(),
            });
        }
        let z = self.standardization.apply_row(x);
        Ok(z.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum())
    }

    /// Coefficients per unit of the original covariates.
    pub fn raw_coefficients(&self) -> Vec<f64> {
        self.coefficients
            .iter()
            .zip(&self.standardization.scales)
            .map(|(b, s)| b / s)
            .collect()
    }

    pub fn cumulative_hazard_at(&self, t: f64) -> f64 {
        let idx = self.baseline.partition_point(|p| p.time <= t);
        if idx == 0 {
            0.0
        } else {
            self.baseline[idx - 1].cumulative_hazard
        }
    }
}

struct Evaluation {
    loglik: f64,
    gradient: DVector<f64>,
    information: DMatrix<f64>,
}

/// Risk-set pass over rows sorted by decreasing time.
struct SortedData<'a> {
    z: &'a DMatrix<f64>,
    order: Vec<usize>,
    times: &'a [f64],
    events: &'a [bool],
}

impl SortedData<'_> {
    /// Visits groups of tied times from the latest to the earliest. The
    /// callback sees the rows in the group after they were added to the
    /// risk set.
    fn for_each_group(&self, mut f: impl FnMut(&[usize])) {
        let n = self.order.len();
        let mut i = 0;
        while i < n {
            let t = self.times[self.order[i]];
            let mut j = i;
            while j < n && self.times[self.order[j]] == t {
                j += 1;
            }
            f(&self.order[i..j]);
            i = j;
        }
    }

    fn evaluate(&self, beta: &DVector<f64>) -> Evaluation {
        let p = beta.len();
        let eta: Vec<f64> = (0..self.z.nrows())
            .map(|i| (0..p).map(|j| self.z[(i, j)] * beta[j]).sum())
            .collect();
        let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);

        let mut loglik = 0.0;
        let mut gradient = DVector::zeros(p);
        let mut information = DMatrix::zeros(p, p);
        let mut s0 = 0.0;
        let mut s1 = DVector::<f64>::zeros(p);
        let mut s2 = DMatrix::<f64>::zeros(p, p);

        self.for_each_group(|group| {
            for &i in group {
                let w = (eta[i] - shift).exp();
                s0 += w;
                for a in 0..p {
                    let za = self.z[(i, a)];
                    s1[a] += w * za;
                    for b in 0..p {
                        s2[(a, b)] += w * za * self.z[(i, b)];
                    }
                }
            }
            let deaths: Vec<usize> = group.iter().copied().filter(|&i| self.events[i]).collect();
            if deaths.is_empty() {
                return;
            }
            let d = deaths.len() as f64;
            let log_s0 = s0.ln() + shift;
            for &i in &deaths {
                loglik += eta[i] - log_s0;
                for a in 0..p {
                    gradient[a] += self.z[(i, a)];
                }
            }
            for a in 0..p {
                let ma = s1[a] / s0;
                gradient[a] -= d * ma;
                for b in 0..p {
                    information[(a, b)] += d * (s2[(a, b)] / s0 - ma * s1[b] / s0);
                }
            }
        });

        Evaluation {
            loglik,
            gradient,
            information,
        }
    }

    fn breslow(&self, beta: &DVector<f64>) -> Vec<BaselinePoint> {
        let p = beta.len();
        let mut s0 = 0.0;
        let mut jumps = Vec::new();
        self.for_each_group(|group| {
            for &i in group {
                s0 += (0..p).map(|j| self.z[(i, j)] * beta[j]).sum::<f64>().exp();
            }
            let d = group.iter().filter(|&&i| self.events[i]).count();
            if d > 0 {
                jumps.push((self.times[group[0]], d as f64 / s0));
            }
        });
        jumps.reverse();
        let mut cumulative = 0.0;
        jumps
            .into_iter()
            .map(|(time, dh)| {
                cumulative += dh;
                BaselinePoint {
                    time,
                    cumulative_hazard: cumulative,
                }
            })
            .collect()
    }
}

pub fn cox_fit(
    features: &DMatrix<f64>,
    observed: &[f64],
    events: &[bool],
) -> Result<CoxModel, CoxError> {
    cox_fit_traced(features, observed, events).map(|(m, _)| m)
}

/// Fits the model and also returns the likelihood path and standard errors.
pub fn cox_fit_traced(
    features: &DMatrix<f64>,
    observed: &[f64],
    events: &[bool],
) -> Result<(CoxModel, CoxTrace), CoxError> {
    let n = observed.len();
    if features.nrows() != n || events.len() != n {
        return Err(CoxError::LengthMismatch(format!(
            "{} feature rows, {} times, {} event flags",
            features.nrows(),
            n,
            events.len()
        )));
    }
    if let Some(i) = (0..n).find(|&i| {
        !observed[i].is_finite() || features.row(i).iter().any(|v| !v.is_finite())
    }) {
        return Err(CoxError::NonFinite(i));
    }
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events < 2 {
        return Err(CoxError::TooFewEvents(n_events));
    }

    let standardization = Standardization::fit(features);
    let z_full = standardization.apply(features);
    // Constant columns standardize to zero and keep a zero coefficient.
    let active: Vec<usize> = (0..z_full.ncols())
        .filter(|&j| z_full.column(j).iter().any(|&v| v != 0.0))
        .collect();
    let z = DMatrix::from_fn(n, active.len(), |i, k| z_full[(i, active[k])]);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| observed[b].total_cmp(&observed[a]));
    let data = SortedData {
        z: &z,
        order,
        times: observed,
        events,
    };

    let p = active.len();
    let mut beta = DVector::zeros(p);
    let mut eval = data.evaluate(&beta);
    let mut path = vec![eval.loglik];
    let mut iterations = 0;

    loop {
        let grad_norm = eval.gradient.amax();
        let chol = eval.information.clone().cholesky();
        let Some(chol) = chol else {
            if p == 0 {
                break;
            }
            let covariate = (0..p)
                .max_by(|&a, &b| beta[a].abs().total_cmp(&beta[b].abs()))
                .map(|k| active[k])
                .unwrap_or(0);
            return Err(CoxError::Separation { covariate });
        };
        let step = chol.solve(&eval.gradient);
        let decrement = eval.gradient.dot(&step);
        let at_precision = decrement <= PRECISION_GAIN * eval.loglik.abs().max(1.0);
        if (grad_norm < GRADIENT_TOL && step.amax() < STEP_TOL) || at_precision {
            break;
        }
        if iterations >= MAX_NEWTON_ITER {
            return Err(CoxError::NonConvergence {
                gradient_norm: grad_norm,
            });
        }
        iterations += 1;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &beta + &step * scale;
            let next = data.evaluate(&candidate);
            if next.loglik >= eval.loglik {
                accepted = Some((candidate, next));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, next)) = accepted else {
            if grad_norm < GRADIENT_TOL {
                break;
            }
            return Err(CoxError::NonConvergence {
                gradient_norm: grad_norm,
            });
        };
        beta = candidate;
        eval = next;
        path.push(eval.loglik);

        if let Some(k) = (0..p).find(|&k| beta[k].abs() > SEPARATION_LIMIT) {
            return Err(CoxError::Separation {
                covariate: active[k],
            });
        }
    }

    // A monotone likelihood flattens out with vanishing curvature rather than
    // reaching an interior maximum.
    if let Some(k) = (0..p).find(|&k| eval.information[(k, k)] < FLAT_INFORMATION * n_events as f64) {
        return Err(CoxError::Separation {
            covariate: active[k],
        });
    }

    let standard_errors = {
        let mut se = vec![f64::NAN; z_full.ncols()];
        if let Some(inv) = eval.information.clone().try_inverse() {
            for (k, &j) in active.iter().enumerate() {
                se[j] = inv[(k, k)].sqrt();
            }
        }
        se
    };
    let mut coefficients = vec![0.0; z_full.ncols()];
    for (k, &j) in active.iter().enumerate() {
        coefficients[j] = beta[k];
    }
    let baseline = data.breslow(&beta);
    let train_horizon = observed.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    Ok((
        CoxModel {
            coefficients,
            standardization,
            baseline,
            train_horizon,
        },
        CoxTrace {
            log_likelihood: path,
            iterations,
            standard_errors,
        },
    ))
}

/// Restricted mean survival time `integral_0^horizon S(t | x) dt`, summed
/// exactly over the steps of the baseline hazard.
pub fn cox_rmst(model: &CoxModel, x: &[f64], horizon: f64) -> Result<f64, CoxError> {
    let risk = model.linear_predictor(x)?.exp();
    let mut area = 0.0;
    let mut last_time = 0.0;
    let mut surv = 1.0;
    for point in &model.baseline {
        if point.time >= horizon {
            break;
        }
        if point.time > last_time {
            area += surv * (point.time - last_time);
            last_time = point.time;
        }
        surv = (-point.cumulative_hazard * risk).exp();
    }
    if horizon > last_time {
        area += surv * (horizon - last_time);
    }
    Ok(area)
}
