//! Product-limit estimation over regression residuals.
//!
//! The curve is what Buckley-James imputation integrates against: a censored
//! residual `e` is replaced by the mean of the fitted residual distribution
//! conditional on exceeding `e`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KmError {
    #[error("no residuals")]
    NoResiduals,
    #[error("residual values and event flags differ in length ({values} vs {events})")]
    LengthMismatch { values: usize, events: usize },
    #[error("residual {index} is not finite")]
    NonFinite { index: usize },
    #[error("degenerate tail: no probability mass above {threshold}")]
    DegenerateTail { threshold: f64 },
}

/// Right-continuous Kaplan-Meier curve with precomputed jump masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    jump_times: Vec<f64>,
    survival_after: Vec<f64>,
    point_mass: Vec<f64>,
}

impl KmCurve {
    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    /// `S(t_j+)` at each jump.
    pub fn survival_after(&self) -> &[f64] {
        &self.survival_after
    }

    pub fn point_mass(&self) -> &[f64] {
        &self.point_mass
    }

    pub fn total_mass(&self) -> f64 {
        self.point_mass.iter().sum()
    }
}

/// Fits the product-limit estimator.
///
/// Censored values tied with events at the same value stay in the risk set
/// for those events. If the largest value carries censored observations they
/// are reclassified as events so the curve drops to zero and carries total
/// mass one.
pub fn km_fit(values: &[f64], events: &[bool]) -> Result<KmCurve, KmError> {
    if values.len() != events.len() {
        return Err(KmError::LengthMismatch {
            values: values.len(),
            events: events.len(),
        });
    }
    if values.is_empty() {
        return Err(KmError::NoResiduals);
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(KmError::NonFinite { index });
    }

    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let max = values[order[order.len() - 1]];

    let n = values.len();
    let mut jump_times = Vec::new();
    let mut survival_after = Vec::new();
    let mut point_mass = Vec::new();

    let mut surv = 1.0_f64;
    let mut at_risk = n;
    let mut i = 0;
    while i < n {
        let t = values[order[i]];
        let mut deaths = 0usize;
        let mut j = i;
        while j < n && values[order[j]] == t {
            if events[order[j]] || t == max {
                deaths += 1;
            }
            j += 1;
        }
        if deaths > 0 {
            let next = if deaths == at_risk {
                0.0
            } else {
                surv * ((at_risk - deaths) as f64 / at_risk as f64)
            };
            jump_times.push(t);
            point_mass.push(surv - next);
            survival_after.push(next);
            surv = next;
        }
        at_risk -= j - i;
        i = j;
    }

    Ok(KmCurve {
        jump_times,
        survival_after,
        point_mass,
    })
}

/// Mean of the fitted distribution conditional on exceeding `threshold`.
pub fn km_tail_expectation(curve: &KmCurve, threshold: f64) -> Result<f64, KmError> {
    let start = curve.jump_times.partition_point(|&t| t <= threshold);
    let tail = &curve.point_mass[start..];
    let mass: f64 = tail.iter().sum();
    if start == curve.jump_times.len() || !(mass > 0.0) {
        return Err(KmError::DegenerateTail { threshold });
    }
    Ok(curve.jump_times[start..]
        .iter()
        .zip(tail)
        .map(|(t, m)| t * (m / mass))
        .sum())
}

/// Right-continuous evaluation of `S(t)`.
pub fn km_survival_at(curve: &KmCurve, t: f64) -> f64 {
    let idx = curve.jump_times.partition_point(|&x| x <= t);
    if idx == 0 {
        1.0
    } else {
        curve.survival_after[idx - 1]
    }
}
