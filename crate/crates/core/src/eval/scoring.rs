//! Score aggregation, score-to-age mapping, MAE and cumulative score.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SatError};

/// Canonical region order.
pub const REGION_NAMES: [&str; 5] = ["lateral_condyle", "trochlea", "proximal_ap", "olecranon", "proximal_lateral"];

/// lateral condyle + trochlea + mean of the two proximal views + olecranon.
pub fn sauvegrain_sum(scores: &[f64]) -> Result<f64> {
    match scores {
        &[lat, troch, prox_ap, olec, prox_lat] => Ok(lat + troch + (prox_ap + prox_lat) / 2.0 + olec),
        _ => Err(SatError::Config(format!("total score needs exactly 5 regions, got {}", scores.len()))),
    }
}

/// Piecewise-linear map from total score to age in years.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AgeMapRaw", into = "AgeMapRaw")]
pub struct AgeMap {
    knots: Vec<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgeMapRaw {
    knots: Vec<(f64, f64)>,
}

impl TryFrom<AgeMapRaw> for AgeMap {
    type Error = SatError;
    fn try_from(raw: AgeMapRaw) -> Result<Self> {
        AgeMap::new(raw.knots)
    }
}

impl From<AgeMap> for AgeMapRaw {
    fn from(m: AgeMap) -> Self {
        AgeMapRaw { knots: m.knots }
    }
}

impl Default for AgeMap {
    fn default() -> Self {
        AgeMap { knots: vec![(0.0, 8.0), (27.0, 16.0)] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgeValue {
    pub age: f64,
    /// The input fell outside the knot range and was clamped.
    pub clamped: bool,
}

impl AgeMap {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(SatError::Config("an age map needs at least two knots".into()));
        }
        if knots.iter().any(|(s, a)| !s.is_finite() || !a.is_finite()) {
            return Err(SatError::Config("age map knots must be finite".into()));
        }
        if knots.windows(2).any(|w| !(w[1].0 > w[0].0 && w[1].1 > w[0].1)) {
            return Err(SatError::Config(format!(
                "age map knots must increase strictly in both coordinates: {knots:?}"
            )));
        }
        Ok(AgeMap { knots })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0].0, self.knots[self.knots.len() - 1].0)
    }

    /// Errors unless the knots span `[lo, hi]`.
    pub fn check_covers(&self, lo: f64, hi: f64) -> Result<()> {
        let (a, b) = self.domain();
        if a > lo || b < hi {
            return Err(SatError::Config(format!("age map covers [{a}, {b}] but scores range over [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn score_to_age(&self, sum: f64) -> AgeValue {
        let (lo, hi) = self.domain();
        let first = self.knots[0];
        let last = self.knots[self.knots.len() - 1];
        if sum <= lo {
            return AgeValue { age: first.1, clamped: sum < lo };
        }
        if sum >= hi {
            return AgeValue { age: last.1, clamped: sum > hi };
        }
        let seg = self.knots.windows(2).find(|w| sum <= w[1].0).expect("sum inside the domain");
        let (s0, a0) = seg[0];
        let (s1, a1) = seg[1];
        let age = if sum == s1 { a1 } else { a0 + (a1 - a0) * (sum - s0) / (s1 - s0) };
        AgeValue { age, clamped: false }
    }
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(SatError::Data("metric over an empty set".into()));
    }
    if pred.len() != truth.len() {
        return Err(SatError::Data(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Percentage of pairs with `|pred − truth| ≤ θ`.
pub fn cumulative_score(pred: &[f64], truth: &[f64], theta: f64) -> Result<f64> {
    check_pair(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| (*p - *t).abs() <= theta).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}
