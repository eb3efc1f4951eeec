//! Ordinal objective: cross-entropy plus mean and variance penalties on the
//! predicted score distribution.
//!
//! Every term is averaged over the batch within a region, then the regions
//! are averaged with equal weight regardless of their class counts.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SatError};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_mu: f64,
    pub lambda_var: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_mu: 0.2, lambda_var: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mu >= 0.0 && self.lambda_var >= 0.0) {
            return Err(SatError::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub mean: f64,
    pub variance: f64,
    pub total: f64,
}

/// 1-indexed ordinal labels, row-major `[B, R]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    batch: usize,
    regions: usize,
    values: Vec<u32>,
}

impl Labels {
    pub fn new(batch: usize, regions: usize, values: Vec<u32>) -> Result<Self> {
        if values.len() != batch * regions {
            return Err(SatError::Data(format!("{} labels for a {batch}x{regions} batch", values.len())));
        }
        Ok(Labels { batch, regions, values })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let regions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != regions) {
            return Err(SatError::Data("ragged label rows".into()));
        }
        Labels::new(rows.len(), regions, rows.concat())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn get(&self, sample: usize, region: usize) -> u32 {
        self.values[sample * self.regions + region]
    }

    pub fn region(&self, region: usize) -> Vec<u32> {
        (0..self.batch).map(|b| self.get(b, region)).collect()
    }

    /// Rejects any label outside `[1, K_r]`.
    pub fn check(&self, class_counts: &[usize]) -> Result<()> {
        if class_counts.len() != self.regions {
            return Err(SatError::Data(format!(
                "labels have {} regions, model has {}",
                self.regions,
                class_counts.len()
            )));
        }
        for b in 0..self.batch {
            for (r, &k) in class_counts.iter().enumerate() {
                let y = self.get(b, r);
                if y < 1 || y as usize > k {
                    return Err(SatError::Data(format!("label {y} of sample {b} region {r} outside [1, {k}]")));
                }
            }
        }
        Ok(())
    }
}

fn class_counts<T: Real>(tape: &Tape<T>, dists: &[Var], labels: &Labels) -> Result<Vec<usize>> {
    if dists.len() != labels.regions() {
        return Err(SatError::Data(format!("{} distributions for {} label regions", dists.len(), labels.regions())));
    }
    let mut counts = Vec::with_capacity(dists.len());
    for &v in dists {
        let s = tape.shape(v);
        if s.len() != 2 || s[0] != labels.batch() {
            return Err(SatError::Data(format!("expected [{}, K] per region, got {s:?}", labels.batch())));
        }
        counts.push(s[1]);
    }
    labels.check(&counts)?;
    Ok(counts)
}

fn score_axis<T: Real>(tape: &mut Tape<T>, k: usize) -> Var {
    let ks = (1..=k).map(|v| T::of(v as f64)).collect();
    tape.constant(Tensor::new(vec![k], ks).expect("k > 0"))
}

fn region_average<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, T::one() / T::of(terms.len() as f64))
}

/// Expected score μ_r = Σ k·p_{r,k}, shape `[B]`.
fn expected<T: Real>(tape: &mut Tape<T>, probs: Var, k: usize) -> Result<Var> {
    let ks = score_axis(tape, k);
    let weighted = tape.mul(probs, ks)?;
    tape.sum_last(weighted)
}

/// (1/R) Σ_r mean_b (μ_r − y_r)².
pub fn mean_loss<T: Real>(tape: &mut Tape<T>, probs: &[Var], labels: &Labels) -> Result<Var> {
    let counts = class_counts(tape, probs, labels)?;
    let mut terms = Vec::with_capacity(probs.len());
    for (r, (&p, &k)) in probs.iter().zip(&counts).enumerate() {
        let mu = expected(tape, p, k)?;
        let y: Vec<T> = labels.region(r).into_iter().map(|v| T::of(v as f64)).collect();
        let y = tape.constant(Tensor::new(tape.shape(mu).to_vec(), y)?);
        let diff = tape.sub(mu, y)?;
        let sq = tape.mul(diff, diff)?;
        terms.push(tape.mean_all(sq)?);
    }
    region_average(tape, &terms)
}

/// (1/R) Σ_r mean_b Σ_k p_{r,k} (k − μ_r)².
pub fn variance_loss<T: Real>(tape: &mut Tape<T>, probs: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(probs.len());
    for &p in probs {
        let shape = tape.shape(p).to_vec();
        if shape.len() != 2 {
            return Err(SatError::Data(format!("expected [B, K] probabilities, got {shape:?}")));
        }
        let k = shape[1];
        let mu = expected(tape, p, k)?;
        let mu_b = tape.broadcast_last(mu, k)?;
        let ks = score_axis(tape, k);
        let dev = tape.sub(mu_b, ks)?;
        let sq = tape.mul(dev, dev)?;
        let weighted = tape.mul(p, sq)?;
        let per_sample = tape.sum_last(weighted)?;
        terms.push(tape.mean_all(per_sample)?);
    }
    if terms.is_empty() {
        return Err(SatError::Data("variance loss over zero regions".into()));
    }
    region_average(tape, &terms)
}

/// (1/R) Σ_r mean_b −log softmax(logits_r)[y_r], in log-sum-exp form.
pub fn ce_loss<T: Real>(tape: &mut Tape<T>, logits: &[Var], labels: &Labels) -> Result<Var> {
    class_counts(tape, logits, labels)?;
    let mut terms = Vec::with_capacity(logits.len());
    for (r, &z) in logits.iter().enumerate() {
        let logp = tape.log_softmax_rows(z)?;
        let idx: Vec<usize> = labels.region(r).into_iter().map(|y| y as usize - 1).collect();
        let picked = tape.pick_last(logp, &idx)?;
        let m = tape.mean_all(picked)?;
        terms.push(tape.scale(m, -T::one())?);
    }
    region_average(tape, &terms)
}

/// ce + λ_μ·mean + λ_σ²·variance. Returns the scalar to differentiate and its parts.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: &[Var],
    labels: &Labels,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let probs = logits.iter().map(|&z| tape.softmax_rows(z)).collect::<Result<Vec<_>>>()?;
    let ce = ce_loss(tape, logits, labels)?;
    let mean = mean_loss(tape, &probs, labels)?;
    let variance = variance_loss(tape, &probs)?;
    let wm = tape.scale(mean, T::of(weights.lambda_mu))?;
    let wv = tape.scale(variance, T::of(weights.lambda_var))?;
    let total = tape.add(ce, wm)?;
    let total = tape.add(total, wv)?;
    let scalar = |v: Var| tape.value(v).data()[0].as_f64();
    let breakdown =
        LossBreakdown { ce: scalar(ce), mean: scalar(mean), variance: scalar(variance), total: scalar(total) };
    Ok((total, breakdown))
}
