//! Momentum SGD, sharpness-aware minimization and cosine annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SatError};
use crate::objective::LossBreakdown;
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    /// SAM neighbourhood radius.
    pub rho: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub min_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { base_lr: 0.01, rho: 0.05, epochs: 30, batch_size: 16, momentum: 0.9, min_lr: 0.0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.rho >= 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(SatError::Config(format!(
                "need base_lr > 0, rho >= 0, epochs >= 1, batch_size >= 1; got {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.min_lr >= 0.0) || self.min_lr > self.base_lr {
            return Err(SatError::Config(format!("need momentum in [0,1) and 0 <= min_lr <= base_lr; got {self:?}")));
        }
        Ok(())
    }
}

/// min_lr + ½(base_lr − min_lr)(1 + cos(π·step/total_steps))
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &OptimConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(SatError::Config("cosine schedule over zero steps".into()));
    }
    if step > total_steps {
        return Err(SatError::Contract(format!("step {step} beyond schedule length {total_steps}")));
    }
    let progress = step as f64 / total_steps as f64;
    // Written as an interpolation so both endpoints come out exact.
    let a = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(cfg.min_lr * (1.0 - a) + cfg.base_lr * a)
}

/// Per-parameter momentum buffers, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState<T> {
    pub buffers: Vec<Vec<T>>,
}

impl<T: Real> MomentumState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        MomentumState { buffers: params.zeros_like() }
    }
}

/// buf ← μ·buf + g;  w ← w − lr·buf
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    state: &mut MomentumState<T>,
    grads: &[Vec<T>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.buffers.len() != params.len() {
        return Err(SatError::Contract("gradient/momentum layout does not match parameters".into()));
    }
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for ((p, buf), g) in params.iter_mut().zip(&mut state.buffers).zip(grads) {
        for ((w, b), &gv) in p.value.data_mut().iter_mut().zip(buf.iter_mut()).zip(g) {
            *b = mu * *b + gv;
            *w -= lr * *b;
        }
        if !p.value.is_finite() {
            return Err(SatError::Numerical(format!("parameter {} diverged", p.name)));
        }
    }
    Ok(())
}

/// Euclidean norm over every parameter jointly.
pub fn global_norm<T: Real>(grads: &[Vec<T>]) -> f64 {
    let mut acc = 0.0f64;
    for g in grads {
        for &v in g {
            let v = v.as_f64();
            acc += v * v;
        }
    }
    acc.sqrt()
}

/// One SAM update.
///
/// `compute` evaluates the loss and parameter gradients at the parameters it
/// is handed. It runs at `w`, then at `w + ρ·g/‖g‖`; the parameters are then
/// restored from a stored copy and the momentum step uses the second
/// gradient. With `ρ = 0` or a zero gradient the second evaluation is skipped.
/// Returns the loss at `w`.
pub fn sam_step<T, F>(
    params: &mut ParamStore<T>,
    state: &mut MomentumState<T>,
    lr: f64,
    cfg: &OptimConfig,
    mut compute: F,
) -> Result<LossBreakdown>
where
    T: Real,
    F: FnMut(&ParamStore<T>) -> Result<(LossBreakdown, Vec<Vec<T>>)>,
{
    let (loss, grads) = compute(params)?;
    let norm = global_norm(&grads);
    if !norm.is_finite() {
        return Err(SatError::Numerical(format!("gradient norm is {norm}")));
    }
    let update = if cfg.rho > 0.0 && norm > 0.0 {
        let saved = params.clone();
        let scale = T::of(cfg.rho / norm);
        for (p, g) in params.iter_mut().zip(&grads) {
            for (w, &gv) in p.value.data_mut().iter_mut().zip(g) {
                *w += scale * gv;
            }
        }
        let perturbed = compute(params);
        *params = saved;
        perturbed?.1
    } else {
        grads
    };
    sgd_step(params, state, &update, lr, cfg.momentum)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w)).unwrap();
        s
    }

    fn quadratic(p: &ParamStore<f64>) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        let w = p.get("w").unwrap().data()[0];
        Ok((LossBreakdown { total: w * w, ..Default::default() }, vec![vec![2.0 * w]]))
    }

    #[test]
    fn cosine_schedule_examples() {
        let cfg = OptimConfig::default();
        assert_eq!(cosine_lr(0, 100, &cfg).unwrap(), 0.01);
        assert!(cosine_lr(100, 100, &cfg).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, &cfg).unwrap() - 0.005).abs() < 1e-15);
        assert!(matches!(cosine_lr(0, 0, &cfg), Err(SatError::Config(_))));
        let mut prev = f64::INFINITY;
        for s in 0..=37 {
            let lr = cosine_lr(s, 37, &cfg).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn sam_quadratic_hand_example() {
        let cfg = OptimConfig { rho: 0.5, momentum: 0.0, ..OptimConfig::default() };
        let mut p = scalar_store(1.0);
        let mut state = MomentumState::new(&p);
        let loss = sam_step(&mut p, &mut state, 0.1, &cfg, quadratic).unwrap();
        assert_eq!(loss.total, 1.0);
        assert!((p.get("w").unwrap().data()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_falls_back_to_plain_step() {
        let cfg = OptimConfig { rho: 0.5, ..OptimConfig::default() };
        let mut p = scalar_store(0.0);
        let mut state = MomentumState::new(&p);
        let mut calls = 0;
        sam_step(&mut p, &mut state, 0.1, &cfg, |p| {
            calls += 1;
            quadratic(p)
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(p.get("w").unwrap().data()[0], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        assert!(OptimConfig { base_lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { rho: -0.1, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { epochs: 0, ..Default::default() }.validate().is_err());
    }
}
