//! Epoch loop: shuffle, batch, augment, SAM step on a per-step cosine schedule.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SatError};
use crate::model::{predict_scores, ForwardMode, SatModel, ScoreMode};
use crate::objective::{total_loss, Labels, LossBreakdown, LossWeights};
use crate::optim::{cosine_lr, sam_step, MomentumState, OptimConfig};
use crate::params::ParamStore;
use crate::synth::{augment, stack, AugmentConfig, Dataset};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean over the epoch's batches, measured before each update.
    pub loss: LossBreakdown,
    pub train_mae: Vec<f64>,
    /// Rate used by the last step of the epoch.
    pub lr: f64,
}

pub struct Trainer {
    pub model: SatModel<f32>,
    pub momentum: MomentumState<f32>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<EpochStats>,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
}

pub fn steps_per_epoch(num_samples: usize, batch_size: usize) -> usize {
    num_samples.div_ceil(batch_size)
}

/// Loss and parameter gradients for one batch at `params`.
pub fn loss_and_grads(
    model: &SatModel<f32>,
    params: &ParamStore<f32>,
    images: &Tensor<f32>,
    labels: &Labels,
    weights: &LossWeights,
    mode: ForwardMode,
) -> Result<(LossBreakdown, Vec<Vec<f32>>, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let input = tape.constant(images.clone());
    let out = model.forward(&mut tape, &bound, input, mode)?;
    let (loss, parts) = total_loss(&mut tape, &out.logits, labels, weights)?;
    tape.backward(loss)?;
    let logits = out.logits.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((parts, bound.grads(&tape), logits))
}

impl Trainer {
    pub fn new(
        model: SatModel<f32>,
        optim: OptimConfig,
        loss: LossWeights,
        augment: AugmentConfig,
        seed: u64,
    ) -> Result<Self> {
        optim.validate()?;
        loss.validate()?;
        augment.validate()?;
        let momentum = MomentumState::new(&model.params);
        Ok(Trainer {
            model,
            momentum,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
            step: 0,
            history: Vec::new(),
            optim,
            loss,
            augment,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.optim.epochs
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let cfg = self.model.config();
        if data.is_empty() {
            return Err(SatError::Data("training set is empty".into()));
        }
        if data.class_counts != cfg.class_counts {
            return Err(SatError::Config(format!(
                "dataset class counts {:?} do not match the model's {:?}",
                data.class_counts, cfg.class_counts
            )));
        }
        if data.image_size != cfg.image_size {
            return Err(SatError::Config(format!(
                "dataset image size {} does not match the model's {}",
                data.image_size, cfg.image_size
            )));
        }
        Ok(())
    }

    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        self.check_dataset(data)?;
        let n = data.len();
        let batch_size = self.optim.batch_size;
        let total_steps = self.optim.epochs * steps_per_epoch(n, batch_size);
        let regions = self.model.config().num_regions;

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);

        let mut sums = LossBreakdown::default();
        let mut abs_err = vec![0.0f64; regions];
        let mut lr = self.optim.base_lr;
        let mut params = std::mem::take(&mut self.model.params);
        let result = (|| -> Result<()> {
            for chunk in order.chunks(batch_size) {
                let augmented: Vec<_> =
                    chunk.iter().map(|&i| augment(&data.samples[i], &self.augment, &mut self.rng)).collect();
                let images = stack(augmented.iter().map(|s| &s.images));
                let rows: Vec<Vec<u32>> = augmented.iter().map(|s| s.labels.clone()).collect();
                let labels = Labels::from_rows(&rows)?;
                let mode = ForwardMode::Train { dropout_seed: self.rng.next_u64() };
                lr = cosine_lr(self.step.min(total_steps), total_steps, &self.optim)?;

                let mut first_logits = None;
                let model = &self.model;
                let weights = &self.loss;
                let parts = sam_step(&mut params, &mut self.momentum, lr, &self.optim, |p| {
                    let (parts, grads, logits) = loss_and_grads(model, p, &images, &labels, weights, mode)?;
                    first_logits.get_or_insert(logits);
                    Ok((parts, grads))
                })?;
                if !parts.total.is_finite() {
                    return Err(SatError::Numerical(format!(
                        "loss became {} at epoch {} step {} (lr {lr})",
                        parts.total,
                        self.epoch + 1,
                        self.step
                    )));
                }
                self.step += 1;

                let b = chunk.len() as f64;
                sums.ce += parts.ce * b;
                sums.mean += parts.mean * b;
                sums.variance += parts.variance * b;
                sums.total += parts.total * b;
                let logits = first_logits.expect("loss evaluated at least once");
                let preds = predict_scores(&logits.iter().collect::<Vec<_>>(), ScoreMode::Expected);
                for (p, y) in preds.iter().zip(&rows) {
                    for r in 0..regions {
                        abs_err[r] += (p[r] as f64 - y[r] as f64).abs();
                    }
                }
            }
            Ok(())
        })();
        self.model.params = params;
        result?;

        self.epoch += 1;
        let nf = n as f64;
        let stats = EpochStats {
            epoch: self.epoch,
            loss: LossBreakdown {
                ce: sums.ce / nf,
                mean: sums.mean / nf,
                variance: sums.variance / nf,
                total: sums.total / nf,
            },
            train_mae: abs_err.iter().map(|e| e / nf).collect(),
            lr,
        };
        log::info!(
            "epoch {} loss {:.5} (ce {:.5}) lr {:.6} train MAE {:?}",
            stats.epoch,
            stats.loss.total,
            stats.loss.ce,
            stats.lr,
            stats.train_mae
        );
        self.history.push(stats.clone());
        Ok(stats)
    }
}

/// Loss of `model` over all of `data` without augmentation or updates.
pub fn dataset_loss(
    model: &SatModel<f32>,
    data: &Dataset,
    weights: &LossWeights,
    batch_size: usize,
) -> Result<LossBreakdown> {
    if data.is_empty() {
        return Err(SatError::Data("dataset is empty".into()));
    }
    let mut sums = LossBreakdown::default();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let input = tape.constant(data.batch_images(chunk));
        let out = model.forward(&mut tape, &bound, input, ForwardMode::Eval)?;
        let rows: Vec<Vec<u32>> = chunk.iter().map(|&i| data.samples[i].labels.clone()).collect();
        let (_, parts) = total_loss(&mut tape, &out.logits, &Labels::from_rows(&rows)?, weights)?;
        let b = chunk.len() as f64;
        sums.ce += parts.ce * b;
        sums.mean += parts.mean * b;
        sums.variance += parts.variance * b;
        sums.total += parts.total * b;
    }
    let n = data.len() as f64;
    Ok(LossBreakdown { ce: sums.ce / n, mean: sums.mean / n, variance: sums.variance / n, total: sums.total / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SatConfig;
    use crate::synth::{generate, SynthConfig};

    fn small_model_cfg() -> SatConfig {
        SatConfig { embed_dim: 16, image_size: 16, channel_widths: vec![4, 8], ..SatConfig::default() }
    }

    fn data(n: usize, seed: u64) -> Dataset {
        generate(&SynthConfig { num_samples: n, image_size: 16, seed, ..SynthConfig::default() }).unwrap()
    }

    fn trainer(seed: u64, epochs: usize) -> Trainer {
        let model = SatModel::new(small_model_cfg(), seed).unwrap();
        let optim = OptimConfig { epochs, batch_size: 4, ..OptimConfig::default() };
        Trainer::new(model, optim, LossWeights::default(), AugmentConfig::default(), seed).unwrap()
    }

    #[test]
    fn empty_dataset_is_a_data_error() {
        let mut t = trainer(0, 1);
        let mut d = data(2, 0);
        d.samples.clear();
        assert!(matches!(t.train_epoch(&d), Err(SatError::Data(_))));
    }

    #[test]
    fn first_step_uses_base_lr_and_schedule_is_per_step() {
        let mut t = trainer(0, 2);
        let d = data(3, 1);
        let s = t.train_epoch(&d).unwrap();
        assert_eq!(t.step, 1);
        assert_eq!(s.lr, t.optim.base_lr);
        let s = t.train_epoch(&d).unwrap();
        assert_eq!(t.step, 2);
        assert!((s.lr - 0.005).abs() < 1e-15);
    }

    #[test]
    fn fixed_seed_gives_identical_stats() {
        let d = data(10, 3);
        let run = || {
            let mut t = trainer(7, 2);
            (t.train_epoch(&d).unwrap(), t.train_epoch(&d).unwrap(), t.model.params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn two_epochs_reduce_loss_on_tiny_set() {
        let mut passes = 0;
        for seed in 0..5 {
            let d = data(4, 100 + seed);
            let mut t = trainer(seed, 2);
            let before = dataset_loss(&t.model, &d, &t.loss, 4).unwrap().total;
            t.train_epoch(&d).unwrap();
            t.train_epoch(&d).unwrap();
            let after = dataset_loss(&t.model, &d, &t.loss, 4).unwrap().total;
            passes += usize::from(after < before);
        }
        assert!(passes >= 4, "{passes}/5 seeds reduced the loss");
    }
}
