//! End-to-end training run with on-disk artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Result, SatError};
use crate::eval::REGION_NAMES;
use crate::model::SatModel;
use crate::synth::Dataset;
use crate::train::{EpochStats, Trainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CKPT_LAST: &str = "ckpt_last.bin";
pub const CKPT_BEST: &str = "ckpt_best.bin";
pub const CKPT_FINAL: &str = "ckpt_final.bin";

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub best_metric: Option<f64>,
    /// All configured epochs ran.
    pub finished: bool,
}

fn region_label(r: usize) -> String {
    REGION_NAMES.get(r).map_or_else(|| format!("region{r}"), |s| s.to_string())
}

/// Header plus one row per epoch.
pub fn metrics_csv(history: &[EpochStats], regions: usize) -> String {
    let mut out = String::from("epoch,lr,loss_total,loss_ce,loss_mean,loss_variance");
    for r in 0..regions {
        let _ = write!(out, ",train_mae_{}", region_label(r));
    }
    out.push('\n');
    for s in history {
        let _ = write!(out, "{},{},{},{},{},{}", s.epoch, s.lr, s.loss.total, s.loss.ce, s.loss.mean, s.loss.variance);
        for m in &s.train_mae {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| SatError::io(path, e))
}

/// Runs (or resumes) training until the configured epoch count, or until
/// `stop_after` epochs have completed in total. Every epoch rewrites the
/// metrics file and the last checkpoint; the best checkpoint tracks the
/// lowest mean training loss.
pub fn train_run(
    cfg: &RunConfig,
    data: &Dataset,
    out_dir: &Path,
    resume: Option<Checkpoint>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut trainer, mut best) = match resume {
        Some(ck) => {
            if !same_run(&ck.config, cfg) {
                return Err(SatError::Config("checkpoint was written under a different configuration".into()));
            }
            let best = ck.best_metric;
            (ck.into_trainer()?, best)
        }
        None => {
            let model = SatModel::new(cfg.resolved_model(), cfg.init_seed())?;
            (Trainer::new(model, cfg.optim.clone(), cfg.loss, cfg.augment.clone(), cfg.train_seed())?, None)
        }
    };
    trainer.check_dataset(data)?;
    fs::create_dir_all(out_dir).map_err(|e| SatError::io(out_dir, e))?;
    let regions = trainer.model.config().num_regions;
    let limit = stop_after.unwrap_or(usize::MAX);

    while !trainer.is_done() && trainer.epoch < limit {
        let stats = trainer.train_epoch(data)?;
        let improved = best.is_none_or(|b| stats.loss.total < b);
        if improved {
            best = Some(stats.loss.total);
        }
        let bytes = Checkpoint::from_trainer(cfg, &trainer, best).to_bytes()?;
        write_file(&out_dir.join(CKPT_LAST), &bytes)?;
        if improved {
            write_file(&out_dir.join(CKPT_BEST), &bytes)?;
        }
        write_file(&out_dir.join(METRICS_FILE), metrics_csv(&trainer.history, regions).as_bytes())?;
    }
    let finished = trainer.is_done();
    if finished {
        Checkpoint::from_trainer(cfg, &trainer, best).save(&out_dir.join(CKPT_FINAL))?;
    }
    Ok(TrainOutcome { trainer, best_metric: best, finished })
}

/// Equal up to where artifacts are written.
fn same_run(a: &RunConfig, b: &RunConfig) -> bool {
    RunConfig { output_dir: b.output_dir.clone(), ..a.clone() } == *b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::LossBreakdown;

    #[test]
    fn metrics_rows_match_epochs() {
        let row = |e| EpochStats { epoch: e, loss: LossBreakdown::default(), train_mae: vec![0.5; 5], lr: 0.01 };
        let csv = metrics_csv(&[row(1), row(2), row(3)], 5);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("epoch,lr,loss_total"));
        assert!(lines[0].ends_with("train_mae_proximal_lateral"));
        assert_eq!(lines[3], "3,0.01,0,0,0,0,0.5,0.5,0.5,0.5,0.5");
    }
}
