//! Test-set evaluation and its JSON/CSV report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    anisotropy, cumulative_score, mae, sauvegrain_sum, wilcoxon_signed_rank, AgeMap, WilcoxonResult, REGION_NAMES,
};
use crate::error::{Result, SatError};
use crate::model::{predict_scores, ForwardMode, SatModel, ScoreMode};
use crate::synth::Dataset;

/// Rounds to six significant digits. Reports store only rounded values, so
/// every output format prints the same numbers.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsEntry {
    pub theta: f64,
    /// Percent, one per region.
    pub per_region: Vec<f64>,
    /// Percent on the total score.
    pub sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleErrors {
    pub abs_errors: Vec<f64>,
    pub sum_abs_error: f64,
    pub baa_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub regions: Vec<String>,
    pub score_mode: String,
    pub per_region_mae: Vec<f64>,
    pub sum_mae: f64,
    pub baa_mae: f64,
    pub cs: Vec<CsEntry>,
    pub anisotropy: Vec<f64>,
    pub mean_anisotropy: f64,
    /// Samples whose predicted or true total fell outside the age map.
    pub age_clamped: usize,
    pub per_sample: Vec<SampleErrors>,
}

fn score_mode_name(mode: ScoreMode) -> &'static str {
    match mode {
        ScoreMode::Expected => "expected",
        ScoreMode::Argmax => "argmax",
    }
}

pub fn evaluate(
    model: &SatModel<f32>,
    data: &Dataset,
    thetas: &[f64],
    agemap: &AgeMap,
    mode: ScoreMode,
    batch_size: usize,
) -> Result<EvalReport> {
    let cfg = model.config();
    if data.is_empty() {
        return Err(SatError::Data("evaluation set is empty".into()));
    }
    if data.class_counts != cfg.class_counts || data.image_size != cfg.image_size {
        return Err(SatError::Config(format!(
            "dataset (K {:?}, size {}) does not match the model (K {:?}, size {})",
            data.class_counts, data.image_size, cfg.class_counts, cfg.image_size
        )));
    }
    if let Some(t) = thetas.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(SatError::Config(format!("invalid CS threshold {t}")));
    }
    let max_sum = sauvegrain_sum(&cfg.class_counts.iter().map(|&k| k as f64).collect::<Vec<_>>())?;
    agemap.check_covers(0.0, max_sum)?;
    let regions = cfg.num_regions;

    let mut preds: Vec<Vec<u32>> = Vec::with_capacity(data.len());
    let mut records = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (tape, _, out) = model.run(&data.batch_images(chunk), ForwardMode::Eval)?;
        let logits: Vec<_> = out.logits.iter().map(|&v| tape.value(v)).collect();
        preds.extend(predict_scores(&logits, mode));
        for s in 0..chunk.len() {
            records.extend(out.records(&tape, s));
        }
    }
    let aniso = anisotropy(&records, regions)?;

    let truth: Vec<Vec<f64>> = data.samples.iter().map(|s| s.labels.iter().map(|&y| y as f64).collect()).collect();
    let pred: Vec<Vec<f64>> = preds.iter().map(|p| p.iter().map(|&y| y as f64).collect()).collect();
    let column = |rows: &[Vec<f64>], r: usize| rows.iter().map(|v| v[r]).collect::<Vec<_>>();
    let sum_pred = pred.iter().map(|p| sauvegrain_sum(p)).collect::<Result<Vec<_>>>()?;
    let sum_true = truth.iter().map(|t| sauvegrain_sum(t)).collect::<Result<Vec<_>>>()?;
    let mut age_clamped = 0;
    let mut age_pred = Vec::with_capacity(data.len());
    let mut age_true = Vec::with_capacity(data.len());
    for (&sp, &st) in sum_pred.iter().zip(&sum_true) {
        let (ap, at) = (agemap.score_to_age(sp), agemap.score_to_age(st));
        age_clamped += usize::from(ap.clamped || at.clamped);
        age_pred.push(ap.age);
        age_true.push(at.age);
    }

    let per_region_mae =
        (0..regions).map(|r| mae(&column(&pred, r), &column(&truth, r)).map(round_sig)).collect::<Result<Vec<_>>>()?;
    let cs = thetas
        .iter()
        .map(|&theta| {
            Ok(CsEntry {
                theta,
                per_region: (0..regions)
                    .map(|r| cumulative_score(&column(&pred, r), &column(&truth, r), theta).map(round_sig))
                    .collect::<Result<_>>()?,
                sum: round_sig(cumulative_score(&sum_pred, &sum_true, theta)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let per_sample = (0..data.len())
        .map(|i| SampleErrors {
            abs_errors: (0..regions).map(|r| round_sig((pred[i][r] - truth[i][r]).abs())).collect(),
            sum_abs_error: round_sig((sum_pred[i] - sum_true[i]).abs()),
            baa_abs_error: round_sig((age_pred[i] - age_true[i]).abs()),
        })
        .collect();
    let mean_anisotropy = round_sig(aniso.iter().sum::<f64>() / regions as f64);
    Ok(EvalReport {
        num_samples: data.len(),
        regions: REGION_NAMES.iter().map(|s| s.to_string()).collect(),
        score_mode: score_mode_name(mode).into(),
        per_region_mae,
        sum_mae: round_sig(mae(&sum_pred, &sum_true)?),
        baa_mae: round_sig(mae(&age_pred, &age_true)?),
        cs,
        anisotropy: aniso.into_iter().map(round_sig).collect(),
        mean_anisotropy,
        age_clamped,
        per_sample,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One row per region, then `sum`, `baa` and `mean` summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("region,mae");
        for e in &self.cs {
            let _ = write!(out, ",cs_{}", e.theta);
        }
        out.push_str(",anisotropy\n");
        let blanks = ",".repeat(self.cs.len());
        for (r, name) in self.regions.iter().enumerate() {
            let _ = write!(out, "{name},{}", self.per_region_mae[r]);
            for e in &self.cs {
                let _ = write!(out, ",{}", e.per_region[r]);
            }
            let _ = writeln!(out, ",{}", self.anisotropy[r]);
        }
        let _ = write!(out, "sum,{}", self.sum_mae);
        for e in &self.cs {
            let _ = write!(out, ",{}", e.sum);
        }
        out.push_str(",\n");
        let _ = writeln!(out, "baa,{}{blanks},", self.baa_mae);
        let _ = writeln!(out, "mean,{blanks},{}", self.mean_anisotropy);
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| SatError::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, self.to_json()?).map_err(|e| SatError::io(&json, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| SatError::io(&csv, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SatError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| SatError::format(path, e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Paired test on per-sample age errors, first report minus second.
    pub wilcoxon: WilcoxonResult,
    pub regions: Vec<String>,
    /// First report's MAE minus the second's, canonical region order.
    pub region_mae_delta: Vec<f64>,
    pub sum_mae_delta: f64,
    pub baa_mae_delta: f64,
}

pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<Comparison> {
    if a.num_samples != b.num_samples || a.per_sample.len() != b.per_sample.len() {
        return Err(SatError::Data(format!("reports cover {} and {} samples", a.num_samples, b.num_samples)));
    }
    if a.regions != b.regions {
        return Err(SatError::Data("reports use different region sets".into()));
    }
    let ea: Vec<f64> = a.per_sample.iter().map(|s| s.baa_abs_error).collect();
    let eb: Vec<f64> = b.per_sample.iter().map(|s| s.baa_abs_error).collect();
    Ok(Comparison {
        wilcoxon: wilcoxon_signed_rank(&ea, &eb)?,
        regions: a.regions.clone(),
        region_mae_delta: a.per_region_mae.iter().zip(&b.per_region_mae).map(|(x, y)| round_sig(x - y)).collect(),
        sum_mae_delta: round_sig(a.sum_mae - b.sum_mae),
        baa_mae_delta: round_sig(a.baa_mae - b.baa_mae),
    })
}
