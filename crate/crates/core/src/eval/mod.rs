//! Evaluation: aggregation, metrics, paired testing, attention anisotropy.

mod report;
mod scoring;
mod wilcoxon;

pub use report::{compare_reports, evaluate, round_sig, Comparison, CsEntry, EvalReport, SampleErrors};
pub use scoring::{cumulative_score, mae, sauvegrain_sum, AgeMap, AgeValue, REGION_NAMES};
pub use wilcoxon::{wilcoxon_signed_rank, WilcoxonResult, EXACT_LIMIT};

use crate::error::{Result, SatError};
use crate::model::AttentionRecord;

/// Post-softmax attention mass from CLS row `r` to its own regional column
/// `R + r`, averaged over every record (layers, heads, samples).
pub fn anisotropy(records: &[AttentionRecord], regions: usize) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(SatError::Data("no attention records".into()));
    }
    let n = 2 * regions;
    let mut acc = vec![0.0; regions];
    for rec in records {
        if rec.post_softmax.shape() != [n, n] {
            return Err(SatError::Dimension(format!(
                "attention record is {:?}, expected [{n}, {n}]",
                rec.post_softmax.shape()
            )));
        }
        let data = rec.post_softmax.data();
        for (r, a) in acc.iter_mut().enumerate() {
            *a += data[r * n + regions + r];
        }
    }
    Ok(acc.into_iter().map(|a| a / records.len() as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn record(layer: usize, data: Vec<f64>, n: usize) -> AttentionRecord {
        let t = Tensor::new(vec![n, n], data).unwrap();
        AttentionRecord { layer, head: 0, pre_softmax: t.clone(), post_softmax: t }
    }

    #[test]
    fn uniform_attention_gives_one_over_2r() {
        let r = 3;
        let n = 2 * r;
        let a = anisotropy(&[record(0, vec![1.0 / n as f64; n * n], n)], r).unwrap();
        assert!(a.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn self_focused_attention_gives_one() {
        let r = 2;
        let n = 4;
        let mut d = vec![0.0; 16];
        for i in 0..r {
            d[i * n + r + i] = 1.0;
        }
        for i in r..n {
            d[i * n + i] = 1.0;
        }
        assert_eq!(anisotropy(&[record(0, d, n)], r).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn two_layers_average() {
        let r = 1;
        // rows: [cls→cls, cls→own]
        let l0 = vec![0.8, 0.2, 0.5, 0.5];
        let l1 = vec![0.4, 0.6, 0.5, 0.5];
        let a = anisotropy(&[record(0, l0, 2), record(1, l1, 2)], r).unwrap();
        assert!((a[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn empty_records_are_a_data_error() {
        assert!(matches!(anisotropy(&[], 5), Err(SatError::Data(_))));
    }
}
