//! Evaluation tables: per-example and mean SI-SNRi / SDRi.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Separator;
use crate::objective::{best_assignment, improvement, si_snr, Metric};
use crate::scalar::Scalar;
use crate::signals::MixtureExample;

/// Anything that maps a mixture to one waveform per source.
pub trait Estimator {
    fn estimate(&self, mixture: &[f32]) -> Result<Vec<Vec<f32>>>;
}

impl<T: Scalar> Estimator for Separator<T> {
    fn estimate(&self, mixture: &[f32]) -> Result<Vec<Vec<f32>>> {
        let input: Vec<T> = mixture.iter().map(|&v| T::lit(v as f64)).collect();
        Ok(self
            .separate(&input)?
            .into_iter()
            .map(|w| w.into_iter().map(|v| v.as_f64() as f32).collect())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    /// Mean over sources of the SI-SNR of each assigned estimate.
    pub si_snr: f64,
    pub si_snri: f64,
    pub sdri: f64,
    /// `assignment[c]` is the estimate matched to reference `c`.
    pub assignment: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub mean_si_snri: f64,
    pub mean_sdri: f64,
}

impl EvalTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("index\tsi_snr\tsi_snri\tsdri\tassignment\n");
        for r in &self.rows {
            let perm: Vec<String> = r.assignment.iter().map(|k| (k + 1).to_string()).collect();
            out.push_str(&format!(
                "{}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
                r.index,
                r.si_snr,
                r.si_snri,
                r.sdri,
                perm.join(",")
            ));
        }
        out.push_str(&format!("mean\t\t{:.4}\t{:.4}\t\n", self.mean_si_snri, self.mean_sdri));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialises")
    }
}

/// Scores one example. Estimates are matched to references by the
/// assignment maximising mean SI-SNR; SDRi uses the same assignment.
pub fn evaluate_example(index: usize, example: &MixtureExample, estimates: &[Vec<f32>]) -> Result<EvalRow> {
    let c = example.num_sources();
    if estimates.len() != c {
        return Err(Error::invalid(format!("{} estimates for {c} sources", estimates.len())));
    }
    let mix = example.mixture.samples();
    let refs: Vec<&[f32]> = example.sources.iter().map(|s| s.samples()).collect();
    let scores = refs
        .iter()
        .map(|r| estimates.iter().map(|e| si_snr(e, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let neg: Vec<Vec<f64>> = scores.iter().map(|row| row.iter().map(|v| -v).collect()).collect();
    let (_, assignment) = best_assignment(&neg)?;
    let mut row = EvalRow {
        index,
        si_snr: 0.0,
        si_snri: 0.0,
        sdri: 0.0,
        assignment,
    };
    for (ci, r) in refs.iter().enumerate() {
        let est = &estimates[row.assignment[ci]];
        row.si_snr += scores[ci][row.assignment[ci]];
        row.si_snri += improvement(Metric::SiSnr, est, r, mix)?;
        row.sdri += improvement(Metric::Sdr, est, r, mix)?;
    }
    let n = c as f64;
    row.si_snr /= n;
    row.si_snri /= n;
    row.sdri /= n;
    Ok(row)
}

pub fn evaluate(estimator: &(impl Estimator + ?Sized), examples: &[MixtureExample]) -> Result<EvalTable> {
    if examples.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let rows = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let est = estimator.estimate(ex.mixture.samples())?;
            evaluate_example(i, ex, &est)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean_si_snri = rows.iter().map(|r| r.si_snri).sum::<f64>() / n;
    let mean_sdri = rows.iter().map(|r| r.sdri).sum::<f64>() / n;
    Ok(EvalTable {
        rows,
        mean_si_snri,
        mean_sdri,
    })
}
