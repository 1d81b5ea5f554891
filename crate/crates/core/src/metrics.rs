//! Calibration and discrimination metrics over a set of binary predictions.
//!
//! ECE uses `M` equal-width bins `[0, 1/M), [1/M, 2/M), ..., [1 - 1/M, 1]`:
//! every bin is right-open except the last, which also holds `c = 1`.
//! AUROC is the Mann-Whitney statistic with average ranks, so tied scores
//! contribute half credit.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

/// Confidences paired with binary outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    confidences: Vec<f64>,
    labels: Vec<bool>,
}

impl PredictionSet {
    pub fn new(confidences: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if confidences.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: confidences.len(),
            });
        }
        if confidences.is_empty() {
            return Err(Error::invalid("prediction set is empty"));
        }
        if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
        }
        Ok(Self {
            confidences,
            labels,
        })
    }

    /// Convenience constructor taking 0/1 labels.
    pub fn from_u8(confidences: Vec<f64>, labels: &[u8]) -> Result<Self> {
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid(format!("label {l} is not 0 or 1")));
        }
        Self::new(confidences, labels.iter().map(|&l| l == 1).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence of the members, 0 when empty.
    pub mean_confidence: f64,
    /// Fraction of positive labels among the members, 0 when empty.
    pub accuracy: f64,
}

/// Equal-width reliability table, the data behind a reliability diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub n: usize,
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    /// Bin-weighted mean absolute gap between accuracy and confidence.
    pub fn ece(&self) -> f64 {
        let n = self.n as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n * (b.accuracy - b.mean_confidence).abs())
            .sum()
    }

    /// Delimited text with one row per bin, for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lower,upper,count,mean_confidence,accuracy\n");
        for (i, b) in self.bins.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{},{}\n",
                crate::fmt_real(b.lower),
                crate::fmt_real(b.upper),
                b.count,
                crate::fmt_real(b.mean_confidence),
                crate::fmt_real(b.accuracy)
            ));
        }
        out
    }
}

/// Index of the bin holding `c` among `m` equal-width bins.
pub fn bin_index(c: f64, m: usize) -> usize {
    let edge = |j: usize| j as f64 / m as f64;
    let mut idx = ((c * m as f64).floor().max(0.0) as usize).min(m - 1);
    // floor(c * m) can be off by one next to an edge; settle against the edges themselves
    while idx + 1 < m && c >= edge(idx + 1) {
        idx += 1;
    }
    while idx > 0 && c < edge(idx) {
        idx -= 1;
    }
    idx
}

pub fn reliability_bins(p: &PredictionSet, m: usize) -> Result<ReliabilityBins> {
    if m == 0 {
        return Err(Error::invalid("bin count must be positive"));
    }
    let mut counts = vec![0usize; m];
    let mut conf_sum = vec![0.0; m];
    let mut pos = vec![0usize; m];
    for (&c, &y) in p.confidences.iter().zip(&p.labels) {
        let b = bin_index(c, m);
        counts[b] += 1;
        conf_sum[b] += c;
        pos[b] += usize::from(y);
    }
    let bins = (0..m)
        .map(|b| {
            let (mean_confidence, accuracy) = if counts[b] == 0 {
                (0.0, 0.0)
            } else {
                (
                    conf_sum[b] / counts[b] as f64,
                    pos[b] as f64 / counts[b] as f64,
                )
            };
            Bin {
                lower: b as f64 / m as f64,
                upper: (b + 1) as f64 / m as f64,
                count: counts[b],
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(ReliabilityBins { n: p.len(), bins })
}

pub fn ece(p: &PredictionSet, m: usize) -> Result<f64> {
    reliability_bins(p, m).map(|b| b.ece())
}

pub fn brier(p: &PredictionSet) -> f64 {
    p.confidences
        .iter()
        .zip(&p.labels)
        .map(|(&c, &y)| (c - f64::from(u8::from(y))).powi(2))
        .sum::<f64>()
        / p.len() as f64
}

/// Probability that a random positive outranks a random negative, ties half.
pub fn auroc(p: &PredictionSet) -> Result<f64> {
    let n_pos = p.labels.iter().filter(|&&y| y).count();
    let n_neg = p.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AurocUndefined);
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p.confidences[a].total_cmp(&p.confidences[b]));

    // sum of average ranks (1-based) over positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && p.confidences[order[j + 1]] == p.confidences[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| p.labels[k]).count();
        rank_sum += avg_rank * tied_pos as f64;
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    let u = rank_sum - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(u / (n_pos_f * n_neg as f64))
}

/// All three metrics plus the reliability table for one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub bins_count: usize,
    pub ece: f64,
    pub brier: f64,
    pub auroc: f64,
    pub bins: Vec<Bin>,
}

impl EvalReport {
    pub fn reliability(&self) -> ReliabilityBins {
        ReliabilityBins {
            n: self.n,
            bins: self.bins.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn evaluate(p: &PredictionSet, m: usize) -> Result<EvalReport> {
    let bins = reliability_bins(p, m)?;
    Ok(EvalReport {
        n: p.len(),
        bins_count: m,
        ece: bins.ece(),
        brier: brier(p),
        auroc: auroc(p)?,
        bins: bins.bins,
    })
}
