//! Inference-only confidence baselines.
//!
//! - last-step: mean top-1 confidence of the final step's tokens
//! - global-trace: token-weighted mean top-1 confidence over the whole trace
//! - temperature scaling: `sigmoid(logit(c) / T)` with `T` fit by log-loss
//! - verbalized: the model's own `Confidence: NN%` statement

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::calibrator::{logit, sigmoid};
use crate::trace::Trajectory;
use crate::{fmt_real, Error, Result};

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;
pub const GRID_POINTS: usize = 200;
const CLAMP: f64 = 1e-6;
const GOLDEN_TOL: f64 = 1e-4;

pub fn last_step_confidence(t: &Trajectory) -> f64 {
    let step = t.steps.last().expect("trajectory has at least one step");
    step.top1().sum::<f64>() / step.len() as f64
}

pub fn global_trace_confidence(t: &Trajectory) -> f64 {
    let (sum, count) = t
        .steps
        .iter()
        .flat_map(|s| s.top1())
        .fold((0.0, 0usize), |(s, c), r| (s + r, c + 1));
    sum / count as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub temperature: f64,
    pub grid_points: usize,
    pub log_loss: f64,
}

impl TemperatureModel {
    pub fn identity() -> Self {
        Self {
            temperature: 1.0,
            grid_points: 0,
            log_loss: f64::NAN,
        }
    }

    pub fn apply(&self, c: f64) -> f64 {
        apply_temperature(c, self)
    }
}

fn clamp_conf(c: f64) -> f64 {
    c.clamp(CLAMP, 1.0 - CLAMP)
}

/// `sigmoid(logit(c) / T)` on the clamped confidence.
///
/// Order-preserving for `T >= 0.4`; below that the largest confidences can
/// round to exactly 1.0 and tie.
pub fn apply_temperature(c: f64, m: &TemperatureModel) -> f64 {
    sigmoid(logit(clamp_conf(c)) / m.temperature)
}

/// Mean log-loss of temperature-scaled confidences.
pub fn temperature_log_loss(logits: &[f64], labels: &[bool], t: f64) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            // -log sigmoid(s) = softplus(-s)
            let s = if y { z / t } else { -z / t };
            (-s).max(0.0) + (-s.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / logits.len() as f64
}

/// Fits `T` on a log-spaced grid over `[T_MIN, T_MAX]`, refined by
/// golden-section search around the best grid point.
pub fn fit_temperature(confidences: &[f64], labels: &[bool]) -> Result<TemperatureModel> {
    if confidences.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: confidences.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::invalid("no samples to fit a temperature"));
    }
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(Error::DegenerateLabels);
    }
    if let Some(c) = confidences.iter().find(|c| !c.is_finite()) {
        return Err(Error::invalid(format!("confidence {c} is not finite")));
    }
    let logits: Vec<f64> = confidences.iter().map(|&c| logit(clamp_conf(c))).collect();
    let loss = |t: f64| temperature_log_loss(&logits, labels, t);

    let (lo, hi) = (T_MIN.ln(), T_MAX.ln());
    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| match i {
            0 => T_MIN,
            i if i == GRID_POINTS - 1 => T_MAX,
            i => (lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64).exp(),
        })
        .collect();
    let losses: Vec<f64> = grid.iter().map(|&t| loss(t)).collect();
    let best = (0..GRID_POINTS)
        .min_by(|&a, &b| losses[a].total_cmp(&losses[b]))
        .expect("grid is non-empty");

    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(GRID_POINTS - 1)];
    let refined = golden_section(&loss, a, b, GOLDEN_TOL);

    let mut candidates = vec![(refined, loss(refined)), (grid[best], losses[best]), (1.0, loss(1.0))];
    if best == 0 {
        candidates.push((T_MIN, losses[0]));
    }
    let (temperature, log_loss) = candidates
        .into_iter()
        .fold((f64::NAN, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });

    Ok(TemperatureModel {
        temperature,
        grid_points: GRID_POINTS,
        log_loss,
    })
}

fn golden_section(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

static VERBALIZED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)confidence\s*:\s*([0-9]+(?:\.[0-9]+)?)\s*%").expect("valid regex")
});

/// Extracts the last `Confidence: NN%` statement as a probability.
pub fn parse_verbalized(text: &str) -> Option<f64> {
    let caps = VERBALIZED.captures_iter(text).last()?;
    let pct: f64 = caps[1].parse().ok()?;
    (pct <= 100.0).then_some(pct / 100.0)
}

/// One exported baseline score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineRow {
    pub id: String,
    pub method: String,
    pub raw_confidence: f64,
    pub scaled_confidence: f64,
}

/// Writes rows as `id,method,raw_confidence,scaled_confidence`.
pub fn rows_to_csv(rows: &[BaselineRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "method", "raw_confidence", "scaled_confidence"])?;
    for r in rows {
        w.write_record([
            r.id.as_str(),
            r.method.as_str(),
            &fmt_real(r.raw_confidence),
            &fmt_real(r.scaled_confidence),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
