//! Per-step summaries and the 48-feature trajectory map.
//!
//! For step `t` with top-1 token confidences `r_1..r_n`:
//!
//! - `pi_i = r_i / (sum r + eps)`, entropy `H = -sum pi_i ln(pi_i + eps)`
//! - concentration `kappa = max r / (mu + eps)`
//! - spread `rho = sigma / (mu + eps)` with population `sigma`
//! - skewness `mean(((r - mu) / (sigma + eps))^3)`, zero for `n < 2`
//! - `x_t` = mean top-1 confidence, `y_t` = mean over tokens of the token's
//!   top-k mean
//!
//! The trajectory vector is laid out in four contiguous blocks: Dynamics
//! (0..19), Position (19..33), Stability (33..43) and Structure (43..48).
//! Statistics that are undefined for a single step or a single token are 0.
//!
//! Four pairs of features are identical by definition and are kept that way:
//! `first_confidence_volatility == first_attention_spread`,
//! `last_confidence_volatility == last_attention_spread`,
//! `token_volatility_mean == attention_spread_mean` and
//! `token_volatility_std == attention_spread_std`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;

use crate::trace::{ensure_valid, Step, Trajectory};
use crate::{Error, Result};

pub const FEATURE_COUNT: usize = 48;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    // Dynamics: cross-step gradients
    "top1_gradient_mean",
    "top1_gradient_std",
    "top1_gradient_max",
    "top1_gradient_min",
    "top1_gradient_trend",
    "topk_gradient_mean",
    "topk_gradient_std",
    "topk_gradient_max",
    "topk_gradient_min",
    "topk_gradient_trend",
    // Dynamics: token-level gradients
    "token_gradient_mean",
    "token_gradient_std",
    "token_gradient_max",
    "token_gradient_min",
    // Dynamics: step progression
    "step_progression_entropy",
    "step_progression_concentration",
    "step_progression_spread",
    // Dynamics: confidence change
    "top1_confidence_change",
    "topk_confidence_change",
    // Position: first step
    "first_attention_entropy",
    "first_attention_concentration",
    "first_attention_spread",
    "first_confidence_volatility",
    "first_confidence_skewness",
    "first_top1_avg",
    "first_topk_avg",
    // Position: last step
    "last_attention_entropy",
    "last_attention_concentration",
    "last_attention_spread",
    "last_confidence_volatility",
    "last_confidence_skewness",
    "last_top1_avg",
    "last_topk_avg",
    // Stability: attention
    "attention_entropy_mean",
    "attention_entropy_std",
    "attention_concentration_mean",
    "attention_concentration_std",
    "attention_spread_mean",
    "attention_spread_std",
    // Stability: token level
    "token_volatility_mean",
    "token_volatility_std",
    "token_skewness_mean",
    "token_skewness_std",
    // Structure
    "normalized_step_count",
    "first_token_count",
    "last_token_count",
    "avg_tokens_per_step",
    "std_tokens_per_step",
];

/// Index of a feature name in [`FEATURE_NAMES`].
pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|&n| n == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureCategory {
    Dynamics,
    Position,
    Stability,
    Structure,
}

impl FeatureCategory {
    pub const ALL: [FeatureCategory; 4] = [
        FeatureCategory::Dynamics,
        FeatureCategory::Position,
        FeatureCategory::Stability,
        FeatureCategory::Structure,
    ];

    pub fn range(self) -> Range<usize> {
        match self {
            FeatureCategory::Dynamics => 0..19,
            FeatureCategory::Position => 19..33,
            FeatureCategory::Stability => 33..43,
            FeatureCategory::Structure => 43..48,
        }
    }

    pub fn len(self) -> usize {
        self.range().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureCategory::Dynamics => "dynamics",
            FeatureCategory::Position => "position",
            FeatureCategory::Stability => "stability",
            FeatureCategory::Structure => "structure",
        }
    }

    pub fn of_index(index: usize) -> Option<FeatureCategory> {
        Self::ALL.into_iter().find(|c| c.range().contains(&index))
    }
}

impl fmt::Display for FeatureCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown feature category `{s}`")))
    }
}

/// Distribution summary of one step's token confidences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSummary {
    pub n_tokens: usize,
    pub mean: f64,
    pub std: f64,
    pub entropy: f64,
    pub concentration: f64,
    pub spread: f64,
    pub skew: f64,
    /// Mean top-1 confidence.
    pub top1_avg: f64,
    /// Mean over tokens of each token's top-k average.
    pub topk_avg: f64,
}

pub fn step_summary(step: &Step, epsilon: f64) -> Result<StepSummary> {
    let n = step.len();
    if n == 0 {
        return Err(Error::EmptyStep);
    }
    let nf = n as f64;
    let sum: f64 = step.top1().sum();
    let mean = sum / nf;
    let std = (step.top1().map(|r| (r - mean).powi(2)).sum::<f64>() / nf).sqrt();
    let max = step.top1().fold(f64::NEG_INFINITY, f64::max);

    let norm = sum + epsilon;
    let entropy = -step
        .top1()
        .map(|r| {
            let p = r / norm;
            p * (p + epsilon).ln()
        })
        .sum::<f64>();

    let skew = if n < 2 {
        0.0
    } else {
        let denom = std + epsilon;
        step.top1().map(|r| ((r - mean) / denom).powi(3)).sum::<f64>() / nf
    };

    let topk_avg = step.tokens.iter().map(|t| t.topk_mean()).sum::<f64>() / nf;

    Ok(StepSummary {
        n_tokens: n,
        mean,
        std,
        entropy,
        concentration: max / (mean + epsilon),
        spread: std / (mean + epsilon),
        skew,
        top1_avg: mean,
        topk_avg,
    })
}

/// The 48 trajectory diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub values: [f64; FEATURE_COUNT],
}

impl FeatureVector {
    pub fn names() -> &'static [&'static str; FEATURE_COUNT] {
        &FEATURE_NAMES
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        feature_index(name).map(|i| self.values[i])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Values of the selected categories, in index order.
    pub fn select(&self, cats: &CategorySet) -> Vec<f64> {
        cats.indices().map(|i| self.values[i]).collect()
    }
}

/// Non-empty set of feature categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CategorySet([bool; 4]);

impl CategorySet {
    pub fn all() -> Self {
        CategorySet([true; 4])
    }

    pub fn new(cats: impl IntoIterator<Item = FeatureCategory>) -> Result<Self> {
        let mut flags = [false; 4];
        for c in cats {
            flags[c as usize] = true;
        }
        if !flags.iter().any(|&f| f) {
            return Err(Error::invalid("empty feature category set"));
        }
        Ok(CategorySet(flags))
    }

    /// Parses a comma-separated list such as `dynamics,structure`.
    pub fn parse(list: &str) -> Result<Self> {
        let cats = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<FeatureCategory>>>()?;
        Self::new(cats)
    }

    pub fn contains(&self, c: FeatureCategory) -> bool {
        self.0[c as usize]
    }

    pub fn is_all(&self) -> bool {
        self.0.iter().all(|&f| f)
    }

    pub fn categories(&self) -> impl Iterator<Item = FeatureCategory> + '_ {
        FeatureCategory::ALL.into_iter().filter(|&c| self.contains(c))
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.categories().flat_map(FeatureCategory::range)
    }

    pub fn len(&self) -> usize {
        self.categories().map(FeatureCategory::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.indices().map(|i| FEATURE_NAMES[i]).collect()
    }
}

impl fmt::Display for CategorySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.categories().map(FeatureCategory::name).collect();
        f.write_str(&names.join(","))
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn pop_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// mean, std, max, min; all zero for an empty set.
fn moments(xs: &[f64]) -> [f64; 4] {
    if xs.is_empty() {
        return [0.0; 4];
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    [mean(xs), pop_std(xs), max, min]
}

fn diffs(xs: &[f64]) -> Vec<f64> {
    xs.windows(2).map(|w| w[1] - w[0]).collect()
}

fn trend(deltas: &[f64]) -> f64 {
    // needs at least three steps, i.e. two deltas
    if deltas.len() >= 2 {
        deltas[deltas.len() - 1] - deltas[0]
    } else {
        0.0
    }
}

fn coeff_of_variation(xs: &[f64], epsilon: f64) -> f64 {
    if xs.len() < 2 {
        0.0
    } else {
        pop_std(xs) / (mean(xs) + epsilon)
    }
}

pub fn extract_features(t: &Trajectory, epsilon: f64) -> Result<FeatureVector> {
    ensure_valid(t)?;
    let summaries = t
        .steps
        .iter()
        .map(|s| step_summary(s, epsilon))
        .collect::<Result<Vec<_>>>()?;
    Ok(features_from_summaries(t, &summaries, epsilon))
}

fn features_from_summaries(t: &Trajectory, summaries: &[StepSummary], epsilon: f64) -> FeatureVector {
    let s_count = summaries.len();
    let pick = |f: fn(&StepSummary) -> f64| summaries.iter().map(f).collect::<Vec<f64>>();
    let xs = pick(|s| s.top1_avg);
    let ys = pick(|s| s.topk_avg);
    let hs = pick(|s| s.entropy);
    let ks = pick(|s| s.concentration);
    let rhos = pick(|s| s.spread);
    let skews = pick(|s| s.skew);
    let counts = pick(|s| s.n_tokens as f64);

    let dx = diffs(&xs);
    let dy = diffs(&ys);
    let token_deltas: Vec<f64> = t
        .steps
        .iter()
        .flat_map(|s| s.tokens.windows(2).map(|w| w[1].top1 - w[0].top1))
        .collect();

    let first = &summaries[0];
    let last = &summaries[s_count - 1];

    let mut v = [0.0; FEATURE_COUNT];
    let mut i = 0;
    let mut push = |x: f64| {
        v[i] = x;
        i += 1;
    };

    // Dynamics
    for m in moments(&dx) {
        push(m);
    }
    push(trend(&dx));
    for m in moments(&dy) {
        push(m);
    }
    push(trend(&dy));
    for m in moments(&token_deltas) {
        push(m);
    }
    push(coeff_of_variation(&hs, epsilon));
    push(coeff_of_variation(&ks, epsilon));
    push(coeff_of_variation(&rhos, epsilon));
    push(last.top1_avg - first.top1_avg);
    push(last.topk_avg - first.topk_avg);

    // Position
    for s in [first, last] {
        push(s.entropy);
        push(s.concentration);
        push(s.spread);
        push(s.spread);
        push(s.skew);
        push(s.top1_avg);
        push(s.topk_avg);
    }

    // Stability
    push(mean(&hs));
    push(pop_std(&hs));
    push(mean(&ks));
    push(pop_std(&ks));
    push(mean(&rhos));
    push(pop_std(&rhos));
    push(mean(&rhos));
    push(pop_std(&rhos));
    push(mean(&skews));
    push(pop_std(&skews));

    // Structure
    push(s_count as f64 / 10.0);
    push(first.n_tokens as f64);
    push(last.n_tokens as f64);
    push(mean(&counts));
    push(pop_std(&counts));

    debug_assert_eq!(i, FEATURE_COUNT);
    FeatureVector { values: v }
}

/// Features of the selected categories together with their names.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSubset {
    pub names: Vec<&'static str>,
    pub values: Vec<f64>,
}

pub fn extract_category(t: &Trajectory, cats: &CategorySet, epsilon: f64) -> Result<FeatureSubset> {
    let full = extract_features(t, epsilon)?;
    Ok(FeatureSubset {
        names: cats.names(),
        values: full.select(cats),
    })
}

/// Features computed on the first `m` steps only.
pub fn prefix_features(t: &Trajectory, m: usize, epsilon: f64) -> Result<FeatureVector> {
    if m == 0 || m > t.num_steps() {
        return Err(Error::invalid(format!(
            "prefix length {m} outside 1..={}",
            t.num_steps()
        )));
    }
    extract_features(&t.prefix(m), epsilon)
}

/// Extracts features for a batch in parallel; output order matches input order.
pub fn extract_batch(ts: &[Trajectory], epsilon: f64) -> Result<Vec<FeatureVector>> {
    ts.par_iter().map(|t| extract_features(t, epsilon)).collect()
}
