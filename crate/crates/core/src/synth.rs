//! Synthetic trajectories from a chain-of-subgoals success model.
//!
//! Every step `t` has a reliability `p_t`; a run succeeds only if every
//! subgoal does, independently, so `P(success) = prod_t p_t`. Token
//! confidences at step `t` are
//!
//! ```text
//! clamp(leak * p_t + (1 - leak) * u_t + noise * z, (0, 1])
//! ```
//!
//! with `u_t ~ U(0,1)` a per-step baseline and `z` standard normal, so the
//! trace carries recoverable but imperfect signal about the `p_t`. Record `i`
//! draws from its own ChaCha stream (`seed`, stream `i`), which makes the
//! output independent of how generation is parallelized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::trace::{Step, TokenConfidence, Trajectory, DEFAULT_K};
use crate::{fmt_real, Error, Result};

const CONF_FLOOR: f64 = 1e-4;
const ALT_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ReliabilityLaw {
    Constant { p: f64 },
    Uniform { lo: f64, hi: f64 },
    /// `lo + (hi - lo) * Beta(a, b)`
    Beta { a: f64, b: f64, lo: f64, hi: f64 },
}

impl ReliabilityLaw {
    fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        let ok = match *self {
            ReliabilityLaw::Constant { p } => unit(p),
            ReliabilityLaw::Uniform { lo, hi } | ReliabilityLaw::Beta { lo, hi, .. } => {
                unit(lo) && unit(hi) && lo <= hi
            }
        };
        let shape_ok = match *self {
            ReliabilityLaw::Beta { a, b, .. } => a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite(),
            _ => true,
        };
        if ok && shape_ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid reliability law {self:?}")))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let p = match *self {
            ReliabilityLaw::Constant { p } => p,
            ReliabilityLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            ReliabilityLaw::Beta { a, b, lo, hi } => {
                let x: f64 = Beta::new(a, b).expect("validated shape").sample(rng);
                lo + (hi - lo) * x
            }
        };
        p.clamp(f64::MIN_POSITIVE, 1.0)
    }
}

/// Placement of the final step's reliability relative to the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LastStep {
    /// As drawn.
    #[default]
    Free,
    /// Final step is the most reliable one (last-step confidence is most optimistic).
    Highest,
    /// Final step is the least reliable one.
    Lowest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_trajectories: usize,
    pub steps_range: [usize; 2],
    pub tokens_range: [usize; 2],
    pub reliability: ReliabilityLaw,
    pub noise: f64,
    pub leak: f64,
    pub seed: u64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub last_step: LastStep,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_prefix() -> String {
    "syn".into()
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 1000,
            steps_range: [2, 10],
            tokens_range: [20, 80],
            reliability: ReliabilityLaw::Uniform { lo: 0.7, hi: 1.0 },
            noise: 0.05,
            leak: 0.8,
            seed: 42,
            k: DEFAULT_K,
            last_step: LastStep::Free,
            id_prefix: default_prefix(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let [s0, s1] = self.steps_range;
        let [n0, n1] = self.tokens_range;
        if s0 == 0 || s0 > s1 {
            return Err(Error::invalid(format!("invalid steps_range [{s0}, {s1}]")));
        }
        if n0 == 0 || n0 > n1 {
            return Err(Error::invalid(format!("invalid tokens_range [{n0}, {n1}]")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.leak) {
            return Err(Error::invalid("leak must lie in [0, 1]"));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        self.reliability.validate()
    }

    pub fn from_toml(text: &str) -> Result<GenConfig> {
        let cfg: GenConfig = toml::from_str(text).map_err(|e| Error::invalid(format!("generator config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecord {
    pub trajectory: Trajectory,
    pub true_success_prob: f64,
    pub step_reliabilities: Vec<f64>,
}

/// `prod_t p_t`, the Bayes-optimal success probability of a record.
pub fn bayes_optimal_confidence(r: &SyntheticRecord) -> f64 {
    r.step_reliabilities.iter().product()
}

fn alternatives(top1: f64, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut topk = vec![top1];
    let mut mass = top1;
    while topk.len() < k {
        let prev = *topk.last().expect("non-empty");
        let alt = ((1.0 - mass) * rng.random::<f64>()).min(prev);
        if alt < ALT_FLOOR {
            break;
        }
        mass += alt;
        topk.push(alt);
    }
    topk
}

fn generate_one(cfg: &GenConfig, index: usize) -> SyntheticRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let n_steps = rng.random_range(cfg.steps_range[0]..=cfg.steps_range[1]);
    let mut p: Vec<f64> = (0..n_steps).map(|_| cfg.reliability.sample(&mut rng)).collect();
    let last = n_steps - 1;
    let pick = match cfg.last_step {
        LastStep::Free => None,
        LastStep::Highest => (0..n_steps).max_by(|&a, &b| p[a].total_cmp(&p[b])),
        LastStep::Lowest => (0..n_steps).min_by(|&a, &b| p[a].total_cmp(&p[b])),
    };
    if let Some(i) = pick {
        p.swap(i, last);
    }

    let steps = p
        .iter()
        .map(|&pt| {
            let baseline: f64 = rng.random();
            let n_tokens = rng.random_range(cfg.tokens_range[0]..=cfg.tokens_range[1]);
            let tokens = (0..n_tokens)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let c = (cfg.leak * pt + (1.0 - cfg.leak) * baseline + cfg.noise * z).clamp(CONF_FLOOR, 1.0);
                    TokenConfidence::new(c, alternatives(c, cfg.k, &mut rng))
                })
                .collect();
            Step::new(tokens)
        })
        .collect();

    let success: f64 = p.iter().product();
    let label = u8::from(rng.random::<f64>() < success);
    SyntheticRecord {
        trajectory: Trajectory::new(format!("{}-{index:06}", cfg.id_prefix), steps, Some(label)),
        true_success_prob: success,
        step_reliabilities: p,
    }
}

pub fn generate(cfg: &GenConfig) -> Result<Vec<SyntheticRecord>> {
    cfg.validate()?;
    Ok((0..cfg.n_trajectories)
        .into_par_iter()
        .map(|i| generate_one(cfg, i))
        .collect())
}

/// Oracle sidecar: `id,true_success_prob,step_reliabilities` with the
/// reliabilities joined by `;`.
pub fn sidecar_csv(records: &[SyntheticRecord]) -> String {
    let mut out = String::from("id,true_success_prob,step_reliabilities\n");
    for r in records {
        let ps: Vec<String> = r.step_reliabilities.iter().map(|&p| fmt_real(p)).collect();
        out.push_str(&format!(
            "{},{},{}\n",
            r.trajectory.id,
            fmt_real(r.true_success_prob),
            ps.join(";")
        ));
    }
    out
}

pub fn trajectories(records: &[SyntheticRecord]) -> Vec<Trajectory> {
    records.iter().map(|r| r.trajectory.clone()).collect()
}
