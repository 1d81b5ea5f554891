//! Random inputs and naive reference implementations shared by the test suites.
#![allow(dead_code)]

use rand::{Rng, RngCore};
use trajcal::{Step, TokenConfidence, Trajectory};

pub const EPS: f64 = 1e-8;

/// A token whose top-k list starts with `top1` and is non-increasing.
pub fn random_token(rng: &mut impl RngCore, top1: f64) -> TokenConfidence {
    let extra = rng.random_range(0..5usize);
    let mut topk = vec![top1];
    for _ in 0..extra {
        let prev = *topk.last().unwrap();
        topk.push(prev * rng.random_range(0.0..=1.0));
    }
    TokenConfidence::new(top1, topk)
}

/// Random trajectory; some steps are constant and some have a single token.
pub fn random_trajectory(rng: &mut impl RngCore, max_steps: usize, max_tokens: usize) -> Trajectory {
    let s = rng.random_range(1..=max_steps);
    let steps = (0..s)
        .map(|_| {
            let n = match rng.random_range(0..10) {
                0 => 1,
                _ => rng.random_range(1..=max_tokens),
            };
            let constant = rng.random_range(0..8) == 0;
            let c0 = rng.random_range(1e-3..=1.0);
            let tokens = (0..n)
                .map(|_| {
                    let c = if constant { c0 } else { rng.random_range(1e-3..=1.0) };
                    random_token(rng, c)
                })
                .collect();
            Step::new(tokens)
        })
        .collect();
    let label = rng.random_range(0..3u8);
    Trajectory::new("r", steps, (label < 2).then_some(label))
}

fn avg(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    s / xs.len() as f64
}

fn sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = avg(xs);
    let mut acc = 0.0;
    for x in xs {
        acc += (x - m) * (x - m);
    }
    (acc / xs.len() as f64).sqrt()
}

fn hi(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut m = xs[0];
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    m
}

fn lo(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut m = xs[0];
    for &x in xs {
        if x < m {
            m = x;
        }
    }
    m
}

struct Summary {
    h: f64,
    kappa: f64,
    rho: f64,
    skew: f64,
    x: f64,
    y: f64,
    n: f64,
}

fn summarize(step: &Step) -> Summary {
    let r: Vec<f64> = step.tokens.iter().map(|t| t.top1).collect();
    let n = r.len();
    let mu = avg(&r);
    let sigma = {
        let mut acc = 0.0;
        for v in &r {
            acc += (v - mu) * (v - mu);
        }
        (acc / n as f64).sqrt()
    };
    let total: f64 = r.iter().sum();
    let mut h = 0.0;
    for v in &r {
        let pi = v / (total + EPS);
        h -= pi * (pi + EPS).ln();
    }
    let mut skew = 0.0;
    if n >= 2 {
        for v in &r {
            skew += ((v - mu) / (sigma + EPS)).powi(3);
        }
        skew /= n as f64;
    }
    let mut y = 0.0;
    for t in &step.tokens {
        y += t.topk.iter().sum::<f64>() / t.topk.len() as f64;
    }
    Summary {
        h,
        kappa: hi(&r) / (mu + EPS),
        rho: sigma / (mu + EPS),
        skew,
        x: mu,
        y: y / n as f64,
        n: n as f64,
    }
}

/// Straight transcription of the 48 feature definitions, keyed by name.
pub fn naive_features(t: &Trajectory) -> Vec<(&'static str, f64)> {
    let sums: Vec<Summary> = t.steps.iter().map(summarize).collect();
    let s = sums.len();
    let col = |f: &dyn Fn(&Summary) -> f64| sums.iter().map(f).collect::<Vec<f64>>();
    let xs = col(&|m| m.x);
    let ys = col(&|m| m.y);
    let hs = col(&|m| m.h);
    let ks = col(&|m| m.kappa);
    let rs = col(&|m| m.rho);
    let sk = col(&|m| m.skew);
    let ns = col(&|m| m.n);

    let mut dx = Vec::new();
    let mut dy = Vec::new();
    for i in 0..s.saturating_sub(1) {
        dx.push(xs[i + 1] - xs[i]);
        dy.push(ys[i + 1] - ys[i]);
    }
    let trend = |d: &[f64]| if s >= 3 { d[d.len() - 1] - d[0] } else { 0.0 };
    let mut tok = Vec::new();
    for step in &t.steps {
        for i in 1..step.tokens.len() {
            tok.push(step.tokens[i].top1 - step.tokens[i - 1].top1);
        }
    }
    let cv = |v: &[f64]| if s < 2 { 0.0 } else { sd(v) / (avg(v) + EPS) };
    let (f, l) = (&sums[0], &sums[s - 1]);

    vec![
        ("top1_gradient_mean", avg(&dx)),
        ("top1_gradient_std", sd(&dx)),
        ("top1_gradient_max", hi(&dx)),
        ("top1_gradient_min", lo(&dx)),
        ("top1_gradient_trend", trend(&dx)),
        ("topk_gradient_mean", avg(&dy)),
        ("topk_gradient_std", sd(&dy)),
        ("topk_gradient_max", hi(&dy)),
        ("topk_gradient_min", lo(&dy)),
        ("topk_gradient_trend", trend(&dy)),
        ("token_gradient_mean", avg(&tok)),
        ("token_gradient_std", sd(&tok)),
        ("token_gradient_max", hi(&tok)),
        ("token_gradient_min", lo(&tok)),
        ("step_progression_entropy", cv(&hs)),
        ("step_progression_concentration", cv(&ks)),
        ("step_progression_spread", cv(&rs)),
        ("top1_confidence_change", l.x - f.x),
        ("topk_confidence_change", l.y - f.y),
        ("first_attention_entropy", f.h),
        ("first_attention_concentration", f.kappa),
        ("first_attention_spread", f.rho),
        ("first_confidence_volatility", f.rho),
        ("first_confidence_skewness", f.skew),
        ("first_top1_avg", f.x),
        ("first_topk_avg", f.y),
        ("last_attention_entropy", l.h),
        ("last_attention_concentration", l.kappa),
        ("last_attention_spread", l.rho),
        ("last_confidence_volatility", l.rho),
        ("last_confidence_skewness", l.skew),
        ("last_top1_avg", l.x),
        ("last_topk_avg", l.y),
        ("attention_entropy_mean", avg(&hs)),
        ("attention_entropy_std", sd(&hs)),
        ("attention_concentration_mean", avg(&ks)),
        ("attention_concentration_std", sd(&ks)),
        ("attention_spread_mean", avg(&rs)),
        ("attention_spread_std", sd(&rs)),
        ("token_volatility_mean", avg(&rs)),
        ("token_volatility_std", sd(&rs)),
        ("token_skewness_mean", avg(&sk)),
        ("token_skewness_std", sd(&sk)),
        ("normalized_step_count", s as f64 / 10.0),
        ("first_token_count", f.n),
        ("last_token_count", l.n),
        ("avg_tokens_per_step", avg(&ns)),
        ("std_tokens_per_step", sd(&ns)),
    ]
}

/// Largest absolute difference between the library and the naive features.
pub fn feature_discrepancy(t: &Trajectory) -> (f64, &'static str) {
    let lib = trajcal::features::extract_features(t, EPS).unwrap();
    let mut worst = (0.0, "");
    for (name, v) in naive_features(t) {
        let got = lib.get(name).unwrap_or_else(|| panic!("missing feature {name}"));
        let d = (got - v).abs();
        if !(d <= worst.0) {
            worst = (d, name);
        }
    }
    worst
}

/// Random prediction set with occasional ties and values on bin edges.
pub fn random_predictions(rng: &mut impl RngCore, max_n: usize) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=max_n);
    let mut c = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let v = match rng.random_range(0..6) {
            0 => rng.random_range(0..=10) as f64 / 10.0,
            1 if i > 0 => c[rng.random_range(0..i)],
            _ => rng.random::<f64>(),
        };
        c.push(v);
        y.push(rng.random::<bool>());
    }
    y[0] = true;
    y[1] = false;
    (c, y)
}

pub fn brute_ece(c: &[f64], y: &[bool], m: usize) -> f64 {
    let n = c.len() as f64;
    let mut total = 0.0;
    for j in 0..m {
        let lower = j as f64 / m as f64;
        let upper = (j + 1) as f64 / m as f64;
        let mut count = 0.0;
        let mut conf = 0.0;
        let mut hits = 0.0;
        for (&ci, &yi) in c.iter().zip(y) {
            let inside = ci >= lower && (ci < upper || (j == m - 1 && ci <= 1.0));
            if inside {
                count += 1.0;
                conf += ci;
                hits += if yi { 1.0 } else { 0.0 };
            }
        }
        if count > 0.0 {
            total += count / n * (hits / count - conf / count).abs();
        }
    }
    total
}

pub fn brute_brier(c: &[f64], y: &[bool]) -> f64 {
    let mut s = 0.0;
    for (&ci, &yi) in c.iter().zip(y) {
        let t = if yi { 1.0 } else { 0.0 };
        s += (ci - t) * (ci - t);
    }
    s / c.len() as f64
}

/// Pairwise definition: P(score_pos > score_neg) + 0.5 P(tie).
pub fn brute_auroc(c: &[f64], y: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        if !yi {
            continue;
        }
        for (j, &yj) in y.iter().enumerate() {
            if yj {
                continue;
            }
            pairs += 1.0;
            if c[i] > c[j] {
                wins += 1.0;
            } else if c[i] == c[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}
