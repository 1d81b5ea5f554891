//! Regularized logistic calibrators over trajectory features.
//!
//! The model is `sigmoid(w . z + b)` where `z` is the z-scored feature vector.
//! Training minimizes
//!
//! ```text
//! (1/N) sum_i logloss(y_i, sigmoid(w . z_i + b)) + alpha * R(w)
//! ```
//!
//! with `R(w) = ||w||_1` (sparse, [`Penalty::L1`]) or `R(w) = ||w||_2^2`
//! (dense, [`Penalty::L2`]). The bias is never penalized. Standardization
//! statistics are fitted on the training rows and travel with the model, so a
//! model applied to another dataset keeps its source scaling.
//!
//! Both solvers are deterministic: L1 uses cyclic coordinate descent with
//! soft-thresholded Newton steps (bias first, then features `0..d`), L2 uses
//! damped Newton iterations. Each accepted step passes an Armijo test, so the
//! objective never increases.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;

use crate::{fmt_real, Error, Result};

pub const MODEL_TAG: &str = "trajcal-model";
pub const MODEL_VERSION: &str = "v1";
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_SEED: u64 = 42;
/// Weights at or below this magnitude do not count as selected.
pub const SELECTION_THRESHOLD: f64 = 1e-6;

const CONSTANT_STD: f64 = 1e-12;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 60;
const PROB_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Penalty {
    L1,
    L2,
}

impl fmt::Display for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Penalty::L1 => "l1",
            Penalty::L2 => "l2",
        })
    }
}

impl FromStr for Penalty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(Penalty::L1),
            "l2" => Ok(Penalty::L2),
            other => Err(Error::invalid(format!("unknown penalty `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub penalty: Penalty,
    pub alpha: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(penalty: Penalty, alpha: f64) -> Self {
        Self {
            penalty,
            alpha,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            seed: DEFAULT_SEED,
        }
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be > 0"));
        }
        Ok(())
    }
}

/// Per-feature z-scoring parameters. Constant features carry `std = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    /// Fits means and population standard deviations column by column.
    /// The second value flags columns that were constant.
    pub fn fit(x: ArrayView2<f64>) -> (Standardizer, Vec<bool>) {
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut stds = Vec::with_capacity(x.ncols());
        let mut constant = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let m = col.sum() / n;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            let is_const = sd <= CONSTANT_STD * m.abs().max(1.0);
            means.push(m);
            stds.push(if is_const { 1.0 } else { sd });
            constant.push(is_const);
        }
        (Standardizer { means, stds }, constant)
    }

    pub fn transform_value(&self, j: usize, v: f64) -> f64 {
        (v - self.means[j]) / self.stds[j]
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

/// A fitted calibrator: weights over standardized features plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    pub feature_names: Vec<String>,
    pub standardizer: Standardizer,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub penalty: Penalty,
    pub alpha: f64,
    pub meta: TrainingMeta,
    /// Datasets pooled to train this model, if any.
    pub sources: Vec<String>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Standardized training problem, stored column-major.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    cols: Vec<Vec<f64>>,
    y: Vec<f64>,
    active: Vec<bool>,
}

impl LogisticProblem {
    pub fn new(z_cols: Vec<Vec<f64>>, y: &[bool], active: Vec<bool>) -> Self {
        Self {
            cols: z_cols,
            y: y.iter().map(|&v| f64::from(u8::from(v))).collect(),
            active,
        }
    }

    /// Standardizes `x` and records which columns are constant.
    pub fn from_features(x: ArrayView2<f64>, y: &[bool]) -> (Self, Standardizer) {
        let (std, constant) = Standardizer::fit(x);
        let cols = x
            .columns()
            .into_iter()
            .enumerate()
            .map(|(j, c)| c.iter().map(|&v| std.transform_value(j, v)).collect())
            .collect();
        let active = constant.iter().map(|c| !c).collect();
        (Self::new(cols, y, active), std)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.cols.len()
    }

    fn margins(&self, w: &[f64], b: f64) -> Vec<f64> {
        let mut eta = vec![b; self.n()];
        for (col, &wj) in self.cols.iter().zip(w) {
            if wj != 0.0 {
                for (e, &z) in eta.iter_mut().zip(col) {
                    *e += wj * z;
                }
            }
        }
        eta
    }

    fn loss_at(&self, eta: &[f64]) -> f64 {
        eta.iter()
            .zip(&self.y)
            .map(|(&e, &y)| softplus(e) - y * e)
            .sum::<f64>()
            / self.n() as f64
    }

    /// Mean log-loss.
    pub fn log_loss(&self, w: &[f64], b: f64) -> f64 {
        self.loss_at(&self.margins(w, b))
    }

    /// Differentiable part of the objective: log-loss, plus `alpha ||w||^2` for L2.
    pub fn smooth_objective(&self, w: &[f64], b: f64, penalty: Penalty, alpha: f64) -> f64 {
        let loss = self.log_loss(w, b);
        match penalty {
            Penalty::L1 => loss,
            Penalty::L2 => loss + alpha * w.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    /// Gradient of [`smooth_objective`](Self::smooth_objective) w.r.t. `(w, b)`.
    pub fn smooth_gradient(&self, w: &[f64], b: f64, penalty: Penalty, alpha: f64) -> (Vec<f64>, f64) {
        let n = self.n() as f64;
        let resid: Vec<f64> = self
            .margins(w, b)
            .iter()
            .zip(&self.y)
            .map(|(&e, &y)| sigmoid(e) - y)
            .collect();
        let gb = resid.iter().sum::<f64>() / n;
        let gw = self
            .cols
            .iter()
            .zip(w)
            .map(|(col, &wj)| {
                let g = col.iter().zip(&resid).map(|(z, r)| z * r).sum::<f64>() / n;
                match penalty {
                    Penalty::L1 => g,
                    Penalty::L2 => g + 2.0 * alpha * wj,
                }
            })
            .collect();
        (gw, gb)
    }

    pub fn objective(&self, w: &[f64], b: f64, penalty: Penalty, alpha: f64) -> f64 {
        match penalty {
            Penalty::L1 => self.log_loss(w, b) + alpha * w.iter().map(|v| v.abs()).sum::<f64>(),
            Penalty::L2 => self.smooth_objective(w, b, penalty, alpha),
        }
    }

    /// Smallest L1 strength at which every weight is zero.
    pub fn lasso_alpha_max(&self) -> f64 {
        let n = self.n() as f64;
        let ybar = self.y.iter().sum::<f64>() / n;
        self.cols
            .iter()
            .zip(&self.active)
            .filter(|(_, &a)| a)
            .map(|(col, _)| (col.iter().zip(&self.y).map(|(z, y)| z * (y - ybar)).sum::<f64>() / n).abs())
            .fold(0.0, f64::max)
    }

    fn base_rate_logit(&self) -> f64 {
        let ybar = self.y.iter().sum::<f64>() / self.n() as f64;
        logit(ybar)
    }
}

/// Result of a solver run.
#[derive(Debug, Clone)]
pub struct Solution {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after initialization and after every iteration.
    pub objective_trace: Vec<f64>,
}

/// Runs the configured solver on an already standardized problem.
pub fn solve(problem: &LogisticProblem, cfg: &TrainConfig) -> Result<Solution> {
    cfg.validate()?;
    Ok(match cfg.penalty {
        Penalty::L1 => solve_l1(problem, cfg),
        Penalty::L2 => solve_l2(problem, cfg),
    })
}

fn solve_l1(pb: &LogisticProblem, cfg: &TrainConfig) -> Solution {
    let n = pb.n() as f64;
    let alpha = cfg.alpha;
    let mut w = vec![0.0; pb.dim()];
    let mut b = pb.base_rate_logit();
    let mut eta = vec![b; pb.n()];
    let mut prob: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
    let mut loss = pb.loss_at(&eta);
    let mut trace = vec![loss];
    // At or above alpha_max the null model satisfies the optimality conditions
    // exactly; iterating would only let rounding leak into the weights.
    if alpha >= pb.lasso_alpha_max() {
        return Solution {
            weights: w,
            bias: b,
            iterations: 0,
            converged: true,
            objective_trace: trace,
        };
    }
    let mut trial = vec![0.0; pb.n()];
    let mut converged = false;
    let mut iterations = 0;

    // One Newton-type move along a single coordinate whose column is `col`
    // (None for the bias). Returns the accepted step size.
    let mut coordinate_step = |col: Option<&[f64]>,
                               wj: f64,
                               l1: f64,
                               eta: &mut Vec<f64>,
                               prob: &mut Vec<f64>,
                               loss: &mut f64|
     -> (f64, f64) {
        let (mut g, mut h) = (0.0, 0.0);
        for i in 0..eta.len() {
            let z = col.map_or(1.0, |c| c[i]);
            let p = prob[i];
            g += (p - pb.y[i]) * z;
            h += p * (1.0 - p) * z * z;
        }
        g /= n;
        h = (h / n).max(1e-12);
        let target = soft_threshold(wj - g / h, l1 / h);
        let d = target - wj;
        if d == 0.0 {
            return (0.0, 0.0);
        }
        let decrease = g * d + l1 * ((wj + d).abs() - wj.abs());
        // Below the resolution of the loss the sufficient-decrease test is
        // pure rounding noise; take the Newton step as is.
        let exact = decrease.abs() <= 4.0 * f64::EPSILON * loss.abs();
        let mut t = 1.0;
        for _ in 0..MAX_BACKTRACK {
            for i in 0..eta.len() {
                trial[i] = eta[i] + t * d * col.map_or(1.0, |c| c[i]);
            }
            let new_loss = pb.loss_at(&trial);
            let change = new_loss - *loss + l1 * ((wj + t * d).abs() - wj.abs());
            if exact || change <= ARMIJO * t * decrease {
                eta.copy_from_slice(&trial);
                for (p, &e) in prob.iter_mut().zip(eta.iter()) {
                    *p = sigmoid(e);
                }
                *loss = new_loss;
                return (t * d, 0.0);
            }
            t *= 0.5;
        }
        (0.0, d)
    };

    for it in 1..=cfg.max_iter {
        iterations = it;
        let mut max_change: f64 = 0.0;

        let (step, rejected) = coordinate_step(None, b, 0.0, &mut eta, &mut prob, &mut loss);
        b += step;
        max_change = max_change.max(step.abs()).max(rejected.abs());

        for j in 0..pb.dim() {
            if !pb.active[j] {
                continue;
            }
            let (step, rejected) =
                coordinate_step(Some(&pb.cols[j]), w[j], alpha, &mut eta, &mut prob, &mut loss);
            w[j] += step;
            max_change = max_change.max(step.abs()).max(rejected.abs());
        }

        trace.push(loss + alpha * w.iter().map(|v| v.abs()).sum::<f64>());
        if max_change < cfg.tol {
            converged = true;
            break;
        }
    }

    Solution {
        weights: w,
        bias: b,
        iterations,
        converged,
        objective_trace: trace,
    }
}

fn solve_l2(pb: &LogisticProblem, cfg: &TrainConfig) -> Solution {
    let alpha = cfg.alpha;
    let active: Vec<usize> = (0..pb.dim()).filter(|&j| pb.active[j]).collect();
    let m = active.len() + 1;
    let n = pb.n() as f64;

    let mut w = vec![0.0; pb.dim()];
    let mut b = pb.base_rate_logit();
    let objective = |w: &[f64], b: f64| pb.smooth_objective(w, b, Penalty::L2, alpha);
    let mut f = objective(&w, b);
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=cfg.max_iter {
        iterations = it;
        let eta = pb.margins(&w, b);
        let prob: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let s: Vec<f64> = prob.iter().map(|p| p * (1.0 - p)).collect();
        let resid: Vec<f64> = prob.iter().zip(&pb.y).map(|(p, y)| p - y).collect();

        // coordinate 0 is the bias, 1.. are the active features
        let column = |k: usize| -> Option<&[f64]> {
            if k == 0 {
                None
            } else {
                Some(&pb.cols[active[k - 1]])
            }
        };
        let value = |k: usize, i: usize| column(k).map_or(1.0, |c| c[i]);

        let mut grad = DVector::zeros(m);
        for k in 0..m {
            let g: f64 = (0..pb.n()).map(|i| resid[i] * value(k, i)).sum::<f64>() / n;
            grad[k] = if k == 0 { g } else { g + 2.0 * alpha * w[active[k - 1]] };
        }
        let mut hess = DMatrix::zeros(m, m);
        for a in 0..m {
            for c in a..m {
                let mut h: f64 = (0..pb.n()).map(|i| s[i] * value(a, i) * value(c, i)).sum::<f64>() / n;
                if a == c && a > 0 {
                    h += 2.0 * alpha;
                }
                hess[(a, c)] = h;
                hess[(c, a)] = h;
            }
        }
        let direction = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&(-&grad)),
            None => {
                // saturated probabilities leave the bias row flat; nudge it
                for k in 0..m {
                    hess[(k, k)] += 1e-10;
                }
                match hess.cholesky() {
                    Some(ch) => ch.solve(&(-&grad)),
                    None => -grad.clone(),
                }
            }
        };

        let slope = grad.dot(&direction);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let mut w_new = w.clone();
            for (k, &j) in active.iter().enumerate() {
                w_new[j] += t * direction[k + 1];
            }
            let b_new = b + t * direction[0];
            let f_new = objective(&w_new, b_new);
            if f_new <= f + ARMIJO * t * slope {
                accepted = Some((w_new, b_new, f_new));
                break;
            }
            t *= 0.5;
        }
        let max_step = direction.amax();
        match accepted {
            Some((w_new, b_new, f_new)) => {
                w = w_new;
                b = b_new;
                f = f_new;
                trace.push(f);
                if t * max_step < cfg.tol {
                    converged = true;
                    break;
                }
            }
            None => {
                trace.push(f);
                // no representable decrease left along the Newton direction
                converged = max_step < cfg.tol.sqrt();
                break;
            }
        }
    }

    Solution {
        weights: w,
        bias: b,
        iterations,
        converged,
        objective_trace: trace,
    }
}

fn check_inputs(x: ArrayView2<f64>, y: &[bool], names: &[String]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if names.len() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            got: names.len(),
        });
    }
    if x.nrows() < 2 {
        return Err(Error::invalid("training needs at least 2 rows"));
    }
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(Error::DegenerateLabels);
    }
    if let Some(((row, col), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { row, col });
    }
    Ok(())
}

/// Fits a calibrator and also returns the per-iteration objective values.
pub fn train_traced(
    x: ArrayView2<f64>,
    y: &[bool],
    feature_names: &[String],
    cfg: &TrainConfig,
) -> Result<(CalibrationModel, Vec<f64>)> {
    check_inputs(x, y, feature_names)?;
    cfg.validate()?;
    let (problem, standardizer) = LogisticProblem::from_features(x, y);
    let sol = solve(&problem, cfg)?;
    let objective = *sol.objective_trace.last().expect("trace is never empty");
    let model = CalibrationModel {
        feature_names: feature_names.to_vec(),
        standardizer,
        weights: sol.weights,
        bias: sol.bias,
        penalty: cfg.penalty,
        alpha: cfg.alpha,
        meta: TrainingMeta {
            seed: cfg.seed,
            iterations: sol.iterations,
            converged: sol.converged,
            objective,
        },
        sources: Vec::new(),
    };
    Ok((model, sol.objective_trace))
}

pub fn train(
    x: ArrayView2<f64>,
    y: &[bool],
    feature_names: &[String],
    cfg: &TrainConfig,
) -> Result<CalibrationModel> {
    train_traced(x, y, feature_names, cfg).map(|(m, _)| m)
}

impl CalibrationModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Linear score `w . z + b` before the sigmoid.
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.bias
            + x.iter()
                .enumerate()
                .map(|(j, &v)| self.weights[j] * self.standardizer.transform_value(j, v))
                .sum::<f64>())
    }

    /// Calibrated success probability, strictly inside (0, 1).
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let p = sigmoid(self.decision(x)?);
        Ok(p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
    }

    pub fn predict_rows(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        x.rows()
            .into_iter()
            .map(|row| match row.as_slice() {
                Some(s) => self.predict(s),
                None => self.predict(&row.to_vec()),
            })
            .collect()
    }

    /// Features with `|w| > threshold`, largest magnitude first.
    pub fn selected_features(&self, threshold: f64) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .feature_names
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| w.abs() > threshold)
            .map(|(n, &w)| (n.clone(), w))
            .collect();
        out.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
        out
    }

    pub fn num_selected(&self) -> usize {
        self.weights.iter().filter(|w| w.abs() > SELECTION_THRESHOLD).count()
    }

    /// Serializes to the versioned text model format.
    pub fn to_text(&self) -> String {
        let mut out = format!("{MODEL_TAG} {MODEL_VERSION}\n");
        out += &format!("penalty {}\n", self.penalty);
        out += &format!("alpha {}\n", fmt_real(self.alpha));
        out += &format!("seed {}\n", self.meta.seed);
        out += &format!("iterations {}\n", self.meta.iterations);
        out += &format!("converged {}\n", self.meta.converged);
        out += &format!("objective {}\n", fmt_real(self.meta.objective));
        out += &format!("bias {}\n", fmt_real(self.bias));
        out += &format!("sources {}\n", self.sources.len());
        for s in &self.sources {
            out += &format!("source {}\n", one_line(s));
        }
        out += &format!("features {}\n", self.dim());
        for j in 0..self.dim() {
            out += &format!(
                "feature {} {} {} {}\n",
                fmt_real(self.standardizer.means[j]),
                fmt_real(self.standardizer.stds[j]),
                fmt_real(self.weights[j]),
                one_line(&self.feature_names[j])
            );
        }
        out += "end\n";
        out
    }

    pub fn from_text(text: &str) -> Result<CalibrationModel> {
        ModelReader::new(text).read()
    }
}

fn one_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

pub fn save_model(m: &CalibrationModel) -> Vec<u8> {
    m.to_text().into_bytes()
}

pub fn load_model(bytes: &[u8]) -> Result<CalibrationModel> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Model("payload is not UTF-8".into()))?;
    CalibrationModel::from_text(text)
}

struct ModelReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> ModelReader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
        }
    }

    fn next_line(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (i, line) = self
            .lines
            .next()
            .ok_or_else(|| Error::Model(format!("truncated: expected `{key}`")))?;
        let rest = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| Error::Model(format!("line {}: expected `{key}`", i + 1)))?;
        Ok((i + 1, rest))
    }

    fn value<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let (line, rest) = self.next_line(key)?;
        rest.trim()
            .parse()
            .map_err(|_| Error::Model(format!("line {line}: bad value for `{key}`")))
    }

    fn read(mut self) -> Result<CalibrationModel> {
        let (_, first) = self
            .lines
            .next()
            .ok_or_else(|| Error::Model("empty payload".into()))?;
        let mut parts = first.split_whitespace();
        if parts.next() != Some(MODEL_TAG) {
            return Err(Error::Model("missing format tag".into()));
        }
        match parts.next() {
            Some(MODEL_VERSION) => {}
            other => {
                return Err(Error::Model(format!(
                    "unsupported model version {}",
                    other.unwrap_or("<none>")
                )))
            }
        }
        let penalty: Penalty = {
            let (line, rest) = self.next_line("penalty")?;
            rest.parse()
                .map_err(|_| Error::Model(format!("line {line}: bad penalty")))?
        };
        let alpha: f64 = self.value("alpha")?;
        let seed: u64 = self.value("seed")?;
        let iterations: usize = self.value("iterations")?;
        let converged: bool = self.value("converged")?;
        let objective: f64 = self.value("objective")?;
        let bias: f64 = self.value("bias")?;
        let n_sources: usize = self.value("sources")?;
        let mut sources = Vec::with_capacity(n_sources.min(1024));
        for _ in 0..n_sources {
            let (_, s) = self.next_line("source")?;
            sources.push(s.to_string());
        }
        let dim: usize = self.value("features")?;
        let mut names = Vec::with_capacity(dim.min(4096));
        let mut means = Vec::with_capacity(dim.min(4096));
        let mut stds = Vec::with_capacity(dim.min(4096));
        let mut weights = Vec::with_capacity(dim.min(4096));
        for _ in 0..dim {
            let (line, rest) = self.next_line("feature")?;
            let bad = || Error::Model(format!("line {line}: malformed feature record"));
            let mut it = rest.splitn(4, ' ');
            let mut real = || -> Result<f64> { it.next().ok_or_else(bad)?.parse().map_err(|_| bad()) };
            means.push(real()?);
            let sd = real()?;
            if !(sd > 0.0) {
                return Err(Error::Model(format!("line {line}: std must be > 0")));
            }
            stds.push(sd);
            weights.push(real()?);
            names.push(it.next().ok_or_else(bad)?.to_string());
        }
        match self.lines.next() {
            Some((_, "end")) => {}
            Some((i, _)) => return Err(Error::Model(format!("line {}: expected `end`", i + 1))),
            None => return Err(Error::Model("truncated: missing `end`".into())),
        }
        Ok(CalibrationModel {
            feature_names: names,
            standardizer: Standardizer { means, stds },
            weights,
            bias,
            penalty,
            alpha,
            meta: TrainingMeta {
                seed,
                iterations,
                converged,
                objective,
            },
            sources,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|j| format!("f{j}")).collect()
    }

    fn random_problem(n: usize, d: usize, seed: u64) -> (Array2<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0);
        let y = (0..n)
            .map(|i| {
                let s: f64 = (0..d).map(|j| x[[i, j]] * (j as f64 - d as f64 / 2.0) * 0.5).sum();
                rng.random::<f64>() < sigmoid(s)
            })
            .collect();
        (x, y)
    }

    #[test]
    fn zero_model_predicts_half() {
        let m = CalibrationModel {
            feature_names: names(3),
            standardizer: Standardizer {
                means: vec![0.0; 3],
                stds: vec![1.0; 3],
            },
            weights: vec![0.0; 3],
            bias: 0.0,
            penalty: Penalty::L2,
            alpha: 1.0,
            meta: TrainingMeta {
                seed: 42,
                iterations: 0,
                converged: true,
                objective: 0.0,
            },
            sources: vec![],
        };
        assert_eq!(m.predict(&[1.0, -4.0, 9.0]).unwrap(), 0.5);
        assert!(m.selected_features(SELECTION_THRESHOLD).is_empty());
        assert!(matches!(
            m.predict(&[1.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn known_weights_match_hand_sigmoid() {
        let m = CalibrationModel {
            feature_names: names(2),
            standardizer: Standardizer {
                means: vec![1.0, -2.0],
                stds: vec![2.0, 0.5],
            },
            weights: vec![0.7, -1.3],
            bias: 0.25,
            penalty: Penalty::L1,
            alpha: 0.1,
            meta: TrainingMeta {
                seed: 1,
                iterations: 3,
                converged: true,
                objective: 0.4,
            },
            sources: vec![],
        };
        let x = [2.0, -1.5];
        let z = 0.25 + 0.7 * ((2.0 - 1.0) / 2.0) - 1.3 * ((-1.5 + 2.0) / 0.5);
        let expected = 1.0 / (1.0 + (-z as f64).exp());
        assert!((m.predict(&x).unwrap() - expected).abs() < 1e-12);
        // bias 0, unit weight on a value equal to the mean
        let mut m0 = m.clone();
        m0.bias = 0.0;
        m0.weights = vec![1.0, 0.0];
        assert_eq!(m0.predict(&[1.0, 5.0]).unwrap(), 0.5);
    }

    #[test]
    fn rejects_degenerate_and_non_finite() {
        let x = Array2::from_shape_vec((3, 1), vec![0.1, 0.2, 0.3]).unwrap();
        let cfg = TrainConfig::new(Penalty::L2, 1.0);
        assert!(matches!(
            train(x.view(), &[true, true, true], &names(1), &cfg),
            Err(Error::DegenerateLabels)
        ));
        let x = Array2::from_shape_vec((3, 1), vec![0.1, f64::NAN, 0.3]).unwrap();
        assert!(matches!(
            train(x.view(), &[true, false, true], &names(1), &cfg),
            Err(Error::NonFinite { row: 1, col: 0 })
        ));
        let x = Array2::from_shape_vec((3, 1), vec![0.1, 0.2, 0.3]).unwrap();
        assert!(train(x.view(), &[true, false, true], &names(1), &cfg.with_alpha(0.0)).is_err());
    }

    #[test]
    fn separating_feature_gets_positive_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y: Vec<bool> = (0..60).map(|i| i % 3 == 0).collect();
        let x = Array2::from_shape_fn((60, 1), |(i, _)| {
            f64::from(u8::from(y[i])) + rng.random::<f64>() * 1e-3
        });
        for penalty in [Penalty::L1, Penalty::L2] {
            let m = train(x.view(), &y, &names(1), &TrainConfig::new(penalty, 0.001)).unwrap();
            assert!(m.weights[0] > 0.0);
            let p = m.predict_rows(x.view()).unwrap();
            let auc = crate::metrics::auroc(&crate::PredictionSet::new(p, y.clone()).unwrap()).unwrap();
            assert_eq!(auc, 1.0);
            // brute-force: no nearby point does better
            let (pb, _) = LogisticProblem::from_features(x.view(), &y);
            let f0 = pb.objective(&m.weights, m.bias, penalty, 0.001);
            for dw in [-1e-3, 1e-3] {
                for db in [-1e-3, 0.0, 1e-3] {
                    assert!(pb.objective(&[m.weights[0] + dw], m.bias + db, penalty, 0.001) >= f0 - 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_feature_is_pinned() {
        let (mut x, y) = random_problem(80, 3, 11);
        x.column_mut(1).fill(0.5);
        for penalty in [Penalty::L1, Penalty::L2] {
            let m = train(x.view(), &y, &names(3), &TrainConfig::new(penalty, 0.01)).unwrap();
            assert_eq!(m.weights[1], 0.0);
            assert_eq!(m.standardizer.stds[1], 1.0);
        }
    }

    #[test]
    fn ridge_shrinks_with_alpha() {
        let (x, y) = random_problem(200, 6, 3);
        let norm = |a| {
            let m = train(x.view(), &y, &names(6), &TrainConfig::new(Penalty::L2, a)).unwrap();
            m.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
        };
        assert!(norm(50.0) < norm(0.001));
    }

    #[test]
    fn lasso_null_threshold() {
        let (x, y) = random_problem(150, 5, 5);
        let (pb, _) = LogisticProblem::from_features(x.view(), &y);
        let amax = pb.lasso_alpha_max();
        let m = train(x.view(), &y, &names(5), &TrainConfig::new(Penalty::L1, amax * 1.0001)).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
        let ybar = y.iter().filter(|&&v| v).count() as f64 / y.len() as f64;
        assert!((m.bias - logit(ybar)).abs() < 1e-8);
        assert!(m.selected_features(SELECTION_THRESHOLD).is_empty());
        // just below the threshold something enters
        let m = train(x.view(), &y, &names(5), &TrainConfig::new(Penalty::L1, amax * 0.9)).unwrap();
        assert!(m.weights.iter().any(|&w| w != 0.0));
    }

    #[test]
    fn objective_never_increases() {
        let (x, y) = random_problem(300, 10, 9);
        for penalty in [Penalty::L1, Penalty::L2] {
            for alpha in [0.001, 0.05] {
                let (m, trace) =
                    train_traced(x.view(), &y, &names(10), &TrainConfig::new(penalty, alpha)).unwrap();
                assert!(m.meta.converged, "{penalty} {alpha}");
                for w in trace.windows(2) {
                    assert!(w[1] <= w[0] + 1e-12 * w[0].abs(), "{penalty}: {} -> {}", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn model_text_round_trip() {
        let (x, y) = random_problem(120, 4, 21);
        let mut m = train(x.view(), &y, &names(4), &TrainConfig::new(Penalty::L1, 0.01)).unwrap();
        m.sources = vec!["alpha set".into(), "beta".into()];
        let bytes = save_model(&m);
        let back = load_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(save_model(&back), bytes);
    }

    #[test]
    fn corrupt_payloads_fail() {
        let (x, y) = random_problem(50, 2, 1);
        let m = train(x.view(), &y, &names(2), &TrainConfig::new(Penalty::L2, 1.0)).unwrap();
        let text = m.to_text();
        let cut = &text[..text.len() - 10];
        assert!(load_model(cut.as_bytes()).is_err());
        assert!(load_model(text.replace("v1", "v2").as_bytes()).is_err());
        assert!(load_model(b"").is_err());
        assert!(load_model(text.replace("bias ", "bias x").as_bytes()).is_err());
    }
}
