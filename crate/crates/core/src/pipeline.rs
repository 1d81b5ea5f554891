//! Cross-validated training protocol, transfer evaluation and pooled pretraining.
//!
//! `grid_search_cv` runs stratified k-fold CV for every candidate alpha. In
//! each fold the training part is split again 80/20 (stratified); the solver
//! sees the 80% and the held-out fold is scored. The alpha maximizing
//! `mean AUROC - mean Brier - mean ECE` wins (ties go to the smaller alpha)
//! and is refit on the full dataset.
//!
//! Grid points and folds run in parallel; results are reduced in `(alpha,
//! fold)` order so reports do not depend on the thread count.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::fit_temperature;
use crate::calibrator::{train, CalibrationModel, Penalty, TrainConfig, DEFAULT_MAX_ITER, DEFAULT_SEED, DEFAULT_TOL};
use crate::metrics::{evaluate, EvalReport, PredictionSet, DEFAULT_BINS};
use crate::{Error, Result};

/// The fifteen candidate regularization strengths.
pub const PUBLISHED_GRID: [f64; 15] = [
    0.001, 0.01, 0.1, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 20.0, 50.0,
];
pub const DEFAULT_FOLDS: usize = 5;
/// Share of each fold's training part held back from the solver.
pub const INNER_HOLDOUT: f64 = 0.2;

/// Labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_names: Vec<String>,
    pub features: Array2<f64>,
    pub labels: Vec<bool>,
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        feature_names: Vec<String>,
        features: Array2<f64>,
        labels: Vec<bool>,
        ids: Vec<String>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n || ids.len() != n {
            return Err(Error::invalid(format!(
                "row counts disagree: {n} feature rows, {} labels, {} ids",
                labels.len(),
                ids.len()
            )));
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::DimensionMismatch {
                expected: features.ncols(),
                got: feature_names.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            feature_names,
            features,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn rows(&self, idx: &[usize]) -> (Array2<f64>, Vec<bool>) {
        (
            self.features.select(Axis(0), idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Row-concatenation in source order; ids become `<source>:<id>`.
    pub fn concat(name: impl Into<String>, sources: &[Dataset]) -> Result<Dataset> {
        let first = sources
            .first()
            .ok_or_else(|| Error::invalid("at least one source dataset is required"))?;
        for s in &sources[1..] {
            if s.feature_names != first.feature_names {
                return Err(if s.dim() != first.dim() {
                    Error::DimensionMismatch {
                        expected: first.dim(),
                        got: s.dim(),
                    }
                } else {
                    Error::invalid(format!("feature columns of `{}` differ from `{}`", s.name, first.name))
                });
            }
        }
        let views: Vec<_> = sources.iter().map(|s| s.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        let labels = sources.iter().flat_map(|s| s.labels.iter().copied()).collect();
        let ids = sources
            .iter()
            .flat_map(|s| s.ids.iter().map(move |id| format!("{}:{id}", s.name)))
            .collect();
        Dataset::new(name, first.feature_names.clone(), features, labels, ids)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Splits `0..labels.len()` into `k` stratified folds.
///
/// Each class is shuffled with the seeded generator, then the classes are
/// dealt round-robin with one running counter, so every fold's per-class count
/// and total size differ from the others by at most one.
pub fn stratified_kfold(labels: &[bool], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    if labels.len() < k {
        return Err(Error::invalid(format!(
            "{} samples cannot fill {k} folds",
            labels.len()
        )));
    }
    let mut rng = rng_for(seed, 0);
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for class in [true, false] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if !members.is_empty() && members.len() < k {
            log::warn!(
                "class {} has {} members for {k} folds; stratification is best-effort",
                u8::from(class),
                members.len()
            );
        }
        members.shuffle(&mut rng);
        for i in members {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Stratified split of `indices` into (kept, held out), holding out
/// `round(frac * class size)` members of each class.
pub fn stratified_holdout(labels: &[bool], indices: &[usize], frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng_for(seed, 1);
    let mut kept = Vec::new();
    let mut held = Vec::new();
    for class in [true, false] {
        let mut members: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n_held = ((members.len() as f64) * frac).round() as usize;
        // keep at least one of each class on the training side
        let n_held = n_held.min(members.len().saturating_sub(1));
        held.extend_from_slice(&members[..n_held]);
        kept.extend_from_slice(&members[n_held..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    (kept, held)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub penalty: Penalty,
    pub grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    pub bins: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl CvConfig {
    pub fn new(penalty: Penalty) -> Self {
        Self {
            penalty,
            grid: PUBLISHED_GRID.to_vec(),
            folds: DEFAULT_FOLDS,
            seed: DEFAULT_SEED,
            bins: DEFAULT_BINS,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }

    pub fn train_config(&self, alpha: f64) -> TrainConfig {
        TrainConfig {
            penalty: self.penalty,
            alpha,
            max_iter: self.max_iter,
            tol: self.tol,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub alpha: f64,
    pub num_features: usize,
    pub converged: bool,
    pub iterations: usize,
    pub report: EvalReport,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> MeanStd {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaSummary {
    pub alpha: f64,
    pub ece: MeanStd,
    pub brier: MeanStd,
    pub auroc: MeanStd,
    pub num_features: MeanStd,
    /// `mean AUROC - mean Brier - mean ECE`
    pub score: f64,
}

impl AlphaSummary {
    pub fn from_folds(alpha: f64, folds: &[FoldResult]) -> AlphaSummary {
        let col = |f: fn(&FoldResult) -> f64| MeanStd::of(&folds.iter().map(f).collect::<Vec<_>>());
        let ece = col(|r| r.report.ece);
        let brier = col(|r| r.report.brier);
        let auroc = col(|r| r.report.auroc);
        AlphaSummary {
            alpha,
            ece,
            brier,
            auroc,
            num_features: col(|r| r.num_features as f64),
            score: auroc.mean - brier.mean - ece.mean,
        }
    }
}

/// Index of the winning grid point: highest score, then smallest alpha.
pub fn select_alpha(summaries: &[AlphaSummary]) -> Option<usize> {
    (0..summaries.len()).reduce(|best, i| {
        let (a, b) = (&summaries[i], &summaries[best]);
        if a.score > b.score || (a.score == b.score && a.alpha < b.alpha) {
            i
        } else {
            best
        }
    })
}

/// Cross-validation outcome, mirroring the per-dataset result tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub dataset: String,
    pub penalty: String,
    pub folds: usize,
    pub seed: u64,
    pub n: usize,
    pub chosen_alpha: f64,
    pub ece: MeanStd,
    pub brier: MeanStd,
    pub auroc: MeanStd,
    pub num_features: MeanStd,
    pub fold_results: Vec<FoldResult>,
    pub grid: Vec<AlphaSummary>,
}

impl CvReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct FoldData {
    train_x: Array2<f64>,
    train_y: Vec<bool>,
    test_x: Array2<f64>,
    test_y: Vec<bool>,
}

fn fold_data(d: &Dataset, folds: &[Vec<usize>], seed: u64) -> Vec<FoldData> {
    folds
        .iter()
        .enumerate()
        .map(|(f, test_idx)| {
            let outer: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, idx)| idx.iter().copied())
                .collect();
            let (inner_train, _validation) =
                stratified_holdout(&d.labels, &outer, INNER_HOLDOUT, seed.wrapping_add(1 + f as u64));
            let (train_x, train_y) = d.rows(&inner_train);
            let (test_x, test_y) = d.rows(test_idx);
            FoldData {
                train_x,
                train_y,
                test_x,
                test_y,
            }
        })
        .collect()
}

fn run_fold(d: &Dataset, data: &FoldData, fold: usize, cfg: &TrainConfig, bins: usize) -> Result<FoldResult> {
    let model = train(data.train_x.view(), &data.train_y, &d.feature_names, cfg)?;
    let preds = model.predict_rows(data.test_x.view())?;
    let report = evaluate(&PredictionSet::new(preds, data.test_y.clone())?, bins)?;
    Ok(FoldResult {
        fold,
        alpha: cfg.alpha,
        num_features: model.num_selected(),
        converged: model.meta.converged,
        iterations: model.meta.iterations,
        report,
    })
}

pub fn grid_search_cv(d: &Dataset, cfg: &CvConfig) -> Result<(CalibrationModel, CvReport)> {
    if cfg.grid.is_empty() {
        return Err(Error::invalid("alpha grid is empty"));
    }
    if d.labels.iter().all(|&y| y) || d.labels.iter().all(|&y| !y) {
        return Err(Error::DegenerateLabels);
    }
    let folds = stratified_kfold(&d.labels, cfg.folds, cfg.seed)?;
    let data = fold_data(d, &folds, cfg.seed);

    let tasks: Vec<(usize, usize)> = (0..cfg.grid.len())
        .flat_map(|a| (0..cfg.folds).map(move |f| (a, f)))
        .collect();
    let results = tasks
        .par_iter()
        .map(|&(a, f)| run_fold(d, &data[f], f, &cfg.train_config(cfg.grid[a]), cfg.bins))
        .collect::<Result<Vec<_>>>()?;

    let per_alpha: Vec<&[FoldResult]> = results.chunks(cfg.folds).collect();
    let grid: Vec<AlphaSummary> = cfg
        .grid
        .iter()
        .zip(&per_alpha)
        .map(|(&alpha, folds)| AlphaSummary::from_folds(alpha, folds))
        .collect();
    let best = select_alpha(&grid).expect("grid is non-empty");
    let chosen = &grid[best];

    let model = train(d.features.view(), &d.labels, &d.feature_names, &cfg.train_config(chosen.alpha))?;
    let report = CvReport {
        dataset: d.name.clone(),
        penalty: cfg.penalty.to_string(),
        folds: cfg.folds,
        seed: cfg.seed,
        n: d.len(),
        chosen_alpha: chosen.alpha,
        ece: chosen.ece,
        brier: chosen.brier,
        auroc: chosen.auroc,
        num_features: chosen.num_features,
        fold_results: per_alpha[best].to_vec(),
        grid,
    };
    Ok((model, report))
}

/// Scores a trained model on another dataset without refitting.
pub fn transfer_eval(m: &CalibrationModel, target: &Dataset, bins: usize) -> Result<EvalReport> {
    if m.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            got: target.dim(),
        });
    }
    if m.feature_names != target.feature_names {
        return Err(Error::invalid(format!(
            "feature columns of `{}` differ from the model's",
            target.name
        )));
    }
    let preds = m.predict_rows(target.features.view())?;
    evaluate(&PredictionSet::new(preds, target.labels.clone())?, bins)
}

/// Pools the sources row-wise and runs the full grid search on the pool.
pub fn pretrain_gac(sources: &[Dataset], cfg: &CvConfig) -> Result<(CalibrationModel, CvReport)> {
    let pooled = Dataset::concat("pooled", sources)?;
    let (mut model, report) = grid_search_cv(&pooled, cfg)?;
    model.sources = sources.iter().map(|s| s.name.clone()).collect();
    Ok((model, report))
}

/// Per-fold comparison of a raw baseline score with its temperature-scaled version.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineCvReport {
    pub raw_ece: MeanStd,
    pub raw_brier: MeanStd,
    pub raw_auroc: MeanStd,
    pub scaled_ece: MeanStd,
    pub scaled_brier: MeanStd,
    pub scaled_auroc: MeanStd,
    pub temperatures: Vec<f64>,
}

/// Cross-validates temperature scaling of a baseline score: in every fold the
/// temperature is fit on the 20% validation part of the training side and
/// both raw and scaled scores are evaluated on the held-out fold.
pub fn baseline_cv(scores: &[f64], labels: &[bool], folds: usize, seed: u64, bins: usize) -> Result<BaselineCvReport> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    let split = stratified_kfold(labels, folds, seed)?;
    let mut raw = Vec::new();
    let mut scaled = Vec::new();
    let mut temperatures = Vec::new();
    for (f, test) in split.iter().enumerate() {
        let outer: Vec<usize> = split
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        let (_, validation) = stratified_holdout(labels, &outer, INNER_HOLDOUT, seed.wrapping_add(1 + f as u64));
        let pick = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) {
            (idx.iter().map(|&i| scores[i]).collect(), idx.iter().map(|&i| labels[i]).collect())
        };
        let (vc, vy) = pick(&validation);
        let tm = fit_temperature(&vc, &vy)?;
        let (tc, ty) = pick(test);
        let tc_scaled = tc.iter().map(|&c| tm.apply(c)).collect();
        raw.push(evaluate(&PredictionSet::new(tc, ty.clone())?, bins)?);
        scaled.push(evaluate(&PredictionSet::new(tc_scaled, ty)?, bins)?);
        temperatures.push(tm.temperature);
    }
    let ms = |rs: &[EvalReport], f: fn(&EvalReport) -> f64| MeanStd::of(&rs.iter().map(f).collect::<Vec<_>>());
    Ok(BaselineCvReport {
        raw_ece: ms(&raw, |r| r.ece),
        raw_brier: ms(&raw, |r| r.brier),
        raw_auroc: ms(&raw, |r| r.auroc),
        scaled_ece: ms(&scaled, |r| r.ece),
        scaled_brier: ms(&scaled, |r| r.brier),
        scaled_auroc: ms(&scaled, |r| r.auroc),
        temperatures,
    })
}
