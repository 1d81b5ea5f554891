use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;
use trajcal::baselines::{
    fit_temperature, global_trace_confidence, last_step_confidence, parse_verbalized, rows_to_csv, BaselineRow,
    TemperatureModel,
};
use trajcal::calibrator::{load_model, save_model};
use trajcal::features::CategorySet;
use trajcal::metrics::{auroc, brier, ece, PredictionSet};
use trajcal::pipeline::{grid_search_cv, pretrain_gac, stratified_holdout, transfer_eval, CvConfig, PUBLISHED_GRID};
use trajcal::synth::{generate, sidecar_csv, trajectories, GenConfig};
use trajcal::table::FeatureTable;
use trajcal::trace::TraceFile;
use trajcal::{Dataset, Trajectory, EPSILON};

use crate::output::{sibling, Outputs, Run};
use crate::{BaselineArgs, Command, EvalArgs, ExtractArgs, FitArgs, GacArgs, SynthArgs, TrainArgs};

/// Metadata key holding the agent's final free-text response.
pub const RESPONSE_KEY: &str = "response";

pub fn name(c: &Command) -> &'static str {
    match c {
        Command::Extract(_) => "extract",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Transfer(_) => "transfer",
        Command::Gac(_) => "gac",
        Command::Baselines(_) => "baselines",
        Command::Synth(_) => "synth",
    }
}

/// `10 * command + class`, where command is 1..=7 in subcommand order and
/// class is 1 = unreadable input, 2 = unusable data, 3 = bad model file,
/// 4 = I/O, 5 = anything else.
pub fn exit_code(command: &str, e: &anyhow::Error) -> u8 {
    let base = match command {
        "extract" => 10,
        "train" => 20,
        "eval" => 30,
        "transfer" => 40,
        "gac" => 50,
        "baselines" => 60,
        _ => 70,
    };
    base + error_class(e)
}

fn error_class(e: &anyhow::Error) -> u8 {
    use trajcal::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Parse { .. }
                | E::InvalidTrajectory { .. }
                | E::EmptyStep
                | E::PositiveLogProb(_)
                | E::NonFinite { .. }
                | E::Csv(_) => 1,
                E::MissingLabel(_)
                | E::DimensionMismatch { .. }
                | E::DegenerateLabels
                | E::AurocUndefined
                | E::InvalidInput(_) => 2,
                E::Model(_) => 3,
                E::Io(_) => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<tempfile::PersistError>().is_some() {
            return 4;
        }
    }
    5
}

pub fn run(c: Command) -> Result<()> {
    match c {
        Command::Extract(a) => extract(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a, "eval"),
        Command::Transfer(a) => eval(a, "transfer"),
        Command::Gac(a) => gac(a),
        Command::Baselines(a) => baselines(a),
        Command::Synth(a) => synth(a),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

fn read_traces(path: &Path) -> Result<TraceFile> {
    TraceFile::parse(&read(path)?).with_context(|| format!("in {}", path.display()))
}

fn read_table(path: &Path) -> Result<Dataset> {
    let table = FeatureTable::parse_csv(&read(path)?).with_context(|| format!("in {}", path.display()))?;
    let name = path.file_stem().map_or_else(|| "table".into(), |s| s.to_string_lossy().into_owned());
    Ok(table.into_dataset(name)?)
}

fn extract(a: ExtractArgs) -> Result<()> {
    let mut run = Run::new("extract");
    run.input(&a.input);
    let cats = match &a.categories {
        Some(list) => CategorySet::parse(list)?,
        None => CategorySet::all(),
    };
    run.set("categories", cats.to_string());
    run.set("prefix", a.prefix);
    if let Some(k) = a.k {
        if k == 0 {
            bail!(trajcal::Error::InvalidInput("k must be positive".into()));
        }
    }
    let file = read_traces(&a.input)?;
    let k = a.k.unwrap_or(file.k);
    run.set("k", k);
    let ts: Vec<Trajectory> = match a.k {
        Some(k) => file.trajectories.iter().map(|t| t.with_topk_limit(k)).collect(),
        None => file.trajectories,
    };
    run.timer.lap("read");

    let table = FeatureTable::from_trajectories(&ts, &cats, a.prefix, EPSILON)?;
    let ms = run.timer.lap("extract");
    if !ts.is_empty() {
        run.timer.record("extract_per_trajectory", ms / ts.len() as f64);
    }
    info!("extracted {} trajectories x {} features", table.len(), table.feature_names.len());

    let mut out = Outputs::default();
    out.add(&a.output, table.to_csv()?);
    run.finish(&a.output, out)
}

fn cv_config(f: &FitArgs) -> CvConfig {
    let grid = match (&f.alpha, &f.grid) {
        (Some(alpha), _) => vec![*alpha],
        (None, Some(g)) => g.clone(),
        (None, None) => PUBLISHED_GRID.to_vec(),
    };
    CvConfig {
        grid,
        folds: f.folds,
        seed: f.seed,
        bins: f.bins,
        ..CvConfig::new(f.penalty)
    }
}

fn record_fit(run: &mut Run, cfg: &CvConfig) {
    run.seed = Some(cfg.seed);
    run.set("penalty", cfg.penalty.to_string());
    run.set("grid", &cfg.grid);
    run.set("folds", cfg.folds);
    run.set("bins", cfg.bins);
    run.set("max_iter", cfg.max_iter);
    run.set("tol", cfg.tol);
}

fn train(a: TrainArgs) -> Result<()> {
    let mut run = Run::new("train");
    run.input(&a.input);
    let cfg = cv_config(&a.fit);
    record_fit(&mut run, &cfg);
    let d = read_table(&a.input)?;
    run.timer.lap("read");
    let (model, report) = grid_search_cv(&d, &cfg)?;
    run.timer.lap("train");
    info!(
        "alpha = {}, {} of {} features selected",
        report.chosen_alpha,
        model.num_selected(),
        model.dim()
    );
    let mut out = Outputs::default();
    out.add(&a.output, save_model(&model));
    out.add(sibling(&a.output, ".cv.json"), report.to_json() + "\n");
    run.finish(&a.output, out)
}

fn gac(a: GacArgs) -> Result<()> {
    let mut run = Run::new("gac");
    let cfg = cv_config(&a.fit);
    record_fit(&mut run, &cfg);
    let mut sources = Vec::with_capacity(a.input.len());
    for p in &a.input {
        run.input(p);
        sources.push(read_table(p)?);
    }
    run.timer.lap("read");
    let (model, report) = pretrain_gac(&sources, &cfg)?;
    run.timer.lap("train");
    let mut out = Outputs::default();
    out.add(&a.output, save_model(&model));
    out.add(sibling(&a.output, ".cv.json"), report.to_json() + "\n");
    run.finish(&a.output, out)
}

fn eval(a: EvalArgs, command: &'static str) -> Result<()> {
    let mut run = Run::new(command);
    run.input(&a.model);
    run.input(&a.input);
    run.set("bins", a.bins);
    let model = load_model(&read(&a.model)?).with_context(|| format!("in {}", a.model.display()))?;
    let d = read_table(&a.input)?;
    run.set("model_sources", &model.sources);
    run.set("target", &d.name);
    run.timer.lap("read");
    let report = transfer_eval(&model, &d, a.bins)?;
    run.timer.lap("predict");
    let mut out = Outputs::default();
    out.add(&a.output, report.to_json() + "\n");
    out.add(sibling(&a.output, ".bins.csv"), report.reliability().to_csv());
    run.finish(&a.output, out)
}

#[derive(Serialize)]
struct Metrics {
    n: usize,
    ece: f64,
    brier: f64,
    /// Absent when the evaluation part holds one class only.
    auroc: Option<f64>,
}

fn metrics(c: Vec<f64>, y: Vec<bool>, bins: usize) -> Result<Option<Metrics>> {
    if c.is_empty() {
        return Ok(None);
    }
    let p = PredictionSet::new(c, y)?;
    Ok(Some(Metrics {
        n: p.len(),
        ece: ece(&p, bins)?,
        brier: brier(&p),
        auroc: auroc(&p).ok(),
    }))
}

#[derive(Serialize)]
struct MethodSummary {
    method: &'static str,
    rows: usize,
    labelled: usize,
    fit_n: usize,
    temperature: f64,
    fit_log_loss: Option<f64>,
    raw: Option<Metrics>,
    scaled: Option<Metrics>,
}

#[derive(Serialize)]
struct BaselineSummary {
    fit_frac: f64,
    seed: u64,
    bins: usize,
    methods: Vec<MethodSummary>,
}

type Scorer = fn(&Trajectory) -> Option<f64>;

fn baselines(a: BaselineArgs) -> Result<()> {
    let mut run = Run::new("baselines");
    run.input(&a.input);
    run.seed = Some(a.seed);
    run.set("fit_frac", a.fit_frac);
    run.set("bins", a.bins);
    if !(a.fit_frac > 0.0 && a.fit_frac < 1.0) {
        bail!(trajcal::Error::InvalidInput("--fit-frac must lie strictly between 0 and 1".into()));
    }
    let ts = read_traces(&a.input)?.trajectories;
    run.timer.lap("read");

    let methods: [(&'static str, Scorer); 3] = [
        ("last_step", |t| Some(last_step_confidence(t))),
        ("global_trace", |t| Some(global_trace_confidence(t))),
        ("verbalized", |t| t.meta.get(RESPONSE_KEY).and_then(|r| parse_verbalized(r))),
    ];
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (method, score) in methods {
        let scored: Vec<(&Trajectory, f64)> = ts.iter().filter_map(|t| score(t).map(|c| (t, c))).collect();
        let labelled: Vec<(f64, bool)> = scored
            .iter()
            .filter_map(|(t, c)| t.label.map(|l| (*c, l == 1)))
            .collect();
        let labels: Vec<bool> = labelled.iter().map(|x| x.1).collect();
        let all: Vec<usize> = (0..labelled.len()).collect();
        // `stratified_holdout` returns (rest, held-out fraction); the held-out part fits T.
        let (eval_idx, fit_idx) = stratified_holdout(&labels, &all, a.fit_frac, a.seed);
        let pick = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) {
            (idx.iter().map(|&i| labelled[i].0).collect(), idx.iter().map(|&i| labelled[i].1).collect())
        };
        let (fit_c, fit_y) = pick(&fit_idx);
        let both_classes = fit_y.iter().any(|&y| y) && fit_y.iter().any(|&y| !y);
        let tm = if both_classes {
            fit_temperature(&fit_c, &fit_y)?
        } else {
            if !fit_c.is_empty() {
                log::warn!("{method}: temperature fit set has a single class; leaving scores unscaled");
            }
            TemperatureModel::identity()
        };
        let (ev_c, ev_y) = pick(&eval_idx);
        let ev_scaled: Vec<f64> = ev_c.iter().map(|&c| tm.apply(c)).collect();
        summaries.push(MethodSummary {
            method,
            rows: scored.len(),
            labelled: labelled.len(),
            fit_n: fit_c.len(),
            temperature: tm.temperature,
            fit_log_loss: tm.log_loss.is_finite().then_some(tm.log_loss),
            raw: metrics(ev_c, ev_y.clone(), a.bins)?,
            scaled: metrics(ev_scaled, ev_y, a.bins)?,
        });
        rows.extend(scored.iter().map(|(t, c)| BaselineRow {
            id: t.id.clone(),
            method: method.to_string(),
            raw_confidence: *c,
            scaled_confidence: tm.apply(*c),
        }));
    }
    run.timer.lap("baselines");
    let summary = BaselineSummary {
        fit_frac: a.fit_frac,
        seed: a.seed,
        bins: a.bins,
        methods: summaries,
    };
    let mut out = Outputs::default();
    out.add(&a.output, rows_to_csv(&rows)?);
    out.add(
        sibling(&a.output, ".summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    );
    run.finish(&a.output, out)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut run = Run::new("synth");
    run.input(&a.input);
    let text = String::from_utf8(read(&a.input)?).context("generator config is not UTF-8")?;
    let mut cfg = GenConfig::from_toml(&text)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    run.seed = Some(cfg.seed);
    run.set("generator", &cfg);
    run.timer.lap("read");
    let records = generate(&cfg)?;
    run.timer.lap("generate");
    let mut out = Outputs::default();
    out.add(&a.output, TraceFile::new(cfg.k, trajectories(&records)).to_text());
    out.add(sibling(&a.output, ".oracle.csv"), sidecar_csv(&records));
    run.finish(&a.output, out)
}
