//! Trajectory data model and the line-delimited trace format.
//!
//! A trace file is UTF-8 text. The first line is a header
//! `{"format":"trajcal-trace","version":1,"k":5}`; every following line is one
//! trajectory record:
//!
//! ```text
//! {"id":"t-001","label":1,"meta":{"dataset":"hotpotqa"},"steps":[[{"top1":0.9,"topk":[0.9,0.05]}]]}
//! ```
//!
//! Token records come either in probability form (`top1`, `topk`) or in
//! log-probability form (`top1_lp`, `topk_lp`). Log-probabilities are
//! exponentiated at ingestion; everything downstream works with probabilities
//! in `(0, 1]`. Serialization always emits the probability form with sorted
//! meta keys and shortest round-trip reals, which is the canonical form.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FORMAT_TAG: &str = "trajcal-trace";
pub const FORMAT_VERSION: u32 = 1;
/// Number of top alternatives kept per token unless the file header says otherwise.
pub const DEFAULT_K: usize = 5;

/// Confidence of a single generated token.
///
/// `topk[0]` is the top-1 probability itself; the remaining entries are the
/// next most likely alternatives in non-increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenConfidence {
    pub top1: f64,
    pub topk: Vec<f64>,
}

impl TokenConfidence {
    pub fn new(top1: f64, topk: Vec<f64>) -> Self {
        Self { top1, topk }
    }

    /// A token whose only recorded alternative is itself.
    pub fn single(top1: f64) -> Self {
        Self {
            top1,
            topk: vec![top1],
        }
    }

    /// Arithmetic mean of the recorded top-k alternatives.
    pub fn topk_mean(&self) -> f64 {
        self.topk.iter().sum::<f64>() / self.topk.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub tokens: Vec<TokenConfidence>,
}

impl Step {
    pub fn new(tokens: Vec<TokenConfidence>) -> Self {
        Self { tokens }
    }

    /// Builds a step from top-1 confidences only.
    pub fn from_top1(values: &[f64]) -> Self {
        Self {
            tokens: values.iter().copied().map(TokenConfidence::single).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn top1(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.tokens.iter().map(|t| t.top1)
    }
}

/// One agent execution: ordered steps plus an optional success label.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub steps: Vec<Step>,
    pub label: Option<u8>,
    pub meta: BTreeMap<String, String>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, steps: Vec<Step>, label: Option<u8>) -> Self {
        Self {
            id: id.into(),
            steps,
            label,
            meta: BTreeMap::new(),
        }
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.steps.iter().map(Step::len).sum()
    }

    /// The success label as a bool, or an error naming the trajectory.
    pub fn require_label(&self) -> Result<bool> {
        match self.label {
            Some(0) => Ok(false),
            Some(1) => Ok(true),
            Some(other) => Err(Error::InvalidTrajectory {
                id: self.id.clone(),
                violations: vec![ViolationKind::BadLabel(other).to_string()],
            }),
            None => Err(Error::MissingLabel(self.id.clone())),
        }
    }

    /// Copy holding only the first `m` steps.
    pub fn prefix(&self, m: usize) -> Trajectory {
        Trajectory {
            id: self.id.clone(),
            steps: self.steps[..m.min(self.steps.len())].to_vec(),
            label: self.label,
            meta: self.meta.clone(),
        }
    }

    /// Copy whose top-k lists are cut to at most `k` entries.
    pub fn with_topk_limit(&self, k: usize) -> Trajectory {
        let mut out = self.clone();
        for step in &mut out.steps {
            for tok in &mut step.tokens {
                tok.topk.truncate(k.max(1));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    NoSteps,
    EmptyStep,
    NonFinite(f64),
    Top1OutOfRange(f64),
    TopkEmpty,
    TopkOutOfRange(f64),
    TopkNotNonIncreasing,
    TopkHeadMismatch { top1: f64, head: f64 },
    TopkTooLong { len: usize, k: usize },
    BadLabel(u8),
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::NoSteps => write!(f, "trajectory has no steps"),
            ViolationKind::EmptyStep => write!(f, "empty step"),
            ViolationKind::NonFinite(v) => write!(f, "non-finite value {v}"),
            ViolationKind::Top1OutOfRange(v) => write!(f, "top1 = {v} outside (0, 1]"),
            ViolationKind::TopkEmpty => write!(f, "topk list is empty"),
            ViolationKind::TopkOutOfRange(v) => write!(f, "topk value {v} outside (0, 1]"),
            ViolationKind::TopkNotNonIncreasing => write!(f, "topk not non-increasing"),
            ViolationKind::TopkHeadMismatch { top1, head } => {
                write!(f, "topk[0] = {head} differs from top1 = {top1}")
            }
            ViolationKind::TopkTooLong { len, k } => {
                write!(f, "topk has {len} entries, file allows k = {k}")
            }
            ViolationKind::BadLabel(v) => write!(f, "label {v} is not 0 or 1"),
        }
    }
}

/// A broken invariant, located by step and token index when applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub step: Option<usize>,
    pub token: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.step, self.token) {
            (Some(s), Some(t)) => write!(f, "steps[{s}][{t}]: {}", self.kind),
            (Some(s), None) => write!(f, "steps[{s}]: {}", self.kind),
            _ => write!(f, "{}", self.kind),
        }
    }
}

fn in_unit_interval(v: f64) -> bool {
    v > 0.0 && v <= 1.0
}

fn check_token(tok: &TokenConfidence, k: Option<usize>, mut push: impl FnMut(ViolationKind)) {
    if !tok.top1.is_finite() {
        push(ViolationKind::NonFinite(tok.top1));
    } else if !in_unit_interval(tok.top1) {
        push(ViolationKind::Top1OutOfRange(tok.top1));
    }
    let Some(&head) = tok.topk.first() else {
        push(ViolationKind::TopkEmpty);
        return;
    };
    if let Some(&bad) = tok.topk.iter().find(|v| !v.is_finite()) {
        push(ViolationKind::NonFinite(bad));
    } else if let Some(&bad) = tok.topk.iter().find(|&&v| !in_unit_interval(v)) {
        push(ViolationKind::TopkOutOfRange(bad));
    }
    if tok.topk.windows(2).any(|w| w[1] > w[0]) {
        push(ViolationKind::TopkNotNonIncreasing);
    }
    if head != tok.top1 && head.is_finite() && tok.top1.is_finite() {
        push(ViolationKind::TopkHeadMismatch {
            top1: tok.top1,
            head,
        });
    }
    if let Some(k) = k {
        if tok.topk.len() > k {
            push(ViolationKind::TopkTooLong {
                len: tok.topk.len(),
                k,
            });
        }
    }
}

fn collect_violations(t: &Trajectory, k: Option<usize>) -> Vec<Violation> {
    let mut out = Vec::new();
    if t.steps.is_empty() {
        out.push(Violation {
            step: None,
            token: None,
            kind: ViolationKind::NoSteps,
        });
    }
    for (s, step) in t.steps.iter().enumerate() {
        if step.tokens.is_empty() {
            out.push(Violation {
                step: Some(s),
                token: None,
                kind: ViolationKind::EmptyStep,
            });
        }
        for (i, tok) in step.tokens.iter().enumerate() {
            check_token(tok, k, |kind| {
                out.push(Violation {
                    step: Some(s),
                    token: Some(i),
                    kind,
                })
            });
        }
    }
    if let Some(label) = t.label {
        if label > 1 {
            out.push(Violation {
                step: None,
                token: None,
                kind: ViolationKind::BadLabel(label),
            });
        }
    }
    out
}

/// Checks every structural invariant of a trajectory.
pub fn validate_trajectory(t: &Trajectory) -> std::result::Result<(), Vec<Violation>> {
    let violations = collect_violations(t, None);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Like [`validate_trajectory`], returning the crate error type.
pub fn ensure_valid(t: &Trajectory) -> Result<()> {
    validate_trajectory(t).map_err(|v| invalid_error(t, &v))
}

fn invalid_error(t: &Trajectory, violations: &[Violation]) -> Error {
    Error::InvalidTrajectory {
        id: t.id.clone(),
        violations: violations.iter().map(ToString::to_string).collect(),
    }
}

fn token_from_logprobs(top1_lp: f64, topk_lp: &[f64], k: usize) -> Result<TokenConfidence> {
    if let Some(&lp) = std::iter::once(&top1_lp).chain(topk_lp).find(|&&lp| lp > 0.0) {
        return Err(Error::PositiveLogProb(lp));
    }
    if topk_lp.is_empty() {
        return Err(Error::invalid("token has no top-k alternatives"));
    }
    let mut sorted = topk_lp.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.truncate(k.max(1));
    Ok(TokenConfidence {
        top1: top1_lp.exp(),
        topk: sorted.into_iter().map(f64::exp).collect(),
    })
}

/// Builds a trajectory from per-token log-probabilities.
///
/// Each token is `(top1_logprob, topk_logprobs)`. Alternatives are sorted in
/// decreasing order and cut to at most `k` entries.
pub fn from_logprobs(
    id: impl Into<String>,
    step_logprobs: &[Vec<(f64, Vec<f64>)>],
    k: usize,
) -> Result<Trajectory> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    let mut steps = Vec::with_capacity(step_logprobs.len());
    for step in step_logprobs {
        if step.is_empty() {
            return Err(Error::EmptyStep);
        }
        let tokens = step
            .iter()
            .map(|(top1, topk)| token_from_logprobs(*top1, topk, k))
            .collect::<Result<Vec<_>>>()?;
        steps.push(Step { tokens });
    }
    let t = Trajectory::new(id, steps, None);
    ensure_valid(&t)?;
    Ok(t)
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    k: usize,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawToken {
    Prob {
        top1: f64,
        topk: Vec<f64>,
    },
    LogProb {
        top1_lp: f64,
        topk_lp: Vec<f64>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    #[serde(default)]
    label: Option<u8>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    steps: Vec<Vec<RawToken>>,
}

#[derive(Serialize)]
struct OutToken<'a> {
    top1: f64,
    topk: &'a [f64],
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    meta: &'a BTreeMap<String, String>,
    steps: Vec<Vec<OutToken<'a>>>,
}

/// Parsed contents of a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub k: usize,
    pub trajectories: Vec<Trajectory>,
}

impl TraceFile {
    pub fn new(k: usize, trajectories: Vec<Trajectory>) -> Self {
        Self { k, trajectories }
    }

    /// Parses a whole trace file. Line numbers in errors are 1-based and count
    /// the header.
    pub fn parse(bytes: &[u8]) -> Result<TraceFile> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
            line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
            reason: "invalid UTF-8".into(),
        })?;
        if text.trim().is_empty() {
            return Ok(TraceFile::new(DEFAULT_K, Vec::new()));
        }
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header_line) = lines.next().expect("non-empty text has a first line");
        let k = parse_header(header_line)?;
        let mut trajectories = Vec::new();
        for (line, raw) in lines {
            let t = parse_record(raw, k).map_err(|reason| Error::Parse { line, reason })?;
            trajectories.push(t);
        }
        Ok(TraceFile { k, trajectories })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<TraceFile> {
        Self::parse(&fs::read(path)?)
    }

    /// Canonical text form: header plus one record per line, newline-terminated.
    pub fn to_text(&self) -> String {
        let header = Header {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            k: self.k,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for t in &self.trajectories {
            out.push_str(&record_to_line(t));
            out.push('\n');
        }
        out
    }
}

fn parse_header(line: &str) -> Result<usize> {
    let err = |reason: String| Error::Parse { line: 1, reason };
    let header: Header = serde_json::from_str(line.trim())
        .map_err(|e| err(format!("expected trace header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(err(format!("unknown format tag `{}`", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(err(format!("unsupported version {}", header.version)));
    }
    if header.k == 0 {
        return Err(err("k must be positive".into()));
    }
    Ok(header.k)
}

fn parse_record(line: &str, k: usize) -> std::result::Result<Trajectory, String> {
    if line.trim().is_empty() {
        return Err("empty record".into());
    }
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let mut steps = Vec::with_capacity(raw.steps.len());
    for (s, raw_step) in raw.steps.into_iter().enumerate() {
        let mut tokens = Vec::with_capacity(raw_step.len());
        for (i, tok) in raw_step.into_iter().enumerate() {
            let tok = match tok {
                RawToken::Prob { top1, topk } => TokenConfidence { top1, topk },
                RawToken::LogProb { top1_lp, topk_lp } => {
                    token_from_logprobs(top1_lp, &topk_lp, usize::MAX)
                        .map_err(|e| format!("steps[{s}][{i}]: {e}"))?
                }
            };
            tokens.push(tok);
        }
        steps.push(Step { tokens });
    }
    let t = Trajectory {
        id: raw.id,
        steps,
        label: raw.label,
        meta: raw.meta,
    };
    let violations = collect_violations(&t, Some(k));
    if violations.is_empty() {
        Ok(t)
    } else {
        let msgs: Vec<String> = violations.iter().map(ToString::to_string).collect();
        Err(format!("record `{}`: {}", t.id, msgs.join("; ")))
    }
}

fn record_to_line(t: &Trajectory) -> String {
    let rec = OutRecord {
        id: &t.id,
        label: t.label,
        meta: &t.meta,
        steps: t
            .steps
            .iter()
            .map(|s| {
                s.tokens
                    .iter()
                    .map(|tok| OutToken {
                        top1: tok.top1,
                        topk: &tok.topk,
                    })
                    .collect()
            })
            .collect(),
    };
    serde_json::to_string(&rec).expect("record serializes")
}

/// Parses a trace file and returns its trajectories in file order.
pub fn parse_trace_file(bytes: &[u8]) -> Result<Vec<Trajectory>> {
    TraceFile::parse(bytes).map(|f| f.trajectories)
}
