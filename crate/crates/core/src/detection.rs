//! Top-k decision rule, per-session verdicts and precision/recall/F1.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_proba, ModelConfig, ModelParams};
use crate::pipeline::{window_session, EncodedSession, EventId, Label, Vocabulary};
use crate::tensor::Matrix;

/// Anything that scores the next event of fixed-length windows.
///
/// Column `i` of the returned matrix scores [`EventId`] `i + 1`; higher is
/// more likely. Scores only need to be comparable within a row.
pub trait NextEventModel {
    fn num_events(&self) -> usize;
    fn window_len(&self) -> usize;
    fn scores(&self, windows: &[&[EventId]]) -> Result<Matrix>;
}

/// The attention network as a [`NextEventModel`] (eval mode).
#[derive(Clone, Copy)]
pub struct AttentionModel<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
}

impl<'a> AttentionModel<'a> {
    pub fn new(params: &'a ModelParams, config: &'a ModelConfig) -> Self {
        AttentionModel { params, config }
    }
}

impl NextEventModel for AttentionModel<'_> {
    fn num_events(&self) -> usize {
        self.config.num_events
    }

    fn window_len(&self) -> usize {
        self.config.window
    }

    fn scores(&self, windows: &[&[EventId]]) -> Result<Matrix> {
        predict_proba(windows, self.params, self.config)
    }
}

/// The `k` best events of a score row, best first; ties go to the lower id.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<EventId>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_rank);
        idx.truncate(k);
    }
    idx.sort_by(by_rank);
    Ok(idx.into_iter().map(EventId::from_class_index).collect())
}

pub fn predict_topk(
    window: &[EventId],
    params: &ModelParams,
    config: &ModelConfig,
    k: usize,
) -> Result<Vec<EventId>> {
    let probs = predict_proba(&[window], params, config)?;
    top_k(probs.row(0), k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Normal,
    SequenceAnomaly,
    OovAnomaly,
}

impl Verdict {
    pub fn is_anomaly(self) -> bool {
        self != Verdict::Normal
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Normal => "normal",
            Verdict::SequenceAnomaly => "sequence-anomaly",
            Verdict::OovAnomaly => "oov-anomaly",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Verdict::Normal),
            "sequence-anomaly" => Ok(Verdict::SequenceAnomaly),
            "oov-anomaly" => Ok(Verdict::OovAnomaly),
            other => Err(Error::InvalidArgument(format!("unknown verdict `{other}`"))),
        }
    }
}

/// A window whose true next event was not among the top-k candidates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Index of the mispredicted event in the session.
    pub target_index: usize,
    pub truth: EventId,
    pub top_k: Vec<EventId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionVerdict {
    pub session_id: Arc<str>,
    pub verdict: Verdict,
    pub first_violation: Option<Violation>,
    /// Position of the first unseen event for OOV verdicts.
    pub oov_index: Option<usize>,
    /// Number of violating windows found (at most one unless scanning exhaustively).
    pub violations: usize,
}

/// Whether to stop scanning a session at its first violating window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScanMode {
    #[default]
    FirstMiss,
    Exhaustive,
}

/// Model scores for every window of a session, reusable across values of k.
#[derive(Clone, Debug)]
pub struct ScoredSession {
    pub session_id: Arc<str>,
    pub oov_index: Option<usize>,
    /// `(target_index, truth)` per window, aligned with the rows of `scores`.
    pub targets: Vec<(usize, EventId)>,
    pub scores: Matrix,
}

impl ScoredSession {
    pub fn verdict(&self, k: usize, mode: ScanMode) -> Result<SessionVerdict> {
        let mut out = SessionVerdict {
            session_id: self.session_id.clone(),
            verdict: Verdict::Normal,
            first_violation: None,
            oov_index: self.oov_index,
            violations: 0,
        };
        if self.oov_index.is_some() {
            out.verdict = Verdict::OovAnomaly;
            return Ok(out);
        }
        for (row, &(target_index, truth)) in self.targets.iter().enumerate() {
            let candidates = top_k(self.scores.row(row), k)?;
            if candidates.contains(&truth) {
                continue;
            }
            out.verdict = Verdict::SequenceAnomaly;
            out.violations += 1;
            if out.first_violation.is_none() {
                out.first_violation = Some(Violation {
                    target_index,
                    truth,
                    top_k: candidates,
                });
            }
            if mode == ScanMode::FirstMiss {
                break;
            }
        }
        Ok(out)
    }
}

/// Window rows scored per model call.
const SCORE_CHUNK: usize = 512;

/// Scores every window of every session. OOV sessions are never shown to the model.
pub fn score_sessions(sessions: &[EncodedSession], model: &dyn NextEventModel) -> Result<Vec<ScoredSession>> {
    let l = model.window_len();
    let n = model.num_events();
    let mut per_session = Vec::with_capacity(sessions.len());
    let mut all_windows: Vec<Vec<EventId>> = Vec::new();
    for enc in sessions {
        if enc.contains_oov {
            per_session.push((Vec::new(), enc.first_oov()));
            continue;
        }
        let samples = window_session(enc, l)?;
        let targets: Vec<(usize, EventId)> = samples
            .iter()
            .map(|s| (s.origin.target_index, s.target))
            .collect();
        all_windows.extend(samples.into_iter().map(|s| s.window));
        per_session.push((targets, None));
    }

    let mut scores = Matrix::zeros(all_windows.len(), n);
    for (c, chunk) in all_windows.chunks(SCORE_CHUNK).enumerate() {
        let refs: Vec<&[EventId]> = chunk.iter().map(Vec::as_slice).collect();
        let s = model.scores(&refs)?;
        if s.shape() != (chunk.len(), n) {
            return Err(Error::Shape {
                op: "scores",
                left: s.shape(),
                right: (chunk.len(), n),
            });
        }
        for r in 0..chunk.len() {
            scores.row_mut(c * SCORE_CHUNK + r).copy_from_slice(s.row(r));
        }
    }

    let mut offset = 0;
    Ok(sessions
        .iter()
        .zip(per_session)
        .map(|(enc, (targets, oov_index))| {
            let rows = targets.len();
            let mut block = Matrix::zeros(rows, n);
            for r in 0..rows {
                block.row_mut(r).copy_from_slice(scores.row(offset + r));
            }
            offset += rows;
            ScoredSession {
                session_id: enc.session_id.clone(),
                oov_index,
                targets,
                scores: block,
            }
        })
        .collect())
}

/// Classifies one session: OOV short-circuits, otherwise the first window
/// whose truth is outside the top-k makes the session a sequence anomaly.
pub fn classify_session(enc: &EncodedSession, model: &dyn NextEventModel, k: usize) -> Result<SessionVerdict> {
    check_k(k, model)?;
    if enc.contains_oov {
        return ScoredSession {
            session_id: enc.session_id.clone(),
            oov_index: enc.first_oov(),
            targets: Vec::new(),
            scores: Matrix::zeros(0, model.num_events()),
        }
        .verdict(k, ScanMode::FirstMiss);
    }
    score_sessions(std::slice::from_ref(enc), model)?[0].verdict(k, ScanMode::FirstMiss)
}

/// Classifies sessions in input order.
pub fn classify_sessions(
    sessions: &[EncodedSession],
    model: &dyn NextEventModel,
    k: usize,
    mode: ScanMode,
) -> Result<Vec<SessionVerdict>> {
    check_k(k, model)?;
    score_sessions(sessions, model)?
        .iter()
        .map(|s| s.verdict(k, mode))
        .collect()
}

fn check_k(k: usize, model: &dyn NextEventModel) -> Result<()> {
    if k == 0 || k > model.num_events() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            model.num_events()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricsMode {
    /// Sessions flagged for OOV events are left out of the counts.
    WithoutOov,
    /// Every session counts.
    WithOov,
}

impl MetricsMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricsMode::WithoutOov => "without-oov",
            MetricsMode::WithOov => "with-oov",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mode: MetricsMode,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    /// Derives precision, recall and F1 from counts; empty denominators give 0.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64, mode: MetricsMode) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            mode,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "mode: {}\ntp: {}\nfp: {}\nfn: {}\ntn: {}\nprecision: {:.6}\nrecall: {:.6}\nf1: {:.6}\n",
            self.mode.as_str(),
            self.tp,
            self.fp,
            self.fn_,
            self.tn,
            self.precision,
            self.recall,
            self.f1
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }
}

/// Session-level confusion counts of `(session_id, verdict)` pairs against labels.
pub fn evaluate<'a, I>(outcomes: I, labels: &HashMap<String, Label>, mode: MetricsMode) -> Result<Metrics>
where
    I: IntoIterator<Item = (&'a str, Verdict)>,
{
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (id, verdict) in outcomes {
        let truth = labels.get(id).ok_or_else(|| Error::MissingLabel(id.to_string()))?;
        if mode == MetricsMode::WithoutOov && verdict == Verdict::OovAnomaly {
            continue;
        }
        match (verdict.is_anomaly(), truth.is_anomaly()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_, tn, mode))
}

/// Convenience over [`evaluate`] for verdict slices.
pub fn evaluate_verdicts(verdicts: &[SessionVerdict], labels: &HashMap<String, Label>, mode: MetricsMode) -> Result<Metrics> {
    evaluate(verdicts.iter().map(|v| (v.session_id.as_ref(), v.verdict)), labels, mode)
}

fn format_detail(v: &SessionVerdict, vocab: &Vocabulary) -> String {
    match v.verdict {
        Verdict::Normal => "-".to_string(),
        Verdict::OovAnomaly => match v.oov_index {
            Some(i) => format!("oov_at={i}"),
            None => "oov".to_string(),
        },
        Verdict::SequenceAnomaly => match &v.first_violation {
            Some(viol) => {
                let cands: Vec<String> = viol.top_k.iter().map(|e| vocab.describe(*e)).collect();
                format!(
                    "at={} truth={} topk={}",
                    viol.target_index,
                    vocab.describe(viol.truth),
                    cands.join(",")
                )
            }
            None => "-".to_string(),
        },
    }
}

/// Writes `session_id<TAB>verdict<TAB>detail` lines.
pub fn write_report<W: Write>(mut out: W, verdicts: &[SessionVerdict], vocab: &Vocabulary) -> Result<()> {
    for v in verdicts {
        writeln!(out, "{}\t{}\t{}", v.session_id, v.verdict, format_detail(v, vocab))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportLine {
    pub session_id: String,
    pub verdict: Verdict,
    pub detail: String,
}

pub fn parse_report<R: BufRead>(input: R) -> Result<Vec<ReportLine>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(verdict)) = (parts.next(), parts.next()) else {
            return Err(Error::Parse {
                line: i + 1,
                message: "expected `session_id<TAB>verdict<TAB>detail`".into(),
            });
        };
        let verdict = verdict.parse().map_err(|e: Error| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ReportLine {
            session_id: id.to_string(),
            verdict,
            detail: parts.next().unwrap_or("").to_string(),
        });
    }
    Ok(out)
}
