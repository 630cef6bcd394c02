//! Span extraction from BIO sequences and exact-match precision / recall /
//! F1, overall and per entity type.
//!
//! A predicted entity counts as correct only when its type, start and end
//! all equal a gold entity. Overall numbers are micro-averaged: TP/FP/FN
//! are pooled over every sentence and type before the ratios are taken.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use crate::corpus::{label_kind, LabelKind};
use crate::error::{Error, Result};

/// One labeled entity occurrence; `end` is exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn new(entity_type: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            entity_type: entity_type.into(),
            start,
            end,
        }
    }
}

/// Exact-match counts with the derived ratios. All ratios use the
/// zero-denominator-means-zero convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Metrics {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged overall metrics plus per-type breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScoreReport {
    pub overall: Metrics,
    pub per_type: BTreeMap<String, Metrics>,
}

/// Converts a BIO label sequence into entity spans, sorted by start and
/// non-overlapping.
///
/// `B-X` opens a span, following `I-X` extends it, anything else closes
/// it. An `I-X` without an open `X` span opens a new one (lenient
/// recovery); violations are never dropped.
pub fn extract_spans(labels: &[String]) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, label) in labels.iter().enumerate() {
        match label_kind(label)? {
            LabelKind::Outside => {
                if let Some((ty, start)) = open.take() {
                    spans.push(EntitySpan::new(ty, start, i));
                }
            }
            LabelKind::Begin(ty) => {
                if let Some((prev, start)) = open.take() {
                    spans.push(EntitySpan::new(prev, start, i));
                }
                open = Some((ty.to_owned(), i));
            }
            LabelKind::Inside(ty) => match &open {
                Some((prev, _)) if prev == ty => {}
                _ => {
                    if let Some((prev, start)) = open.take() {
                        spans.push(EntitySpan::new(prev, start, i));
                    }
                    open = Some((ty.to_owned(), i));
                }
            },
        }
    }
    if let Some((ty, start)) = open {
        spans.push(EntitySpan::new(ty, start, labels.len()));
    }
    Ok(spans)
}

/// Scores predicted spans against gold spans, sentence by sentence.
/// Both lists must be aligned (same sentence count).
pub fn score(gold: &[Vec<EntitySpan>], pred: &[Vec<EntitySpan>]) -> Result<ScoreReport> {
    if gold.len() != pred.len() {
        return Err(Error::Dimension {
            what: "scored sentence lists",
            expected: format!("{} sentences", gold.len()),
            got: pred.len().to_string(),
        });
    }
    let mut report = ScoreReport::default();
    for (g, p) in gold.iter().zip(pred) {
        let gold_set: HashSet<&EntitySpan> = g.iter().collect();
        for span in p {
            let m = report.per_type.entry(span.entity_type.clone()).or_default();
            if gold_set.contains(span) {
                report.overall.tp += 1;
                m.tp += 1;
            } else {
                report.overall.fp += 1;
                m.fp += 1;
            }
        }
        let pred_set: HashSet<&EntitySpan> = p.iter().collect();
        for span in g {
            if !pred_set.contains(span) {
                report.overall.fn_ += 1;
                report
                    .per_type
                    .entry(span.entity_type.clone())
                    .or_default()
                    .fn_ += 1;
            }
        }
    }
    Ok(report)
}

/// Human-readable table: an overall row plus one row per entry of `types`
/// (types absent from the report print as zeros), three decimals.
pub fn format_report(report: &ScoreReport, types: &[String]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>9} {:>9} {:>9}",
        "", "Precision", "Recall", "F1"
    );
    let mut row = |name: &str, m: &Metrics| {
        let _ = writeln!(
            out,
            "{:<10} {:>9.3} {:>9.3} {:>9.3}",
            name,
            m.precision(),
            m.recall(),
            m.f1()
        );
    };
    row("Overall", &report.overall);
    let zero = Metrics::default();
    for ty in types {
        row(ty, report.per_type.get(ty).unwrap_or(&zero));
    }
    out
}

/// Machine-readable key-value lines mirroring [`format_report`], with raw
/// counts and full-precision ratios.
pub fn format_report_kv(report: &ScoreReport, types: &[String]) -> String {
    let mut out = String::new();
    let zero = Metrics::default();
    let mut emit = |name: &str, m: &Metrics| {
        let _ = writeln!(out, "{name}.tp={}", m.tp);
        let _ = writeln!(out, "{name}.fp={}", m.fp);
        let _ = writeln!(out, "{name}.fn={}", m.fn_);
        let _ = writeln!(out, "{name}.precision={}", m.precision());
        let _ = writeln!(out, "{name}.recall={}", m.recall());
        let _ = writeln!(out, "{name}.f1={}", m.f1());
    };
    emit("overall", &report.overall);
    for ty in types {
        emit(ty, report.per_type.get(ty).unwrap_or(&zero));
    }
    out
}
