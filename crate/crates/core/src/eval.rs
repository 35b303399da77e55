//! Scoring predicted instruction boundaries against ground truth.
//!
//! A prediction at a real instruction start is a true positive whatever its
//! length. A prediction elsewhere is a false positive only when its bytes
//! overlap a real instruction of the scope: invalid instructions that touch
//! no real code cannot hide anything and are not counted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::Serialize;

use crate::corpus::GroundTruth;
use crate::decode::MAX_INSTRUCTION_LEN;
use crate::initial::CodeRegion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Every real instruction.
    All,
    /// Only the first real instruction after each junk run.
    Junk,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::Junk => "junk",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize, undefined: &mut bool) -> f64 {
    if den == 0 {
        *undefined = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Score {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let mut undefined = false;
        let precision = ratio(counts.tp, counts.tp + counts.fp, &mut undefined);
        let recall = ratio(counts.tp, counts.tp + counts.fn_, &mut undefined);
        Score {
            precision,
            recall,
            f1: f1(precision, recall),
            counts,
            undefined,
        }
    }
}

/// Real instruction spans plus the junk-scope subset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TruthSpans {
    spans: BTreeMap<u64, u8>,
    first_after_junk: BTreeSet<u64>,
}

impl TruthSpans {
    pub fn new(
        spans: impl IntoIterator<Item = (u64, u8)>,
        first_after_junk: BTreeSet<u64>,
    ) -> Self {
        TruthSpans {
            spans: spans.into_iter().collect(),
            first_after_junk,
        }
    }

    pub fn from_sample(region: &CodeRegion, truth: &GroundTruth) -> Self {
        Self::new(truth.spans(region), truth.first_after_junk.clone())
    }

    fn in_scope(&self, addr: u64, scope: Scope) -> bool {
        match scope {
            Scope::All => self.spans.contains_key(&addr),
            Scope::Junk => self.first_after_junk.contains(&addr),
        }
    }

    fn scope_starts(&self, scope: Scope) -> BTreeSet<u64> {
        match scope {
            Scope::All => self.spans.keys().copied().collect(),
            Scope::Junk => self.first_after_junk.clone(),
        }
    }

    fn overlaps_scope(&self, start: u64, len: u8, scope: Scope) -> bool {
        let end = start + u64::from(len);
        let lo = start.saturating_sub(MAX_INSTRUCTION_LEN as u64);
        self.spans
            .range(lo..end)
            .any(|(s, l)| s + u64::from(*l) > start && self.in_scope(*s, scope))
    }
}

/// Scores `(address, length)` predictions. Duplicate addresses count once.
pub fn score(predicted: &[(u64, u8)], truth: &TruthSpans, scope: Scope) -> Score {
    let predicted: BTreeMap<u64, u8> = predicted.iter().copied().collect();
    let starts = truth.scope_starts(scope);
    let tp = starts.iter().filter(|a| predicted.contains_key(a)).count();
    let fn_ = starts.len() - tp;
    let fp = predicted
        .iter()
        .filter(|(a, _)| !truth.spans.contains_key(a))
        .filter(|(a, l)| truth.overlaps_scope(**a, **l, scope))
        .count();
    Score::from_counts(ConfusionCounts { tp, fp, fn_ })
}

/// Both scopes for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Report {
    pub all: Score,
    pub junk: Score,
}

pub const CSV_HEADER: &str = "scope,precision,recall,f1,tp,fp,fn";

impl Report {
    pub fn new(predicted: &[(u64, u8)], truth: &TruthSpans) -> Self {
        Report {
            all: score(predicted, truth, Scope::All),
            junk: score(predicted, truth, Scope::Junk),
        }
    }

    /// Sums the counts of several runs and recomputes the ratios.
    pub fn aggregate<'r>(reports: impl IntoIterator<Item = &'r Report>) -> Report {
        let mut all = ConfusionCounts::default();
        let mut junk = ConfusionCounts::default();
        for r in reports {
            for (acc, c) in [(&mut all, r.all.counts), (&mut junk, r.junk.counts)] {
                acc.tp += c.tp;
                acc.fp += c.fp;
                acc.fn_ += c.fn_;
            }
        }
        Report {
            all: Score::from_counts(all),
            junk: Score::from_counts(junk),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (scope, s) in [(Scope::All, &self.all), (Scope::Junk, &self.junk)] {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{},{},{}",
                scope.name(),
                s.precision,
                s.recall,
                s.f1,
                s.counts.tp,
                s.counts.fp,
                s.counts.fn_
            );
        }
        out
    }

    /// One row per run, Precision/Recall/F1 grouped under All and Junk.
    pub fn to_table(&self, name: &str) -> String {
        let w = name.len().max(8);
        let mut out = String::new();
        let _ = writeln!(out, "{:w$} | {:^24} | {:^24}", "", "All", "Junk");
        let _ = writeln!(
            out,
            "{:w$} | {:>9} {:>7} {:>6} | {:>9} {:>7} {:>6}",
            "", "Precision", "Recall", "F1", "Precision", "Recall", "F1"
        );
        let _ = writeln!(
            out,
            "{:w$} | {:>9.3} {:>7.3} {:>6.3} | {:>9.3} {:>7.3} {:>6.3}",
            name,
            self.all.precision,
            self.all.recall,
            self.all.f1,
            self.junk.precision,
            self.junk.recall,
            self.junk.f1
        );
        out
    }
}
