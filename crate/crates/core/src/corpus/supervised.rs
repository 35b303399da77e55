//! Token-classification entries recorded from a pipeline run driven by the
//! ground truth.

use std::collections::BTreeSet;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::GroundTruth;
use crate::classify::{
    Classifier, ClassifyError, ClassifyRequest, ClassifyResult, GroundTruthClassifier,
};
use crate::initial::CodeRegion;
use crate::pipeline::{Engine, FinalListing, PipelineConfig, PipelineError};

/// Label of a queried instruction that is real.
pub const LABEL_VALID: i32 = 1;
/// Label of a queried instruction that is not.
pub const LABEL_INVALID: i32 = 0;
/// Label of text the loss ignores.
pub const LABEL_IGNORE: i32 = -100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisedEntry {
    pub words: Vec<String>,
    pub labels: Vec<i32>,
}

impl SupervisedEntry {
    pub fn labelled_count(&self) -> usize {
        self.labels.iter().filter(|l| **l != LABEL_IGNORE).count()
    }
}

/// Splits a request's snippet so each queried instruction is its own word.
/// Text between queried instructions becomes ignored words.
pub fn entry_from_request(req: &ClassifyRequest, truth: &BTreeSet<u64>) -> SupervisedEntry {
    let mut words = Vec::new();
    let mut labels = Vec::new();
    let push_ignored = |s: &str, words: &mut Vec<String>, labels: &mut Vec<i32>| {
        let s = s.trim();
        if !s.is_empty() {
            words.push(s.to_string());
            labels.push(LABEL_IGNORE);
        }
    };
    let text = &req.snippet.text;
    let mut at = 0;
    for (span, addr) in req.snippet.word_spans.iter().zip(&req.queried) {
        push_ignored(&text[at..span.start], &mut words, &mut labels);
        words.push(text[span.start..span.end].to_string());
        labels.push(if truth.contains(addr) {
            LABEL_VALID
        } else {
            LABEL_INVALID
        });
        at = span.end;
    }
    push_ignored(&text[at..], &mut words, &mut labels);
    SupervisedEntry { words, labels }
}

/// Passes requests through to `inner` and keeps a copy of each.
pub struct Recorder<C> {
    inner: C,
    log: Mutex<Vec<ClassifyRequest>>,
}

impl<C: Classifier> Recorder<C> {
    pub fn new(inner: C) -> Self {
        Recorder {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn take(&self) -> Vec<ClassifyRequest> {
        std::mem::take(&mut *self.log.lock().expect("log lock"))
    }
}

impl<C: Classifier> Classifier for Recorder<C> {
    fn classify(&self, batch: &[ClassifyRequest]) -> Result<Vec<ClassifyResult>, ClassifyError> {
        self.log
            .lock()
            .expect("log lock")
            .extend(batch.iter().cloned());
        self.inner.classify(batch)
    }
}

#[derive(Debug, Clone)]
pub struct SupervisedRun {
    pub entries: Vec<SupervisedEntry>,
    /// Queried instructions the engine sent to the classifier.
    pub queried_instructions: usize,
    pub listing: FinalListing,
}

/// Runs the pipeline with the ground truth as classifier and records every
/// classifier request as one entry.
pub fn emit_supervised_entries(
    region: &CodeRegion,
    truth: &GroundTruth,
    config: &PipelineConfig,
) -> Result<SupervisedRun, PipelineError> {
    let recorder = Recorder::new(GroundTruthClassifier::new(
        truth.instruction_starts.iter().copied(),
    ));
    let mut engine = Engine::from_region(region, &recorder, config.clone())?;
    engine.run_in_place()?;
    let queried_instructions = engine.dispatch_stats().queried_instructions;
    let listing = engine.listing();
    let entries = recorder
        .take()
        .iter()
        .map(|r| entry_from_request(r, &truth.instruction_starts))
        .collect();
    Ok(SupervisedRun {
        entries,
        queried_instructions,
        listing,
    })
}
