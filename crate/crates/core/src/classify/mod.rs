//! Instruction-validity classifiers.
//!
//! A classifier receives rendered snippets, each with a list of queried
//! instruction spans, and answers with the probability that each queried
//! instruction is a real one. The engine never cares which implementation it
//! talks to: the ground-truth oracle, a noisy oracle, a cheap heuristic or a
//! remote model service.

mod queue;
mod remote;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::render::Snippet;

pub use queue::{BatchError, BatchQueue, DEFAULT_BATCH_SIZE};
pub use remote::{RemoteClassifier, CLASSIFIER_URL_ENV};

/// The pipeline stage that issued a request. Requests from different stages
/// are post-processed differently and never share a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Prefilter,
    SingleCheck,
    ReverseTree,
    ReverseSingle,
    ForwardPrefilter,
    ForwardSingle,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Prefilter => "prefilter",
            Stage::SingleCheck => "single-check",
            Stage::ReverseTree => "reverse-tree",
            Stage::ReverseSingle => "reverse-single",
            Stage::ForwardPrefilter => "forward-prefilter",
            Stage::ForwardSingle => "forward-single",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyRequest {
    pub snippet: Snippet,
    /// Parallel to `snippet.word_spans`.
    pub queried: Vec<u64>,
    pub tag: Stage,
}

impl ClassifyRequest {
    pub fn new(snippet: Snippet, tag: Stage) -> Self {
        let queried = snippet.word_spans.iter().map(|s| s.address).collect();
        ClassifyRequest {
            snippet,
            queried,
            tag,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.queried.len() == self.snippet.word_spans.len()
            && self
                .snippet
                .word_spans
                .iter()
                .all(|s| s.start <= s.end && s.end <= self.snippet.text.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResult {
    pub probabilities: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum ClassifyError {
    #[error("transport error (retryable): {0}")]
    Transport(String),
    #[error("classifier rejected the request: {0}")]
    Rejected(String),
    #[error("malformed classifier response: {0}")]
    BadResponse(String),
    #[error("malformed request")]
    BadRequest,
}

impl ClassifyError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClassifyError::Transport(_))
    }
}

pub trait Classifier: Send + Sync {
    /// One result per request, in request order.
    fn classify(&self, batch: &[ClassifyRequest]) -> Result<Vec<ClassifyResult>, ClassifyError>;
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn classify(&self, batch: &[ClassifyRequest]) -> Result<Vec<ClassifyResult>, ClassifyError> {
        (**self).classify(batch)
    }
}

impl<C: Classifier + ?Sized> Classifier for Box<C> {
    fn classify(&self, batch: &[ClassifyRequest]) -> Result<Vec<ClassifyResult>, ClassifyError> {
        (**self).classify(batch)
    }
}

/// Answers from the ground truth: 1.0 for real instruction starts, 0.0 otherwise.
#[derive(Debug, Clone)]
pub struct GroundTruthClassifier {
    truth: BTreeSet<u64>,
}

impl GroundTruthClassifier {
    pub fn new(truth: impl IntoIterator<Item = u64>) -> Self {
        GroundTruthClassifier {
            truth: truth.into_iter().collect(),
        }
    }

    pub fn is_valid(&self, addr: u64) -> bool {
        self.truth.contains(&addr)
    }
}

impl Classifier for GroundTruthClassifier {
    fn classify(&self, batch: &[ClassifyRequest]) -> Result<Vec<ClassifyResult>, ClassifyError> {
        Ok(batch
            .iter()
            .map(|r| ClassifyResult {
                probabilities: r
                    .queried
                    .iter()
                    .map(|a| if self.is_valid(*a) { 1.0 } else { 0.0 })
                    .collect(),
            })
            .collect())
    }
}

/// Probability reported for a "valid" answer by [`NoisyOracle`].
pub const NOISY_HIGH: f64 = 0.99;
/// Probability reported for an "invalid" answer by [`NoisyOracle`].
pub const NOISY_LOW: f64 = 0.01;

/// The ground truth with each address's answer flipped with probability `epsilon`.
///
/// Flips are a pure function of `(seed, address)`: the same address always
/// gets the same answer, and the flipped set for a smaller epsilon is a
/// subset of the one for a larger epsilon.
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    oracle: GroundTruthClassifier,
    epsilon: f64,
    seed: u64,
}

impl NoisyOracle {
    pub fn new(truth: impl IntoIterator<Item = u64>, epsilon: f64, seed: u64) -> Self {
        NoisyOracle {
            oracle: GroundTruthClassifier::new(truth),
            epsilon: epsilon.clamp(0.0, 1.0),
            seed,
        }
    }

    fn flipped(&self, addr: u64) -> bool {
        if self.epsilon <= 0.0 {
            return false;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ addr.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rng.gen::<f64>() < self.epsilon
    }

    pub fn answer(&self, addr: u64) -> f64 {
        if self.oracle.is_valid(addr) != self.flipped(addr) {
            NOISY_HIGH
        } else {
            NOISY_LOW
        }
    }
}

impl Classifier for NoisyOracle {
    fn classify(&self, batch: &[ClassifyRequest]) -> Result<Vec<ClassifyResult>, ClassifyError> {
        Ok(batch
            .iter()
            .map(|r| ClassifyResult {
                probabilities: r.queried.iter().map(|a| self.answer(*a)).collect(),
            })
            .collect())
    }
}

/// Classifier-free baseline working on the instruction text alone.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicClassifier;

const RARE_MNEMONICS: &[&str] = &[
    "in", "ins", "insb", "insd", "insw", "out", "outs", "outsb", "outsd", "outsw", "cli", "sti",
    "hlt", "iret", "iretd", "iretq", "int", "int1", "into", "lgdt", "lidt", "lldt", "ltr", "wrmsr",
    "rdmsr", "invd", "wbinvd", "invlpg", "clts", "lmsw", "sysexit", "sysret", "rsm", "enter",
    "fwait", "wait", "sahf", "lahf", "cmc", "std", "cld", "xlat", "xlatb", "loopne", "loope",
    "jrcxz", "retf", "jmpf", "callf", "arpl", "fnstenv", "fldenv", "frstor", "fsave", "fnsave",
];

impl HeuristicClassifier {
    pub fn score(text: &str) -> f64 {
        let text = text.trim();
        if text == crate::decode::BAD_TEXT || text.is_empty() {
            return 0.0;
        }
        let mut words = text.split_whitespace();
        let mut mnemonic = words.next().unwrap_or_default();
        while matches!(
            mnemonic,
            "lock" | "rep" | "repe" | "repne" | "xacquire" | "xrelease"
        ) {
            mnemonic = words.next().unwrap_or_default();
        }
        if RARE_MNEMONICS.contains(&mnemonic) || text.contains("far ") {
            0.2
        } else {
            0.8
        }
    }
}

impl Classifier for HeuristicClassifier {
    fn classify(&self, batch: &[ClassifyRequest]) -> Result<Vec<ClassifyResult>, ClassifyError> {
        Ok(batch
            .iter()
            .map(|r| ClassifyResult {
                probabilities: (0..r.snippet.word_spans.len())
                    .map(|i| Self::score(r.snippet.word(i)))
                    .collect(),
            })
            .collect())
    }
}

/// Counters kept by [`Memoized`] about what actually reached the inner classifier.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct DispatchStats {
    pub calls: usize,
    pub requests: usize,
    pub queried_instructions: usize,
    pub cache_hits: usize,
}

/// Text hash and span offsets of one request.
type MemoKey = (u64, Vec<(usize, usize)>);

/// Caches answers by snippet text and spans for the lifetime of a run.
pub struct Memoized<C> {
    inner: C,
    cache: Mutex<HashMap<MemoKey, Vec<f64>>>,
    stats: Mutex<DispatchStats>,
}

impl<C: Classifier> Memoized<C> {
    pub fn new(inner: C) -> Self {
        Memoized {
            inner,
            cache: Mutex::new(HashMap::new()),
            stats: Mutex::new(DispatchStats::default()),
        }
    }

    pub fn stats(&self) -> DispatchStats {
        *self.stats.lock().expect("stats lock")
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }

    fn key(r: &ClassifyRequest) -> (u64, Vec<(usize, usize)>) {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        r.snippet.text.hash(&mut h);
        (
            h.finish(),
            r.snippet
                .word_spans
                .iter()
                .map(|s| (s.start, s.end))
                .collect(),
        )
    }
}

impl<C: Classifier> Classifier for Memoized<C> {
    fn classify(&self, batch: &[ClassifyRequest]) -> Result<Vec<ClassifyResult>, ClassifyError> {
        let keys: Vec<_> = batch.iter().map(Self::key).collect();
        let mut out: Vec<Option<ClassifyResult>> = {
            let cache = self.cache.lock().expect("cache lock");
            keys.iter()
                .map(|k| {
                    cache.get(k).map(|p| ClassifyResult {
                        probabilities: p.clone(),
                    })
                })
                .collect()
        };
        let misses: Vec<usize> = (0..batch.len()).filter(|i| out[*i].is_none()).collect();
        {
            let mut stats = self.stats.lock().expect("stats lock");
            stats.cache_hits += batch.len() - misses.len();
        }
        if !misses.is_empty() {
            let reqs: Vec<ClassifyRequest> = misses.iter().map(|i| batch[*i].clone()).collect();
            let results = self.inner.classify(&reqs)?;
            if results.len() != reqs.len() {
                return Err(ClassifyError::BadResponse(format!(
                    "{} results for {} requests",
                    results.len(),
                    reqs.len()
                )));
            }
            let mut stats = self.stats.lock().expect("stats lock");
            stats.calls += 1;
            stats.requests += reqs.len();
            stats.queried_instructions += reqs.iter().map(|r| r.queried.len()).sum::<usize>();
            drop(stats);
            let mut cache = self.cache.lock().expect("cache lock");
            for (i, res) in misses.into_iter().zip(results) {
                if res.probabilities.len() != batch[i].queried.len() {
                    return Err(ClassifyError::BadResponse(format!(
                        "{} probabilities for {} queried instructions",
                        res.probabilities.len(),
                        batch[i].queried.len()
                    )));
                }
                cache.insert(keys[i].clone(), res.probabilities.clone());
                out[i] = Some(res);
            }
        }
        Ok(out.into_iter().map(|r| r.expect("filled above")).collect())
    }
}
