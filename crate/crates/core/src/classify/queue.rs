use super::{Classifier, ClassifyError, ClassifyRequest, ClassifyResult, Stage};

/// Default number of requests per classifier call.
pub const DEFAULT_BATCH_SIZE: usize = 32;

/// A failed flush, carrying the tokens of every request that was in the batch.
#[derive(Debug, thiserror::Error)]
#[error("classifier batch of {} {stage} requests failed: {error}", tokens.len())]
pub struct BatchError<T: std::fmt::Debug> {
    pub stage: Stage,
    pub tokens: Vec<T>,
    #[source]
    pub error: ClassifyError,
}

/// Accumulates requests of a single stage and dispatches them `capacity` at a
/// time. Each request carries a caller token; answered `(token, result)`
/// pairs are collected until [`BatchQueue::take_ready`].
#[derive(Debug)]
pub struct BatchQueue<T> {
    stage: Stage,
    capacity: usize,
    pending: Vec<(T, ClassifyRequest)>,
    ready: Vec<(T, ClassifyResult)>,
}

impl<T: std::fmt::Debug> BatchQueue<T> {
    pub fn new(stage: Stage, capacity: usize) -> Self {
        BatchQueue {
            stage,
            capacity: capacity.max(1),
            pending: Vec::new(),
            ready: Vec::new(),
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Queues a request, flushing when the batch becomes full.
    pub fn push<C: Classifier + ?Sized>(
        &mut self,
        classifier: &C,
        token: T,
        mut request: ClassifyRequest,
    ) -> Result<(), BatchError<T>> {
        request.tag = self.stage;
        if !request.is_well_formed() {
            return Err(BatchError {
                stage: self.stage,
                tokens: vec![token],
                error: ClassifyError::BadRequest,
            });
        }
        self.pending.push((token, request));
        if self.pending.len() >= self.capacity {
            self.flush(classifier)?;
        }
        Ok(())
    }

    /// Dispatches whatever is pending, even a partial batch.
    pub fn flush<C: Classifier + ?Sized>(&mut self, classifier: &C) -> Result<(), BatchError<T>> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let (tokens, requests): (Vec<T>, Vec<ClassifyRequest>) =
            std::mem::take(&mut self.pending).into_iter().unzip();
        // requests without queried spans never reach the classifier
        let live: Vec<ClassifyRequest> = requests
            .iter()
            .filter(|r| !r.queried.is_empty())
            .cloned()
            .collect();
        let answered = if live.is_empty() {
            Ok(Vec::new())
        } else {
            classifier.classify(&live)
        };
        let checked = answered.and_then(|live_results| {
            if live_results.len() != live.len() {
                return Err(ClassifyError::BadResponse(format!(
                    "{} results for {} requests",
                    live_results.len(),
                    live.len()
                )));
            }
            let mut live_results = live_results.into_iter();
            let results: Vec<ClassifyResult> = requests
                .iter()
                .map(|r| {
                    if r.queried.is_empty() {
                        ClassifyResult {
                            probabilities: Vec::new(),
                        }
                    } else {
                        live_results.next().expect("length checked")
                    }
                })
                .collect();
            for (req, res) in requests.iter().zip(&results) {
                if res.probabilities.len() != req.queried.len() {
                    return Err(ClassifyError::BadResponse(format!(
                        "{} probabilities for {} queried instructions",
                        res.probabilities.len(),
                        req.queried.len()
                    )));
                }
                if res.probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(ClassifyError::BadResponse(
                        "probability outside [0, 1]".into(),
                    ));
                }
            }
            Ok(results)
        });
        match checked {
            Ok(results) => {
                self.ready.extend(tokens.into_iter().zip(results));
                Ok(())
            }
            Err(error) => Err(BatchError {
                stage: self.stage,
                tokens,
                error,
            }),
        }
    }

    pub fn take_ready(&mut self) -> Vec<(T, ClassifyResult)> {
        std::mem::take(&mut self.ready)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::GroundTruthClassifier;
    use crate::render::{Snippet, WordSpan};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting<C> {
        inner: C,
        calls: AtomicUsize,
        sizes: std::sync::Mutex<Vec<usize>>,
    }

    impl<C: Classifier> Classifier for Counting<C> {
        fn classify(&self, b: &[ClassifyRequest]) -> Result<Vec<ClassifyResult>, ClassifyError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.sizes.lock().unwrap().push(b.len());
            self.inner.classify(b)
        }
    }

    struct Failing;
    impl Classifier for Failing {
        fn classify(&self, _: &[ClassifyRequest]) -> Result<Vec<ClassifyResult>, ClassifyError> {
            Err(ClassifyError::Transport("down".into()))
        }
    }

    fn req(addr: u64) -> ClassifyRequest {
        ClassifyRequest::new(
            Snippet {
                text: "nop\n".into(),
                word_spans: vec![WordSpan {
                    start: 0,
                    end: 3,
                    address: addr,
                }],
            },
            Stage::SingleCheck,
        )
    }

    #[test]
    fn flushes_at_capacity() {
        let c = Counting {
            inner: GroundTruthClassifier::new([2, 4]),
            calls: AtomicUsize::new(0),
            sizes: Default::default(),
        };
        let mut q = BatchQueue::new(Stage::Prefilter, 3);
        for a in 0..7u64 {
            q.push(&c, a, req(a)).unwrap();
        }
        assert_eq!(c.calls.load(Ordering::SeqCst), 2);
        assert_eq!(q.pending_len(), 1);
        q.flush(&c).unwrap();
        assert_eq!(*c.sizes.lock().unwrap(), vec![3, 3, 1]);
        let ready = q.take_ready();
        let valid: Vec<u64> = ready
            .iter()
            .filter(|(_, r)| r.probabilities[0] > 0.5)
            .map(|(t, _)| *t)
            .collect();
        assert_eq!(valid, vec![2, 4]);
        assert!(q.take_ready().is_empty());
    }

    #[test]
    fn sixty_five_requests() {
        let c = Counting {
            inner: GroundTruthClassifier::new([]),
            calls: AtomicUsize::new(0),
            sizes: Default::default(),
        };
        let mut q = BatchQueue::new(Stage::Prefilter, DEFAULT_BATCH_SIZE);
        for a in 0..65u64 {
            q.push(&c, a, req(a)).unwrap();
        }
        q.flush(&c).unwrap();
        q.flush(&c).unwrap();
        assert_eq!(*c.sizes.lock().unwrap(), vec![32, 32, 1]);
        let order: Vec<u64> = q.take_ready().into_iter().map(|(t, _)| t).collect();
        assert_eq!(order, (0..65).collect::<Vec<_>>());
    }

    #[test]
    fn failure_returns_all_tokens() {
        let mut q = BatchQueue::new(Stage::Prefilter, 4);
        q.push(&Failing, 'a', req(1)).unwrap();
        q.push(&Failing, 'b', req(2)).unwrap();
        let err = q.flush(&Failing).unwrap_err();
        assert_eq!(err.tokens, vec!['a', 'b']);
        assert!(err.error.is_retryable());
        assert_eq!(q.pending_len(), 0);
    }

    #[test]
    fn wrong_result_length_is_rejected() {
        struct Short;
        impl Classifier for Short {
            fn classify(
                &self,
                b: &[ClassifyRequest],
            ) -> Result<Vec<ClassifyResult>, ClassifyError> {
                Ok(b.iter()
                    .map(|_| ClassifyResult {
                        probabilities: vec![],
                    })
                    .collect())
            }
        }
        let mut q = BatchQueue::new(Stage::Prefilter, 1);
        assert!(matches!(
            q.push(&Short, 0, req(1)).unwrap_err().error,
            ClassifyError::BadResponse(_)
        ));
    }
}
