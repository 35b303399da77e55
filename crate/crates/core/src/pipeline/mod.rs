//! Checking and fixing of a disassembly graph.
//!
//! The engine classifies every decoded instruction (a windowed prefilter
//! with confident thresholds, then one-by-one checks with validity
//! annotations in the context), tracks which bytes are valid, invalid or
//! unidentified, and repairs every invalid range that sits between two valid
//! ranges: first by growing the right-hand valid range backwards (reverse
//! infilling), then by scanning the rest for short valid blocks (forward
//! infilling).

mod config;
mod listing;
mod regions;
mod verdict;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::classify::{
    BatchError, BatchQueue, Classifier, ClassifyError, ClassifyRequest, DispatchStats, Memoized,
    Stage,
};
use crate::context::{extract_context_blocks, referenced_addresses, related_instructions};
use crate::decode::{InstrKind, Instruction};
use crate::graph::{minimize_overlap, Block, BlockId, DisasmGraph, EdgeKind};
use crate::initial::{initial_disassemble, CodeRegion};
use crate::render::{render_blocks, Annotation};

pub use config::{ConfigError, PipelineConfig};
pub use listing::{DataByte, FinalListing, ListedInstruction};
pub use regions::{rebuild_regions, LabeledRange, RegionLabel, RegionMap};
pub use verdict::{Verdict, VerdictEntry, VerdictStore};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("classifier failed during {stage} (instructions {addresses:#x?}): {source}")]
    Classify {
        stage: Stage,
        addresses: Vec<u64>,
        #[source]
        source: ClassifyError,
    },
}

/// Counters describing what a run did.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub prefilter_requests: usize,
    pub single_requests: usize,
    pub deleted_blocks: usize,
    pub repaired_ranges: usize,
    pub reverse_accepted: usize,
    pub forward_accepted: usize,
}

pub struct Engine<'a> {
    region: &'a CodeRegion,
    graph: DisasmGraph,
    verdicts: VerdictStore,
    classifier: Memoized<&'a dyn Classifier>,
    config: PipelineConfig,
    stats: RunStats,
}

/// Builds the initial graph of `region` and runs the whole pipeline on it.
pub fn run(
    region: &CodeRegion,
    classifier: &dyn Classifier,
    config: &PipelineConfig,
) -> Result<FinalListing, PipelineError> {
    Engine::from_region(region, classifier, config.clone())?.run()
}

impl<'a> Engine<'a> {
    pub fn new(
        region: &'a CodeRegion,
        graph: DisasmGraph,
        classifier: &'a dyn Classifier,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Engine {
            region,
            graph,
            verdicts: VerdictStore::new(),
            classifier: Memoized::new(classifier),
            config,
            stats: RunStats::default(),
        })
    }

    pub fn from_region(
        region: &'a CodeRegion,
        classifier: &'a dyn Classifier,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        Self::new(region, initial_disassemble(region), classifier, config)
    }

    pub fn graph(&self) -> &DisasmGraph {
        &self.graph
    }

    pub fn verdicts(&self) -> &VerdictStore {
        &self.verdicts
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    /// What reached the classifier, after memoization.
    pub fn dispatch_stats(&self) -> DispatchStats {
        self.classifier.stats()
    }

    pub fn regions(&self) -> RegionMap {
        rebuild_regions(self.region, &self.graph, &self.verdicts)
    }

    /// Full run: check, fix, and list the valid instructions.
    pub fn run(mut self) -> Result<FinalListing, PipelineError> {
        self.run_in_place()?;
        Ok(self.listing())
    }

    pub fn run_in_place(&mut self) -> Result<(), PipelineError> {
        self.prefilter_pass()?;
        self.single_check_pass()?;
        self.fix_pass()
    }

    pub fn listing(&self) -> FinalListing {
        FinalListing::build(
            self.region,
            self.graph
                .instructions()
                .filter(|i| self.verdicts.is_valid(i.address)),
        )
    }

    /// Classifies windows of up to `window` adjacent pending instructions,
    /// committing only confident answers, then deletes blocks that are
    /// entirely invalid.
    pub fn prefilter_pass(&mut self) -> Result<(), PipelineError> {
        minimize_overlap(&mut self.graph);
        let mut windows: Vec<BTreeSet<u64>> = Vec::new();
        for block in self.graph.blocks() {
            let mut cur = BTreeSet::new();
            for ins in block.instructions() {
                if self.verdicts.verdict(ins.address).is_some() {
                    if !cur.is_empty() {
                        windows.push(std::mem::take(&mut cur));
                    }
                    continue;
                }
                cur.insert(ins.address);
                if cur.len() == self.config.window {
                    windows.push(std::mem::take(&mut cur));
                }
            }
            if !cur.is_empty() {
                windows.push(cur);
            }
        }
        let requests: Vec<ClassifyRequest> = windows
            .iter()
            .map(|w| self.request(w, false, Stage::Prefilter))
            .collect();
        self.stats.prefilter_requests += requests.len();
        for (addr, p) in self
            .dispatch(Stage::Prefilter, requests)?
            .into_iter()
            .flatten()
        {
            self.decide_confident(addr, p, Stage::Prefilter);
        }

        let dead: Vec<BlockId> = self
            .graph
            .blocks()
            .filter(|b| {
                b.instructions()
                    .iter()
                    .all(|i| self.verdicts.is_invalid(i.address))
            })
            .map(|b| b.id())
            .collect();
        self.stats.deleted_blocks += dead.len();
        for id in dead {
            self.graph.remove_block(id);
        }
        minimize_overlap(&mut self.graph);
        Ok(())
    }

    /// Decides every remaining pending instruction on its own, with the
    /// verdicts of its context shown as annotations.
    pub fn single_check_pass(&mut self) -> Result<(), PipelineError> {
        let pending: Vec<u64> = self
            .graph
            .instruction_addresses()
            .filter(|a| self.verdicts.verdict(*a).is_none())
            .collect();
        let requests: Vec<ClassifyRequest> = pending
            .iter()
            .map(|a| self.request(&BTreeSet::from([*a]), true, Stage::SingleCheck))
            .collect();
        self.stats.single_requests += requests.len();
        for (addr, p) in self
            .dispatch(Stage::SingleCheck, requests)?
            .into_iter()
            .flatten()
        {
            self.decide_threshold(addr, p, Stage::SingleCheck);
        }
        Ok(())
    }

    /// Repairs invalid ranges between valid ranges until nothing changes.
    /// Blocks found by forward infilling create new valid anchors, so the
    /// ranges they split off are repaired in a later round.
    pub fn fix_pass(&mut self) -> Result<(), PipelineError> {
        let mut done: BTreeSet<(u64, u64)> = BTreeSet::new();
        loop {
            let todo: Vec<LabeledRange> = self
                .regions()
                .repairable()
                .into_iter()
                .filter(|r| !done.contains(&(r.start, r.end)))
                .collect();
            if todo.is_empty() {
                return Ok(());
            }
            for r in todo {
                done.insert((r.start, r.end));
                self.repair_range(r.start, r.end)?;
            }
        }
    }

    fn repair_range(&mut self, start: u64, end: u64) -> Result<(), PipelineError> {
        self.stats.repaired_ranges += 1;
        let invalid: BTreeSet<u64> = self
            .graph
            .instruction_addresses_in(start..end)
            .filter(|a| self.verdicts.is_invalid(*a))
            .collect();
        self.graph.remove_instructions(&invalid);
        let valid_start = self.reverse_infill(start, end)?;
        self.forward_infill(start, valid_start)?;
        Ok(())
    }

    /// Grows the valid range starting at `root` backwards, never below
    /// `floor`. Returns the new start of the valid range.
    pub fn reverse_infill(&mut self, floor: u64, root: u64) -> Result<u64, PipelineError> {
        let view = self.region.view();
        let mut start = root;
        loop {
            // batch mode: a breadth-first slice of the reverse tree at once
            loop {
                let excluded = self.invalid_addresses(floor, start);
                let cands: Vec<Instruction> = view
                    .reverse_tree_bfs(start, floor, &excluded, self.config.window)
                    .into_iter()
                    .filter(|c| self.graph.instruction(c.address).is_none())
                    .collect();
                if cands.is_empty() {
                    break;
                }
                let probs = self.classify_candidates(&cands, Stage::ReverseTree, false)?;
                for c in &cands {
                    if probs[&c.address] < self.config.lo {
                        self.decide(
                            c.address,
                            c.length,
                            Verdict::Invalid,
                            probs[&c.address],
                            Stage::ReverseTree,
                        );
                    }
                }
                let mut chain = Vec::new();
                let mut cur = start;
                while let Some(best) = best_candidate(
                    cands
                        .iter()
                        .filter(|c| c.end() == cur && probs[&c.address] > self.config.hi),
                    &probs,
                ) {
                    chain.push(best.clone());
                    cur = best.address;
                }
                if chain.is_empty() {
                    break;
                }
                for c in &chain {
                    self.decide(
                        c.address,
                        c.length,
                        Verdict::Valid,
                        probs[&c.address],
                        Stage::ReverseTree,
                    );
                }
                self.stats.reverse_accepted += chain.len();
                chain.reverse();
                self.insert_run(chain);
                start = cur;
            }

            // single mode: only the instructions ending right at the start
            let excluded = self.invalid_addresses(floor, start);
            let cands: Vec<Instruction> = view
                .instructions_ending_at(start, floor, &excluded)
                .into_iter()
                .filter(|c| self.graph.instruction(c.address).is_none())
                .collect();
            if cands.is_empty() {
                return Ok(start);
            }
            let probs = self.classify_candidates(&cands, Stage::ReverseSingle, true)?;
            let best = best_candidate(cands.iter(), &probs)
                .filter(|b| probs[&b.address] > self.config.single_threshold)
                .cloned();
            for c in &cands {
                if best.as_ref().map(|b| b.address) != Some(c.address) {
                    self.decide(
                        c.address,
                        c.length,
                        Verdict::Invalid,
                        probs[&c.address],
                        Stage::ReverseSingle,
                    );
                }
            }
            let Some(best) = best else {
                return Ok(start);
            };
            self.decide(
                best.address,
                best.length,
                Verdict::Valid,
                probs[&best.address],
                Stage::ReverseSingle,
            );
            self.stats.reverse_accepted += 1;
            start = best.address;
            self.insert_run(vec![best]);
        }
    }

    /// Looks for valid blocks in `[start, end)`, left to right.
    pub fn forward_infill(&mut self, start: u64, end: u64) -> Result<(), PipelineError> {
        let view = self.region.view();
        let mut cursor = start;
        while cursor < end {
            if self.verdicts.is_invalid(cursor) || self.graph.instruction(cursor).is_some() {
                cursor += 1;
                continue;
            }
            let mut run: Vec<Instruction> = Vec::new();
            let mut at = cursor;
            while at < end {
                if at != cursor && self.graph.instruction(at).is_some() {
                    break;
                }
                let Some(ins) = view.decode(at) else { break };
                if ins.end() > end {
                    break;
                }
                at = ins.end();
                let stop = ins.kind.ends_block();
                run.push(ins);
                if stop {
                    break;
                }
            }
            if run.is_empty() {
                cursor += 1;
                continue;
            }

            let addrs: Vec<u64> = run.iter().map(|i| i.address).collect();
            let lengths: BTreeMap<u64, u8> = run.iter().map(|i| (i.address, i.length)).collect();
            self.graph
                .insert_block(Block::new(run.clone()).expect("linear decode"))
                .expect("forward candidates are not in the graph");

            let pending: BTreeSet<u64> = addrs
                .iter()
                .copied()
                .filter(|a| self.verdicts.verdict(*a).is_none())
                .collect();
            let answers = if pending.is_empty() {
                Ok(Vec::new())
            } else {
                let req = self.request(&pending, true, Stage::ForwardPrefilter);
                self.dispatch(Stage::ForwardPrefilter, vec![req])
            };
            let answers = match answers {
                Ok(a) => a,
                Err(e) => {
                    self.remove_temporary(&addrs);
                    return Err(e);
                }
            };
            for (a, p) in answers.into_iter().flatten() {
                if p > self.config.hi {
                    self.decide(a, lengths[&a], Verdict::Valid, p, Stage::ForwardPrefilter);
                } else if p < self.config.lo {
                    self.decide(a, lengths[&a], Verdict::Invalid, p, Stage::ForwardPrefilter);
                }
            }
            let rest: Vec<u64> = addrs
                .iter()
                .copied()
                .filter(|a| self.verdicts.verdict(*a).is_none())
                .collect();
            let requests: Vec<ClassifyRequest> = rest
                .iter()
                .map(|a| self.request(&BTreeSet::from([*a]), true, Stage::ForwardSingle))
                .collect();
            let answers = match self.dispatch(Stage::ForwardSingle, requests) {
                Ok(a) => a,
                Err(e) => {
                    self.remove_temporary(&addrs);
                    return Err(e);
                }
            };
            for (a, p) in answers.into_iter().flatten() {
                let v = if p >= self.config.single_threshold {
                    Verdict::Valid
                } else {
                    Verdict::Invalid
                };
                self.decide(a, lengths[&a], v, p, Stage::ForwardSingle);
            }
            self.remove_temporary(&addrs);

            let valid: Vec<Instruction> = run
                .into_iter()
                .filter(|i| self.verdicts.is_valid(i.address))
                .collect();
            let Some(last_end) = valid.last().map(|i| i.end()) else {
                cursor += 1;
                continue;
            };
            self.stats.forward_accepted += valid.len();
            let mut piece: Vec<Instruction> = Vec::new();
            for ins in valid {
                if piece.last().is_some_and(|p| p.end() != ins.address) {
                    self.insert_run(std::mem::take(&mut piece));
                }
                piece.push(ins);
            }
            self.insert_run(piece);
            cursor = last_end;
        }
        Ok(())
    }

    /// Classifies instructions that are not in the graph by inserting them
    /// as single-instruction blocks for the duration of the request.
    fn classify_candidates(
        &mut self,
        cands: &[Instruction],
        stage: Stage,
        one_by_one: bool,
    ) -> Result<BTreeMap<u64, f64>, PipelineError> {
        for c in cands {
            self.graph
                .insert_block(Block::new(vec![c.clone()]).expect("single instruction"))
                .expect("candidates are not in the graph");
        }
        for c in cands {
            if self.graph.instruction(c.end()).is_some() {
                let _ = self
                    .graph
                    .add_reference(c.address, c.end(), EdgeKind::SplitContinuation);
            }
        }
        let targets: Vec<BTreeSet<u64>> = if one_by_one {
            cands.iter().map(|c| BTreeSet::from([c.address])).collect()
        } else {
            vec![cands.iter().map(|c| c.address).collect()]
        };
        let requests = targets
            .iter()
            .map(|t| self.request(t, true, stage))
            .collect();
        let answers = self.dispatch(stage, requests);
        let addrs: Vec<u64> = cands.iter().map(|c| c.address).collect();
        self.remove_temporary(&addrs);
        Ok(answers?.into_iter().flatten().collect())
    }

    fn remove_temporary(&mut self, addrs: &[u64]) {
        for a in addrs {
            if let Some(b) = self.graph.block_of(*a) {
                self.graph.remove_block(b);
            }
        }
    }

    /// Adds accepted instructions (contiguous, ascending) to the graph with
    /// the same references initial disassembly would have given them.
    fn insert_run(&mut self, instrs: Vec<Instruction>) {
        let mut blocks: Vec<Vec<Instruction>> = vec![Vec::new()];
        for ins in instrs {
            let stop = ins.kind.ends_block();
            blocks.last_mut().expect("non-empty").push(ins);
            if stop {
                blocks.push(Vec::new());
            }
        }
        let mut refs = Vec::new();
        for b in blocks.into_iter().filter(|b| !b.is_empty()) {
            for ins in &b {
                if let Some(t) = ins.branch_target {
                    refs.push((ins.address, t, EdgeKind::ControlFlow));
                }
                for imm in &ins.immediates {
                    refs.push((ins.address, *imm, EdgeKind::ImmediateRef));
                }
            }
            let last = b.last().expect("non-empty");
            let kind = match last.kind {
                InstrKind::ConditionalBranch => EdgeKind::ControlFlow,
                InstrKind::UnconditionalBranch
                | InstrKind::Return
                | InstrKind::Halt
                | InstrKind::InvalidEncoding => EdgeKind::FallthroughAfterBranch,
                InstrKind::Call | InstrKind::Sequential => EdgeKind::SplitContinuation,
            };
            refs.push((last.address, last.end(), kind));
            self.graph
                .insert_block(Block::new(b).expect("accepted run"))
                .expect("accepted instructions are not in the graph");
        }
        for (from, to, kind) in refs {
            if !self.region.contains(to) {
                continue;
            }
            if kind == EdgeKind::ImmediateRef && !self.graph.covering(to).is_empty() {
                continue;
            }
            let _ = self.graph.add_reference(from, to, kind);
        }
    }

    fn invalid_addresses(&self, lo: u64, hi: u64) -> BTreeSet<u64> {
        (lo..hi).filter(|a| self.verdicts.is_invalid(*a)).collect()
    }

    /// Renders `targets` with their context as one classifier request.
    fn request(&self, targets: &BTreeSet<u64>, annotate: bool, stage: Stage) -> ClassifyRequest {
        let related = related_instructions(&self.graph, targets, self.config.bfs_limit)
            .expect("targets are graph instructions");
        let mut visited = related.clone();
        visited.extend(targets.iter().copied());
        let blocks = extract_context_blocks(&self.graph, &visited);
        let refs = referenced_addresses(&self.graph, &visited);
        let annotations: BTreeMap<u64, Annotation> = if annotate {
            related
                .iter()
                .filter_map(|a| {
                    self.verdicts.verdict(*a).map(|v| {
                        let ann = match v {
                            Verdict::Valid => Annotation::Valid,
                            Verdict::Invalid => Annotation::Invalid,
                        };
                        (*a, ann)
                    })
                })
                .collect()
        } else {
            BTreeMap::new()
        };
        let block_refs: Vec<&Block> = blocks.iter().collect();
        let snippet = render_blocks(&block_refs, &refs, &annotations, targets)
            .expect("context blocks are sorted");
        ClassifyRequest::new(snippet, stage)
    }

    /// Sends requests through a batch queue; answers come back in request
    /// order as `(address, probability)` pairs.
    fn dispatch(
        &self,
        stage: Stage,
        requests: Vec<ClassifyRequest>,
    ) -> Result<Vec<Vec<(u64, f64)>>, PipelineError> {
        let queried: Vec<Vec<u64>> = requests.iter().map(|r| r.queried.clone()).collect();
        let mut out: Vec<Vec<(u64, f64)>> = vec![Vec::new(); requests.len()];
        let mut queue: BatchQueue<usize> = BatchQueue::new(stage, self.config.batch_size);
        let fail = |e: BatchError<usize>| PipelineError::Classify {
            stage,
            addresses: e.tokens.iter().flat_map(|t| queried[*t].clone()).collect(),
            source: e.error,
        };
        for (i, r) in requests.into_iter().enumerate() {
            queue.push(&self.classifier, i, r).map_err(fail)?;
        }
        queue.flush(&self.classifier).map_err(fail)?;
        for (i, res) in queue.take_ready() {
            out[i] = queried[i].iter().copied().zip(res.probabilities).collect();
        }
        Ok(out)
    }

    fn length_of(&self, addr: u64) -> u8 {
        self.graph.instruction(addr).map_or(0, |i| i.length)
    }

    fn decide(&mut self, addr: u64, length: u8, verdict: Verdict, p: f64, stage: Stage) {
        self.verdicts.decide(
            addr,
            VerdictEntry {
                verdict,
                probability: p,
                length,
                stage,
            },
        );
    }

    fn decide_confident(&mut self, addr: u64, p: f64, stage: Stage) {
        let len = self.length_of(addr);
        if p > self.config.hi {
            self.decide(addr, len, Verdict::Valid, p, stage);
        } else if p < self.config.lo {
            self.decide(addr, len, Verdict::Invalid, p, stage);
        }
    }

    fn decide_threshold(&mut self, addr: u64, p: f64, stage: Stage) {
        let len = self.length_of(addr);
        let v = if p >= self.config.single_threshold {
            Verdict::Valid
        } else {
            Verdict::Invalid
        };
        self.decide(addr, len, v, p, stage);
    }
}

/// Highest probability; ties go to the longer instruction, then the lower address.
fn best_candidate<'c>(
    cands: impl Iterator<Item = &'c Instruction>,
    probs: &BTreeMap<u64, f64>,
) -> Option<&'c Instruction> {
    cands.max_by(|a, b| {
        probs[&a.address]
            .total_cmp(&probs[&b.address])
            .then(a.length.cmp(&b.length))
            .then(b.address.cmp(&a.address))
    })
}
