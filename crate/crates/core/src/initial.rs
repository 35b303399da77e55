//! Linear + recursive initial disassembly.
//!
//! Starting from the region base and any entry points, blocks are decoded
//! linearly until a block-ending instruction. Direct branch and call targets
//! are followed, the end address of every branch is queued as another
//! candidate, and immediates that land inside the region are queued too.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::decode::{CodeView, InstrKind, Instruction};
use crate::graph::{Block, DisasmGraph, EdgeKind, Reference};

/// A raw code region mapped at `base`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRegion {
    pub base: u64,
    #[serde(skip)]
    pub bytes: Vec<u8>,
    pub entry_points: Vec<u64>,
}

impl CodeRegion {
    pub fn new(base: u64, bytes: Vec<u8>, entry_points: Vec<u64>) -> Self {
        CodeRegion {
            base,
            bytes,
            entry_points,
        }
    }

    pub fn view(&self) -> CodeView<'_> {
        CodeView::new(&self.bytes, self.base)
    }

    pub fn end(&self) -> u64 {
        self.base + self.bytes.len() as u64
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// Builds the initial disassembly graph of `region`.
pub fn initial_disassemble(region: &CodeRegion) -> DisasmGraph {
    let mut graph = DisasmGraph::new();
    if region.is_empty() {
        return graph;
    }
    let view = region.view();
    let mut queued: BTreeSet<u64> = BTreeSet::new();
    let mut worklist: VecDeque<u64> = VecDeque::new();
    let mut refs: Vec<Reference> = Vec::new();

    let mut seeds: Vec<u64> = std::iter::once(region.base)
        .chain(region.entry_points.iter().copied())
        .filter(|a| region.contains(*a))
        .collect();
    seeds.sort_unstable();
    seeds.dedup();
    for s in seeds {
        queued.insert(s);
        worklist.push_back(s);
    }

    while let Some(start) = worklist.pop_front() {
        if graph.block_of(start).is_some() {
            continue;
        }
        let mut instrs: Vec<Instruction> = Vec::new();
        let mut cur = start;
        loop {
            // stop in front of known instructions and of addresses queued to start a block
            if cur != start && (graph.block_of(cur).is_some() || queued.contains(&cur)) {
                if let Some(last) = instrs.last() {
                    refs.push(Reference {
                        from: last.address,
                        to: cur,
                        kind: EdgeKind::SplitContinuation,
                    });
                }
                break;
            }
            let Some(ins) = view.decode(cur) else { break };
            let mut enqueue =
                |addr: u64, kind: EdgeKind, refs: &mut Vec<Reference>, graph: &DisasmGraph| {
                    if !region.contains(addr) {
                        return;
                    }
                    if kind == EdgeKind::ImmediateRef && !graph.covering(addr).is_empty() {
                        return;
                    }
                    refs.push(Reference {
                        from: ins.address,
                        to: addr,
                        kind,
                    });
                    if queued.insert(addr) {
                        worklist.push_back(addr);
                    }
                };
            if let Some(t) = ins.branch_target {
                enqueue(t, EdgeKind::ControlFlow, &mut refs, &graph);
            }
            for imm in &ins.immediates {
                enqueue(*imm, EdgeKind::ImmediateRef, &mut refs, &graph);
            }
            match ins.kind {
                InstrKind::ConditionalBranch => {
                    enqueue(ins.end(), EdgeKind::ControlFlow, &mut refs, &graph)
                }
                InstrKind::UnconditionalBranch
                | InstrKind::Return
                | InstrKind::Halt
                | InstrKind::InvalidEncoding => enqueue(
                    ins.end(),
                    EdgeKind::FallthroughAfterBranch,
                    &mut refs,
                    &graph,
                ),
                InstrKind::Call | InstrKind::Sequential => {}
            }
            cur = ins.end();
            let stop = ins.kind.ends_block();
            instrs.push(ins);
            if stop || cur >= region.end() {
                break;
            }
        }
        if instrs.is_empty() {
            continue;
        }
        let block = Block::new(instrs).expect("linear decode yields a well-formed block");
        graph
            .insert_block(block)
            .expect("decoding stops at known instructions");
    }

    for r in refs {
        // a seed or parked target that is now an interior instruction gets split here
        graph
            .add_reference(r.from, r.to, r.kind)
            .expect("reference source was decoded");
    }
    for s in region
        .entry_points
        .iter()
        .chain(std::iter::once(&region.base))
    {
        let _ = graph.ensure_block_start(*s);
    }
    graph
}
