//! Picks the related instructions that accompany queried instructions into a
//! classifier snippet.

use std::collections::{BTreeMap, BTreeSet};

use crate::graph::{Block, DisasmGraph};

/// Default number of related instructions gathered around the targets.
pub const DEFAULT_CONTEXT_LIMIT: usize = 32;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ContextError {
    #[error("target {0:#x} is not an instruction in the graph")]
    UnknownTarget(u64),
}

/// Breadth-first search over the instruction-level graph, in both edge
/// directions, collecting up to `limit` instructions besides the targets.
///
/// Each BFS level is emitted in ascending address order. When a level does
/// not fit, it is trimmed alternately from its low and high ends so the
/// context stays balanced around the targets.
pub fn related_instructions(
    graph: &DisasmGraph,
    targets: &BTreeSet<u64>,
    limit: usize,
) -> Result<BTreeSet<u64>, ContextError> {
    if let Some(t) = targets.iter().find(|t| graph.instruction(**t).is_none()) {
        return Err(ContextError::UnknownTarget(*t));
    }
    let mut seen: BTreeSet<u64> = targets.clone();
    let mut related = BTreeSet::new();
    let mut frontier: Vec<u64> = targets.iter().copied().collect();
    while !frontier.is_empty() && related.len() < limit {
        let mut level = BTreeSet::new();
        for addr in &frontier {
            for n in graph
                .predecessors(*addr)
                .into_iter()
                .chain(graph.successors(*addr))
            {
                if graph.instruction(n).is_some() && !seen.contains(&n) {
                    level.insert(n);
                }
            }
        }
        let room = limit - related.len();
        let level: Vec<u64> = if level.len() <= room {
            level.into_iter().collect()
        } else {
            trim_balanced(level.into_iter().collect(), room)
        };
        for a in &level {
            seen.insert(*a);
            related.insert(*a);
        }
        frontier = level;
    }
    Ok(related)
}

fn trim_balanced(level: Vec<u64>, room: usize) -> Vec<u64> {
    let (mut lo, mut hi) = (0usize, level.len());
    let mut keep = Vec::with_capacity(room);
    let mut from_low = true;
    while keep.len() < room {
        if from_low {
            keep.push(level[lo]);
            lo += 1;
        } else {
            hi -= 1;
            keep.push(level[hi]);
        }
        from_low = !from_low;
    }
    keep.sort_unstable();
    keep
}

/// The maximal runs of visited instructions of each graph block, as
/// standalone blocks sorted by start address. The graph is not modified.
pub fn extract_context_blocks(graph: &DisasmGraph, visited: &BTreeSet<u64>) -> Vec<Block> {
    let mut by_block: BTreeMap<u64, ()> = BTreeMap::new();
    for a in visited {
        if let Some(b) = graph.block_of(*a) {
            by_block.insert(b.0, ());
        }
    }
    let mut out = Vec::new();
    for start in by_block.keys() {
        let block = graph
            .block(crate::graph::BlockId(*start))
            .expect("owner index points at live blocks");
        let mut run = Vec::new();
        for ins in block.instructions() {
            if visited.contains(&ins.address) {
                run.push(ins.clone());
            } else if !run.is_empty() {
                out.push(Block::new(std::mem::take(&mut run)).expect("sub-run of a block"));
            }
        }
        if !run.is_empty() {
            out.push(Block::new(run).expect("sub-run of a block"));
        }
    }
    out.sort_by_key(|b| b.start());
    out
}

/// Addresses referenced by any of `visited` that should get a label.
pub fn referenced_addresses(graph: &DisasmGraph, visited: &BTreeSet<u64>) -> BTreeSet<u64> {
    visited
        .iter()
        .flat_map(|a| graph.references_from(*a).map(|r| r.to))
        .collect()
}
