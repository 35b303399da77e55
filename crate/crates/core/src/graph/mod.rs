//! The disassembly graph: basic blocks keyed by start address, plus typed
//! references between instructions and block starts.
//!
//! Each decoded instruction address is owned by exactly one block, and every
//! materialized edge points at a block start. A reference to an address that
//! is currently an interior instruction boundary splits the owning block; a
//! reference to an address no block decodes yet is parked until one does.

mod interval;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::decode::Instruction;

pub use interval::{group_by_overlap, group_overlapping_intervals, Interval};

/// A block is identified by its start address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct BlockId(pub u64);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    ControlFlow,
    ImmediateRef,
    FallthroughAfterBranch,
    SplitContinuation,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("block must contain at least one instruction")]
    EmptyBlock,
    #[error("instructions are not contiguous at {0:#x}")]
    NotContiguous(u64),
    #[error("branch instruction at {0:#x} is not the last instruction of its block")]
    BranchInsideBlock(u64),
    #[error("instruction {0:#x} already belongs to another block")]
    InstructionOwned(u64),
    #[error("no block starts at {0}")]
    UnknownBlock(BlockId),
    #[error("no instruction at {0:#x}")]
    UnknownInstruction(u64),
    #[error("{at:#x} is not an instruction boundary strictly inside block {block}")]
    NotInteriorBoundary { block: BlockId, at: u64 },
}

/// A maximal straight-line run of contiguous instructions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Block {
    instructions: Vec<Instruction>,
}

impl Block {
    pub fn new(instructions: Vec<Instruction>) -> Result<Self, GraphError> {
        if instructions.is_empty() {
            return Err(GraphError::EmptyBlock);
        }
        for pair in instructions.windows(2) {
            if pair[0].end() != pair[1].address {
                return Err(GraphError::NotContiguous(pair[1].address));
            }
            if pair[0].kind.ends_block() {
                return Err(GraphError::BranchInsideBlock(pair[0].address));
            }
        }
        Ok(Block { instructions })
    }

    pub fn id(&self) -> BlockId {
        BlockId(self.start())
    }

    pub fn start(&self) -> u64 {
        self.instructions[0].address
    }

    pub fn end(&self) -> u64 {
        self.instructions[self.instructions.len() - 1].end()
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.start(), self.end())
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn last(&self) -> &Instruction {
        &self.instructions[self.instructions.len() - 1]
    }

    pub fn position(&self, addr: u64) -> Option<usize> {
        self.instructions
            .binary_search_by_key(&addr, |i| i.address)
            .ok()
    }
}

/// A reference from one instruction to an address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Reference {
    pub from: u64,
    pub to: u64,
    pub kind: EdgeKind,
}

/// Block-level view of a materialized reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Edge {
    pub src: BlockId,
    pub dst: BlockId,
    pub kind: EdgeKind,
    /// The referencing instruction inside `src`.
    pub from: u64,
}

#[derive(Debug, Default, Clone)]
pub struct DisasmGraph {
    blocks: BTreeMap<u64, Block>,
    owner: BTreeMap<u64, u64>,
    edges: BTreeSet<Reference>,
    incoming: BTreeSet<(u64, u64, EdgeKind)>,
    pending: BTreeSet<Reference>,
    pending_by_target: BTreeSet<(u64, u64, EdgeKind)>,
}

impl DisasmGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, id: BlockId) -> Option<&Block> {
        self.blocks.get(&id.0)
    }

    /// Blocks in ascending start order.
    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks.values()
    }

    pub fn block_of(&self, addr: u64) -> Option<BlockId> {
        self.owner.get(&addr).map(|s| BlockId(*s))
    }

    pub fn is_block_start(&self, addr: u64) -> bool {
        self.blocks.contains_key(&addr)
    }

    pub fn instruction(&self, addr: u64) -> Option<&Instruction> {
        let start = self.owner.get(&addr)?;
        let block = &self.blocks[start];
        block.position(addr).map(|p| &block.instructions[p])
    }

    /// Addresses of every instruction in the graph, ascending.
    pub fn instruction_addresses(&self) -> impl Iterator<Item = u64> + '_ {
        self.owner.keys().copied()
    }

    /// Addresses of the instructions starting in `range`, ascending.
    pub fn instruction_addresses_in(
        &self,
        range: std::ops::Range<u64>,
    ) -> impl Iterator<Item = u64> + '_ {
        self.owner.range(range).map(|(a, _)| *a)
    }

    /// Every instruction in ascending address order.
    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> + '_ {
        self.owner.keys().filter_map(move |a| self.instruction(*a))
    }

    pub fn instruction_count(&self) -> usize {
        self.owner.len()
    }

    /// Instructions whose bytes strictly contain `addr` (excluding ones starting at it).
    pub fn covering(&self, addr: u64) -> Vec<&Instruction> {
        let lo = addr.saturating_sub(crate::decode::MAX_INSTRUCTION_LEN as u64 - 1);
        self.owner
            .range(lo..addr)
            .filter_map(|(a, _)| self.instruction(*a))
            .filter(|i| i.contains_interior(addr))
            .collect()
    }

    /// Registers a block. Re-inserting a block whose start is already known
    /// is a no-op returning the existing id.
    pub fn insert_block(&mut self, block: Block) -> Result<BlockId, GraphError> {
        let id = block.id();
        if self.blocks.contains_key(&id.0) {
            return Ok(id);
        }
        if let Some(i) = block
            .instructions
            .iter()
            .find(|i| self.owner.contains_key(&i.address))
        {
            return Err(GraphError::InstructionOwned(i.address));
        }
        let (start, end) = (block.start(), block.end());
        for ins in &block.instructions {
            self.owner.insert(ins.address, start);
        }
        self.blocks.insert(start, block);

        let parked: Vec<Reference> = self
            .pending_by_target
            .range((start, 0, EdgeKind::ControlFlow)..(end, 0, EdgeKind::ControlFlow))
            .map(|&(to, from, kind)| Reference { from, to, kind })
            .collect();
        for r in parked {
            if self.owner.contains_key(&r.to) && self.owner.contains_key(&r.from) {
                self.unpark(&r);
                self.add_reference(r.from, r.to, r.kind)?;
            }
        }
        Ok(self.block_of(start).unwrap_or(id))
    }

    /// Records a reference from the instruction at `from` to `to`, splitting
    /// the block that owns `to` if it is an interior instruction.
    pub fn add_reference(&mut self, from: u64, to: u64, kind: EdgeKind) -> Result<(), GraphError> {
        if !self.owner.contains_key(&from) {
            return Err(GraphError::UnknownInstruction(from));
        }
        let r = Reference { from, to, kind };
        match self.owner.get(&to).copied() {
            Some(start) => {
                if start != to {
                    self.split_block(BlockId(start), to)?;
                }
                self.edges.insert(r);
                self.incoming.insert((to, from, kind));
            }
            None => {
                self.pending.insert(r);
                self.pending_by_target.insert((to, from, kind));
            }
        }
        Ok(())
    }

    fn unpark(&mut self, r: &Reference) {
        self.pending.remove(r);
        self.pending_by_target.remove(&(r.to, r.from, r.kind));
    }

    /// Splits a block at an interior instruction boundary, linking the halves
    /// with a split-continuation edge. References keep their source
    /// instruction, so a terminator's outgoing edges follow it into the
    /// second half while incoming edges stay on the first.
    pub fn split_block(&mut self, id: BlockId, at: u64) -> Result<(BlockId, BlockId), GraphError> {
        let block = self
            .blocks
            .get_mut(&id.0)
            .ok_or(GraphError::UnknownBlock(id))?;
        let pos = match block.position(at) {
            Some(p) if p > 0 => p,
            _ => return Err(GraphError::NotInteriorBoundary { block: id, at }),
        };
        let tail = block.instructions.split_off(pos);
        let last_of_head = block.last().address;
        for ins in &tail {
            self.owner.insert(ins.address, at);
        }
        self.blocks.insert(at, Block { instructions: tail });
        let r = Reference {
            from: last_of_head,
            to: at,
            kind: EdgeKind::SplitContinuation,
        };
        self.edges.insert(r);
        self.incoming.insert((at, r.from, r.kind));
        Ok((id, BlockId(at)))
    }

    /// Makes `addr` a block start if it is currently an interior instruction.
    pub fn ensure_block_start(&mut self, addr: u64) -> Result<Option<BlockId>, GraphError> {
        match self.owner.get(&addr).copied() {
            None => Ok(None),
            Some(start) if start == addr => Ok(Some(BlockId(addr))),
            Some(start) => self.split_block(BlockId(start), addr).map(|(_, b)| Some(b)),
        }
    }

    /// Removes a block. Its outgoing references are dropped; references into
    /// its start are parked so a later block at the same address picks them up.
    pub fn remove_block(&mut self, id: BlockId) -> Option<Block> {
        let block = self.blocks.remove(&id.0)?;
        for ins in &block.instructions {
            self.owner.remove(&ins.address);
            let out: Vec<Reference> = self
                .edges
                .range(Self::from_range(ins.address))
                .copied()
                .collect();
            for r in out {
                self.edges.remove(&r);
                self.incoming.remove(&(r.to, r.from, r.kind));
            }
            let parked: Vec<Reference> = self
                .pending
                .range(Self::from_range(ins.address))
                .copied()
                .collect();
            for r in parked {
                self.unpark(&r);
            }
        }
        let into: Vec<(u64, u64, EdgeKind)> = self
            .incoming
            .range((id.0, 0, EdgeKind::ControlFlow)..(id.0 + 1, 0, EdgeKind::ControlFlow))
            .copied()
            .collect();
        for (to, from, kind) in into {
            let r = Reference { from, to, kind };
            self.edges.remove(&r);
            self.incoming.remove(&(to, from, kind));
            self.pending.insert(r);
            self.pending_by_target.insert((to, from, kind));
        }
        Some(block)
    }

    fn from_range(from: u64) -> std::ops::Range<Reference> {
        let lo = Reference {
            from,
            to: 0,
            kind: EdgeKind::ControlFlow,
        };
        let hi = Reference {
            from: from + 1,
            to: 0,
            kind: EdgeKind::ControlFlow,
        };
        lo..hi
    }

    /// Deletes individual instructions, keeping the surviving runs of each
    /// affected block as separate blocks. Returns what was removed.
    pub fn remove_instructions(&mut self, addrs: &BTreeSet<u64>) -> Vec<Instruction> {
        let hosts: BTreeSet<u64> = addrs
            .iter()
            .filter_map(|a| self.owner.get(a).copied())
            .collect();
        let mut removed = Vec::new();
        for host in hosts {
            let refs: Vec<Reference> = {
                let block = &self.blocks[&host];
                block
                    .instructions
                    .iter()
                    .filter(|i| !addrs.contains(&i.address))
                    .flat_map(|i| {
                        self.edges
                            .range(Self::from_range(i.address))
                            .chain(self.pending.range(Self::from_range(i.address)))
                            .copied()
                            .collect::<Vec<_>>()
                    })
                    .collect()
            };
            let Some(block) = self.remove_block(BlockId(host)) else {
                continue;
            };
            let mut run: Vec<Instruction> = Vec::new();
            let mut pieces = Vec::new();
            for ins in block.instructions {
                if addrs.contains(&ins.address) {
                    removed.push(ins);
                    if !run.is_empty() {
                        pieces.push(std::mem::take(&mut run));
                    }
                } else {
                    run.push(ins);
                }
            }
            if !run.is_empty() {
                pieces.push(run);
            }
            for piece in pieces {
                // sub-runs of a valid block are valid blocks
                let piece = Block {
                    instructions: piece,
                };
                self.insert_block(piece)
                    .expect("fragment of a removed block cannot collide");
            }
            for r in refs {
                if r.kind == EdgeKind::SplitContinuation && !self.owner.contains_key(&r.to) {
                    continue;
                }
                self.add_reference(r.from, r.to, r.kind)
                    .expect("source instruction survived removal");
            }
        }
        removed
    }

    /// Materialized references leaving the instruction at `from`.
    pub fn references_from(&self, from: u64) -> impl Iterator<Item = &Reference> + '_ {
        self.edges.range(Self::from_range(from))
    }

    /// Instructions with a materialized reference to `to`.
    pub fn references_to(&self, to: u64) -> impl Iterator<Item = (u64, EdgeKind)> + '_ {
        self.incoming
            .range((to, 0, EdgeKind::ControlFlow)..(to + 1, 0, EdgeKind::ControlFlow))
            .map(|&(_, from, kind)| (from, kind))
    }

    /// References whose target is not decoded yet.
    pub fn unresolved_references(&self) -> impl Iterator<Item = &Reference> + '_ {
        self.pending.iter()
    }

    pub fn edges(&self) -> Vec<Edge> {
        self.edges
            .iter()
            .map(|r| Edge {
                src: BlockId(self.owner[&r.from]),
                dst: BlockId(r.to),
                kind: r.kind,
                from: r.from,
            })
            .collect()
    }

    /// Neighbours in the instruction-level graph: the next instruction of the
    /// block plus the heads of outgoing references.
    pub fn successors(&self, addr: u64) -> Vec<u64> {
        let mut out = Vec::new();
        if let Some(start) = self.owner.get(&addr) {
            let block = &self.blocks[start];
            if let Some(p) = block.position(addr) {
                if let Some(next) = block.instructions.get(p + 1) {
                    out.push(next.address);
                }
            }
            out.extend(self.references_from(addr).map(|r| r.to));
        }
        out
    }

    /// Inverse of [`Self::successors`].
    pub fn predecessors(&self, addr: u64) -> Vec<u64> {
        let mut out = Vec::new();
        if let Some(start) = self.owner.get(&addr) {
            let block = &self.blocks[start];
            if let Some(p) = block.position(addr) {
                if p > 0 {
                    out.push(block.instructions[p - 1].address);
                }
            }
            out.extend(self.references_to(addr).map(|(from, _)| from));
        }
        out
    }

    pub fn export(&self) -> GraphExport<'_> {
        GraphExport {
            blocks: self
                .blocks
                .values()
                .map(|b| BlockExport {
                    start: b.start(),
                    end: b.end(),
                    instructions: &b.instructions,
                })
                .collect(),
            edges: self
                .edges()
                .into_iter()
                .map(|e| EdgeExport {
                    src: e.src.0,
                    dst: e.dst.0,
                    kind: e.kind,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.export()).expect("graph export is plain data")
    }
}

#[derive(Debug, Serialize)]
pub struct GraphExport<'a> {
    pub blocks: Vec<BlockExport<'a>>,
    pub edges: Vec<EdgeExport>,
}

#[derive(Debug, Serialize)]
pub struct BlockExport<'a> {
    pub start: u64,
    pub end: u64,
    pub instructions: &'a [Instruction],
}

#[derive(Debug, Serialize)]
pub struct EdgeExport {
    pub src: u64,
    pub dst: u64,
    pub kind: EdgeKind,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct MinimizeReport {
    /// `(block that was split, split address)` in the order performed.
    pub splits: Vec<(BlockId, u64)>,
}

/// Shrinks conflict regions by splitting overlapping blocks at the edges of
/// each group of mutually overlapping instructions.
pub fn minimize_overlap(graph: &mut DisasmGraph) -> MinimizeReport {
    let block_groups = group_by_overlap(graph.blocks().map(|b| b.interval()).collect(), |i| *i);
    let mut cuts: BTreeSet<u64> = BTreeSet::new();
    for group in block_groups.iter().filter(|g| g.len() > 1) {
        let instrs: Vec<Interval> = group
            .iter()
            .flat_map(|b| graph.blocks[&b.start].instructions.iter())
            .map(|i| Interval::new(i.address, i.end()))
            .collect();
        for ig in group_by_overlap(instrs, |i| *i)
            .iter()
            .filter(|g| g.len() > 1)
        {
            let lo = ig.iter().map(|i| i.start).min().unwrap_or_default();
            let hi = ig.iter().map(|i| i.end).max().unwrap_or_default();
            cuts.insert(lo);
            cuts.insert(hi);
        }
    }
    let mut report = MinimizeReport::default();
    for at in cuts {
        if let Some(start) = graph.owner.get(&at).copied() {
            if start != at && graph.split_block(BlockId(start), at).is_ok() {
                report.splits.push((BlockId(start), at));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::decode_at;

    /// Decodes a straight run of instructions starting at `base + offset`.
    fn run(bytes: &[u8], base: u64, offset: usize, count: usize) -> Vec<Instruction> {
        let mut out = Vec::new();
        let mut off = offset;
        for _ in 0..count {
            let i = decode_at(bytes, base, off).unwrap();
            off += i.length as usize;
            out.push(i);
        }
        out
    }

    fn nops(base: u64, n: usize) -> Block {
        Block::new(run(&vec![0x90; n], base, 0, n)).unwrap()
    }

    #[test]
    fn insert_and_lookup() {
        let mut g = DisasmGraph::new();
        let id = g.insert_block(nops(0x100, 3)).unwrap();
        assert_eq!(id, BlockId(0x100));
        assert_eq!(g.block_of(0x102), Some(id));
        assert_eq!(g.insert_block(nops(0x100, 3)).unwrap(), id);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn overlapping_blocks_coexist() {
        // mov eax, imm32 at 0 and a nop run starting inside it
        let bytes = [0xb8, 0x90, 0x90, 0x90, 0x90, 0x90];
        let mut g = DisasmGraph::new();
        g.insert_block(Block::new(run(&bytes, 0, 0, 2)).unwrap())
            .unwrap();
        g.insert_block(Block::new(run(&bytes, 0, 1, 4)).unwrap())
            .unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.covering(2).len(), 1);
    }

    #[test]
    fn rejects_malformed_blocks() {
        assert_eq!(Block::new(vec![]).unwrap_err(), GraphError::EmptyBlock);
        let mut a = run(&[0x90], 0, 0, 1);
        a.extend(run(&[0x90], 5, 0, 1));
        assert_eq!(Block::new(a).unwrap_err(), GraphError::NotContiguous(5));
        let jmp_then_nop = run(&[0xeb, 0x00, 0x90], 0, 0, 2);
        assert_eq!(
            Block::new(jmp_then_nop).unwrap_err(),
            GraphError::BranchInsideBlock(0)
        );
    }

    #[test]
    fn insert_splits_on_parked_reference() {
        let mut g = DisasmGraph::new();
        // jmp +2 at 0x10 referencing 0x21, which does not exist yet
        let jmp = run(&[0xeb, 0x0f], 0x10, 0, 1);
        g.insert_block(Block::new(jmp).unwrap()).unwrap();
        g.add_reference(0x10, 0x21, EdgeKind::ControlFlow).unwrap();
        assert_eq!(g.unresolved_references().count(), 1);

        g.insert_block(nops(0x20, 2)).unwrap();
        assert!(g.is_block_start(0x21));
        assert_eq!(g.block(BlockId(0x20)).unwrap().len(), 1);
        assert_eq!(g.unresolved_references().count(), 0);
        let edges = g.edges();
        assert!(edges.contains(&Edge {
            src: BlockId(0x10),
            dst: BlockId(0x21),
            kind: EdgeKind::ControlFlow,
            from: 0x10
        }));
        assert!(edges.iter().any(|e| e.src == BlockId(0x20)
            && e.dst == BlockId(0x21)
            && e.kind == EdgeKind::SplitContinuation));
    }

    #[test]
    fn split_moves_terminator_edges() {
        let mut g = DisasmGraph::new();
        // nop; nop; jmp 0x100 (eb f9 at 0x105)
        let bytes = [0x90, 0x90, 0xeb, 0xfc];
        let b = Block::new(run(&bytes, 0x100, 0, 3)).unwrap();
        g.insert_block(b).unwrap();
        g.add_reference(0x102, 0x100, EdgeKind::ControlFlow)
            .unwrap();
        let (a, b) = g.split_block(BlockId(0x100), 0x101).unwrap();
        assert_eq!(g.block(a).unwrap().len(), 1);
        assert_eq!(g.block(b).unwrap().len(), 2);
        let edges = g.edges();
        // the jmp now lives in the second half and still targets the first
        assert!(edges
            .iter()
            .any(|e| e.src == b && e.dst == a && e.kind == EdgeKind::ControlFlow));
        assert!(edges
            .iter()
            .any(|e| e.src == a && e.dst == b && e.kind == EdgeKind::SplitContinuation));
    }

    #[test]
    fn split_at_start_or_off_boundary_fails() {
        let mut g = DisasmGraph::new();
        g.insert_block(nops(0x100, 3)).unwrap();
        assert!(matches!(
            g.split_block(BlockId(0x100), 0x100),
            Err(GraphError::NotInteriorBoundary { .. })
        ));
        assert!(matches!(
            g.split_block(BlockId(0x100), 0x103),
            Err(GraphError::NotInteriorBoundary { .. })
        ));
        assert!(matches!(
            g.split_block(BlockId(0x200), 0x201),
            Err(GraphError::UnknownBlock(_))
        ));
    }

    #[test]
    fn split_three_into_one_and_two() {
        let mut g = DisasmGraph::new();
        g.insert_block(nops(0x100, 3)).unwrap();
        let before: Vec<String> = g.instructions().map(|i| i.text.clone()).collect();
        let (a, b) = g.split_block(BlockId(0x100), 0x101).unwrap();
        assert_eq!(
            (g.block(a).unwrap().len(), g.block(b).unwrap().len()),
            (1, 2)
        );
        let after: Vec<String> = g.instructions().map(|i| i.text.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn remove_instructions_keeps_fragments_and_parks_refs() {
        let mut g = DisasmGraph::new();
        g.insert_block(nops(0x100, 5)).unwrap();
        let jmp = run(&[0xeb, 0x00], 0x50, 0, 1);
        g.insert_block(Block::new(jmp).unwrap()).unwrap();
        g.add_reference(0x50, 0x100, EdgeKind::ControlFlow).unwrap();

        let removed = g.remove_instructions(&BTreeSet::from([0x100, 0x102]));
        assert_eq!(removed.len(), 2);
        let starts: Vec<u64> = g.blocks().map(|b| b.start()).collect();
        assert_eq!(starts, vec![0x50, 0x101, 0x103]);
        assert_eq!(g.unresolved_references().count(), 1);
        assert_eq!(g.instruction_count(), 4);
    }

    #[test]
    fn remove_block_parks_incoming() {
        let mut g = DisasmGraph::new();
        g.insert_block(nops(0x100, 2)).unwrap();
        let jmp = run(&[0xeb, 0x00], 0x50, 0, 1);
        g.insert_block(Block::new(jmp).unwrap()).unwrap();
        g.add_reference(0x50, 0x100, EdgeKind::ControlFlow).unwrap();
        g.remove_block(BlockId(0x100)).unwrap();
        assert!(g.edges().is_empty());
        g.insert_block(nops(0x100, 1)).unwrap();
        assert_eq!(g.edges().len(), 1);
    }

    #[test]
    fn minimize_without_overlap_is_noop() {
        let mut g = DisasmGraph::new();
        g.insert_block(nops(0x100, 3)).unwrap();
        g.insert_block(nops(0x103, 3)).unwrap();
        assert!(minimize_overlap(&mut g).splits.is_empty());
    }

    #[test]
    fn minimize_isolates_final_instruction_overlap() {
        // A: nop, nop, mov eax, imm32 (0x102..0x107)
        // B: starts at 0x104, inside A's mov: nop, nop, nop (0x104..0x107)
        let bytes = [0x90, 0x90, 0xb8, 0x90, 0x90, 0x90, 0x90];
        let mut g = DisasmGraph::new();
        g.insert_block(Block::new(run(&bytes, 0x100, 0, 3)).unwrap())
            .unwrap();
        g.insert_block(Block::new(run(&bytes, 0x100, 4, 3)).unwrap())
            .unwrap();
        let report = minimize_overlap(&mut g);
        assert_eq!(report.splits, vec![(BlockId(0x100), 0x102)]);
        let starts: Vec<(u64, u64)> = g.blocks().map(|b| (b.start(), b.end())).collect();
        assert_eq!(starts, vec![(0x100, 0x102), (0x102, 0x107), (0x104, 0x107)]);
    }

    #[test]
    fn every_edge_targets_a_block_start() {
        let mut g = DisasmGraph::new();
        g.insert_block(nops(0x100, 8)).unwrap();
        for (i, t) in [0x103u64, 0x105, 0x106].into_iter().enumerate() {
            g.add_reference(0x100 + i as u64, t, EdgeKind::ImmediateRef)
                .unwrap();
        }
        for e in g.edges() {
            assert!(g.is_block_start(e.dst.0));
            assert_eq!(g.block_of(e.from), Some(e.src));
        }
    }
}
