//! Classifier-guided disassembly of x86-64 code regions that may contain
//! junk bytes.
//!
//! The engine builds an initial linear + recursive disassembly graph, asks a
//! pluggable validity [`classify::Classifier`] about every decoded
//! instruction, and then repairs the invalid byte ranges between valid code
//! with reverse and forward infilling.

pub mod classify;
pub mod context;
pub mod corpus;
pub mod decode;
pub mod eval;
pub mod graph;
pub mod initial;
pub mod pipeline;
pub mod render;

pub use classify::{
    BatchQueue, Classifier, ClassifyError, ClassifyRequest, ClassifyResult, GroundTruthClassifier,
    HeuristicClassifier, Memoized, NoisyOracle, RemoteClassifier, Stage,
};
pub use context::{extract_context_blocks, related_instructions, DEFAULT_CONTEXT_LIMIT};
pub use corpus::{generate_sample, CorpusParams, GroundTruth, Sample};
pub use decode::{decode_at, reverse_decode, reverse_tree_bfs, CodeView, InstrKind, Instruction};
pub use eval::{score, Report, Scope, Score, TruthSpans};
pub use graph::{
    group_overlapping_intervals, minimize_overlap, Block, BlockId, DisasmGraph, Edge, EdgeKind,
    Interval,
};
pub use initial::{initial_disassemble, CodeRegion};
pub use pipeline::{
    rebuild_regions, Engine, FinalListing, PipelineConfig, PipelineError, RegionLabel, RegionMap,
    Verdict, VerdictStore,
};
pub use render::{render_blocks, render_gap_byte, Annotation, Snippet, WordSpan};
