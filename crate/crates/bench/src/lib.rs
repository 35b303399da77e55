//! Criterion benchmarks for the disassembly engine; see `benches/engine.rs`.
