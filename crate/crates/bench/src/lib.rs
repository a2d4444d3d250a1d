//! Criterion benchmarks for the refinement pipeline; see `benches/`.
