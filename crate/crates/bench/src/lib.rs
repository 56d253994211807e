//! Criterion benchmarks for the planner's hot kernels; see `benches/kernels.rs`.
