//! Criterion benchmarks for the fitting pipeline live in `benches/`.
