//! Criterion benchmarks for `svph-core` live under `benches/`.
