//! Criterion benchmarks for civicsim; see `benches/`.
