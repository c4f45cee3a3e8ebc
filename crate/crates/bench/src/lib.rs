//! Criterion benchmarks for lipcert; see `benches/`.
