//! Benchmarks for the estimators live in `benches/`.
