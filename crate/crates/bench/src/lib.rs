//! Criterion benchmarks for the computational kernels; see `benches/`.
