//! Criterion benchmarks for the offnadir kernels live under `benches/`.
