//! Criterion benchmarks for the voxseg kernels; see `benches/`.
