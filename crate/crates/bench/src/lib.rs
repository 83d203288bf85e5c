//! Criterion benchmarks for the training step, forward pass and decoding.
//! The benchmarks live in `benches/`.
