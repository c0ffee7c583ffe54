//! Criterion benchmarks for the forward pass, a training step, convolution and metrics; see `benches/`.
