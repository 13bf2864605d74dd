//! Criterion benchmarks for the training and metric hot paths; see `benches/`.
