//! Criterion benchmarks for `errlab-core`; see `benches/`.
