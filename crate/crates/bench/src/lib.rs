//! Benchmarks for `recsim-core` live under `benches/`.
