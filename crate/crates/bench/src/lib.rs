//! Benchmarks for lsr-core live under benches/.
