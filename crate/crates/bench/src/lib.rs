//! Benchmark crate; see `benches/pipeline_bench.rs`.
