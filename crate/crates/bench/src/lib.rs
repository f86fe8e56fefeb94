//! Benchmarks live in `benches/`; run them with `cargo bench -p res2ctx-bench`.
