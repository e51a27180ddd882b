//! Benchmarks for tvgo-core live in `benches/`; run them with `cargo bench -p tvgo-bench`.
