//! Benchmarks live in `benches/`; run them with `cargo bench -p blora-bench`.
