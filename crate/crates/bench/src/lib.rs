//! Benchmark-only crate. The measurements live in `benches/protocol.rs`;
//! run them with `cargo bench -p sealmarket-bench`.
