//! Benchmark-only crate; see benches/fit.rs.
