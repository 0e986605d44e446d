//! Benchmark-only crate; see benches/filters.rs.
