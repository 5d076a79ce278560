//! Holds the workspace acceptance suite (`tests/acceptance.rs`).
//!
//! It is a separate package so that `cargo test --workspace` runs it after
//! every other crate's tests: cargo stops at the first failing test binary,
//! and packages run in name order.
