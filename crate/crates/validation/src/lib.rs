//! Acceptance suite for the workspace. The checks live in
//! `tests/acceptance.rs` and print one PASS or FAIL line per criterion:
//!
//! ```text
//! cargo test -p tds-validation --test acceptance
//! ```
