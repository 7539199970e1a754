//! End-to-end acceptance checks live in `tests/acceptance.rs`. Run them with
//! `cargo test -p snapchain-validation --release`.
