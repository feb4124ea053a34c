//! Holds the `acceptance` test target; run it with
//! `cargo test -p acflow-validation --release`.
