//! Workspace-level acceptance checks; everything lives in `tests/acceptance.rs`.
