//! Integration tests on the canonical pendulum solve, shared across modules.

mod common;
mod filters;
mod harness;
mod isaacs;
