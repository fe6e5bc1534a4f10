//! Library surface of the experiment runner, split out so the pipelines are
//! testable without spawning the binary.

pub mod commands;
pub mod spec;

pub use commands::{cmd_compare, cmd_run, cmd_sweep, prepare};
pub use spec::{parse_spec, parse_spec_text, ExperimentSpec, SpecError};
