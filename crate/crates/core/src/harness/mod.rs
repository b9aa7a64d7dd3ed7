//! Run configuration, the synthetic corpus, reference oracles and the
//! self-check suite behind the command-line tool.

pub mod config;
pub mod oracles;
pub mod selfcheck;
pub mod synthetic;

pub use config::{EncoderProfile, RunConfig, TrainSection};
pub use selfcheck::{run_checks, CheckOutcome};
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpusSpec};
