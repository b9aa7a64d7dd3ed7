//! RGB–thermal referring-expression grounding.
//!
//! The crate covers the whole loop: building a benchmark from detection
//! datasets ([`annotation`]), the instance data model ([`dataset`]), the
//! grounding network with per-modality low-rank adaptation ([`ama`]) and
//! language-guided visual fusion ([`lavs`]) on a frozen encoder
//! ([`backbone`]), training and evaluation ([`train_eval`]), and the
//! synthetic corpora and verification oracles used to test all of it
//! ([`harness`]).

pub mod ama;
pub mod annotation;
pub mod autodiff;
pub mod backbone;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod lavs;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train_eval;
pub mod vgnet;

pub use error::{Error, Result};
