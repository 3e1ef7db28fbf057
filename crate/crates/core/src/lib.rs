//! Tabular representation learning: a transformer autoencoder over
//! per-feature tokens, pretrained on corrupted rows with reconstruction,
//! classification and contrastive objectives, plus evaluation tooling.
//!
//! The crate is `no_std` (with `alloc`); file formats and the command-line
//! front end live in the companion `recontab` crate.
#![no_std]

extern crate alloc;

pub mod corruption;
pub mod data;
pub mod evaluation;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod training;
