#![cfg_attr(not(test), no_std)]
extern crate alloc;

pub mod autograd;
pub mod coref;
pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod embeddings;
pub mod encoders;
pub mod gradcheck;
pub mod ingestion;
pub mod kg;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod reconcile;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
