pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod embed;
pub mod error;
pub mod export;
pub mod evalkit;
pub mod finetune;
pub mod gaag;
pub mod geometry;
pub mod harness;
pub mod hgt;
pub mod nn;
pub mod pretrain;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
