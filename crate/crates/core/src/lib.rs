//! Voice-gated U-net face autoencoder.
//!
//! A proposal face is encoded to skip features; a voice embedding is projected
//! to sigmoid gates that scale the decoder's transposed-convolution weights, so
//! the output face depends on both inputs. Training is adversarial against a
//! discriminator and an identity classifier.

pub mod audio;
pub mod channel;
pub mod checkpoint;
pub mod conv;
pub mod critics;
pub mod data;
pub mod embedder;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod inference;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
