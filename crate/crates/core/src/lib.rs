//! Text-to-gesture generation by retrieval from a jointly embedded gesture
//! library.
//!
//! The pipeline: key-poses are extracted from motion clips and summarized by
//! a recurrent VAE; the VAE means are clustered to decide which text–gesture
//! pairs count as positives; an attention-weighted text encoder and a
//! recurrent gesture encoder are trained into one metric space with a margin
//! contrastive loss; at inference, text segments are embedded and nearby
//! library gestures are sampled, speed-adjusted and stitched.

pub mod clustering;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod gesture_vae;
pub mod ingest;
pub mod layers;
pub mod metrics;
pub mod motion;
pub mod ndcore;
pub mod persist;
pub mod pipeline;
pub mod retrieval;
pub mod text_encoder;

pub use error::{Error, Result};

/// Scalar type used by the models.
pub type Real = f64;
pub type Tensor = ndcore::Tensor<Real>;
pub type Tape = ndcore::Tape<Real>;
pub type ParamSet = ndcore::ParamSet<Real>;
pub type Adam = ndcore::Adam<Real>;
