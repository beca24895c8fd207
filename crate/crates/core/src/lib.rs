//! Brain-to-text decoding pipeline.
//!
//! Two stages: a transformer mapper trained to predict per-TR text embeddings
//! from fMRI frames (MSE plus masked-contrastive InfoNCE), and a beam search
//! over a generative language model guided by those predicted embeddings.
//! Around them: the stimulus-feature pipeline (context embeddings, Lanczos
//! resampling onto the TR grid, FIR delay expansion), a linear word-rate
//! model, a windowed evaluation harness with randomized baselines, and a
//! synthetic-data rig that makes the whole pipeline testable without scanner
//! data.

pub mod autodiff;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod lm;
pub mod mapper;
pub mod opt;
pub mod pipeline;
pub mod rng;
pub mod store;
pub mod synth;
pub mod util;
pub mod word_rate;

pub use data::{EmbeddingSeries, FmriSeries, WordTimeline};
pub use error::{Error, Result};
pub use rng::SeedStreams;
