//! Preference optimization for a small conditional diffusion model, in noise
//! space and in a noise-conditioned perceptual embedding space, together with
//! tournament-graph curation of pairwise preference data.

pub mod denoiser;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod objectives;
pub mod pref_graph;
pub mod rng;
pub mod schedule;
pub mod train_eval;

pub use error::{Error, Result};
