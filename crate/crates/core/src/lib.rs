//! Align assembly-video segments to instruction-manual diagrams.
//!
//! Raw encoder features for clips and diagrams are read from `.emb` tables,
//! projected into a shared space by two small heads trained with
//! contrastive losses, and matched per clip or per whole video with
//! optimal transport or dynamic time warping.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod emb;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod run;
pub mod sampling;
pub mod setmatch;
pub mod store;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
