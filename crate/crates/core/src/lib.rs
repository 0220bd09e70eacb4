//! RGB-thermal single-object tracking by prompt tuning a frozen one-stream
//! transformer tracker.
//!
//! The foundation tracker ([`foundation`]) is never trained. A small
//! [`prompters::PrompterBank`] of adapters and prompt tokens steers it:
//! the first `N` encoder blocks run once per modality with uni-modal and
//! inter-modal prompters, a middle fusion prompter merges the streams, and
//! the remaining blocks run on the fused tokens with a fusion-enhancing
//! prompter. [`training`] tunes the bank, [`evalkit`] scores trackers on
//! RGB-T benchmarks.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`graph`]) in
//! `f64`, which keeps finite-difference gradient checks meaningful.

pub mod archive;
pub mod error;
pub mod evalkit;
pub mod foundation;
pub mod graph;
pub mod params;
pub mod pipeline;
pub mod prompters;
pub mod training;

pub use error::{Error, Result};
