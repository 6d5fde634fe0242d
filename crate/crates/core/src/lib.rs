//! Boundary-aware sound event detection: the RED layer, boundary and
//! duration losses, event proposal networks, proposal-based inference,
//! median-filter baseline, PSDS/F1 evaluation and a synthetic benchmark.

mod error;
pub mod bench;
pub mod dataset;
pub mod epn;
pub mod event;
pub mod infer;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod postproc;
pub mod red;
pub mod scoring;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use event::Event;
