//! Expression spotting over snippet-level video features.
//!
//! The pipeline runs from frame annotations to scored proposals:
//!
//! * [`preprocess`] slices videos into overlapping snippets and pads them to a
//!   fixed duration with a validity mask;
//! * [`dte`] labels every snippet timestamp as foreground or background;
//! * [`model`] is a windowed-attention transformer with a temporal feature
//!   pyramid that predicts a foreground probability per timestamp;
//! * [`loss`] combines focal and dice terms over valid timestamps;
//! * [`decode`] thresholds probabilities into frame-level proposals;
//! * [`eval`] matches proposals to ground truth by temporal IoU.
//!
//! [`autodiff`], [`tensor`] and [`optim`] are the numeric substrate, and
//! [`synth`], [`io`], [`checkpoint`], [`config`] and [`pipeline`] wire the
//! pieces into training and evaluation runs.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod dte;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
