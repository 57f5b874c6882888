//! Recurrent enhancement of compressed video frames using ConvLSTM cells whose
//! states are warped by inter-frame feature similarity.
//!
//! Frames are encoded to feature maps, a bidirectional ConvLSTM carries state
//! across time with the previous hidden and cell states re-aligned by an
//! inter-frame non-local similarity, and a decoder predicts a residual that
//! is added to the degraded centre frame. The similarity runs either exactly
//! (dense `N × N`) or through a block-prefiltered sparse approximation.

pub mod autodiff;
pub mod bench;
pub mod convlstm;
pub mod enhancer;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nonlocal;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Activation, Kernel, LayerSpec, PaddingMode, Tensor};
