//! Gradient-based post-training quantization of small networks.
//!
//! The crate learns per-weight rounding decisions on a calibration set,
//! supports uniform and non-uniform weight grids, allocates per-neuron
//! bit-widths from gradient sensitivities and checks integer inference
//! arithmetic bit-exactly.

pub mod calib;
pub mod codec;
pub mod error;
pub mod intsim;
pub mod mixedprec;
pub mod optim;
pub mod reconstruct;
pub mod tensor;

pub use calib::{make_dataset, AugmentKind, AugmentSpec, CalibrationSet, DatasetKind, WorldSpec};
pub use codec::{build_grid, ChannelGrids, Grid, QuantParams, RoundMode, Scheme};
pub use error::{Error, Result};
pub use optim::OptimizerKind;
pub use reconstruct::{quantize_network, EpsDomain, GptqConfig, Granularity, LossKind, MaskSpec, QuantReport};
pub use tensor::{LayerRecord, NetworkRecord, Tensor};
