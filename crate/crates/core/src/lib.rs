//! Target-centric point-cloud tracker: autodiff tensors, geometry, the
//! feature backbone, the target-centric transformer, the proposal head,
//! training losses, synthetic data and the tracking pipeline.

pub mod backbone;
pub mod dropout;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod transformer;
pub mod xrpn;
pub mod checkpoint;
pub mod pipeline;
pub mod config;
pub mod verify;
