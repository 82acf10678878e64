//! Pyramidal bounding-box refinement for two-stage object detectors.
//!
//! A first stage scores and regresses proposals; each later stage cuts four
//! boundary areas around the current box, pools them one pyramid level finer,
//! and predicts per-side displacements with a boundary predict network.

pub mod boxgeom;
pub mod bpn;
pub mod detector;
pub mod evalkit;
pub mod harness;
pub mod nn;
pub mod pyramid;
pub mod synthdata;
pub mod tensor;
pub mod verify;
