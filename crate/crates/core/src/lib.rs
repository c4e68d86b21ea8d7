//! Optimal-transport cross-modal alignment and knowledge transfer for
//! CTC sequence models, at desk scale.

// `!(x > 0.0)` style checks reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod ctc;
pub mod encoders;
pub mod io;
pub mod ot;
pub mod params;
pub mod probe;
pub mod synthdata;
pub mod training;
