//! Variational two-region image segmentation on P1 triangular meshes with
//! split Bregman iterations and anisotropic mesh adaptation.

// `!(x > 0.0)` is used on purpose so NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod bregman;
pub mod energy;
pub mod fem;
pub mod imageio;
pub mod mesh;
pub mod synthetic;
pub mod tensor;
