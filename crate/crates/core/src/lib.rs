//! Finite element solver for double-diffusive convection in Darcy-Brinkman
//! media, advanced by a curvature-stabilized family of two-step IMEX schemes.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod assembly;
pub mod cavity;
pub mod fespace;
pub mod mesh;
pub mod mms;
pub mod norms;
pub mod output;
pub mod solver;
pub mod timestep;
