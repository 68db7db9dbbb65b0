//! Numerical homogenization of a pseudo-parabolic system posed on a periodically
//! perforated unit square.
//!
//! The crate covers meshing of the periodicity cell and the perforated domain,
//! coefficient descriptions, sparse linear algebra, cell problems up to second order,
//! effective tensors, fine-scale and homogenized time stepping, corrector error
//! studies and the explicit constants of the corrector bounds.

// Index loops mirror the tensor notation; negated comparisons also reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod expr;
pub mod mesh;
pub mod sparse;
pub mod cell;
pub mod coefficients;
pub mod constants;
pub mod corrector;
pub mod effective;
pub mod pde;
