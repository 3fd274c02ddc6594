//! Discovery of sparse, interpretable Lagrangians from a single measured
//! trajectory.
//!
//! The pipeline builds a symbolic candidate library, pushes every candidate
//! through the Euler-Lagrange operator evaluated on the data, and solves a
//! sequentially thresholded least-squares problem per degree of freedom. The
//! surviving terms are reassembled into a system Lagrangian from which the
//! Hamiltonian and the equations of motion follow in closed form.
//!
//! Modules mirror the processing stages: [`expr`] (symbolic trees),
//! [`dictionary`] (candidate libraries and Euler-Lagrange matrices),
//! [`regress`] (sparse regression), [`discover`] (per-DOF discovery and
//! assembly), [`derive`] (Hamiltonian / equations of motion), [`sim`]
//! (reference simulators and noise injection), [`io`] (file formats) and
//! [`experiments`] (benchmark presets, reports and studies).

pub mod derive;
pub mod dictionary;
pub mod discover;
pub mod experiments;
pub mod expr;
pub mod io;
pub mod regress;
pub mod sim;

pub use expr::{EvalContext, Expr, Var, VarKind};
