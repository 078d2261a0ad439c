//! Branching Brownian motion with drift `-mu`, killed on leaving `(0, K)`.
//!
//! The crate solves for the survival probability `p_K`, simulates the
//! process together with its backbone decomposition (red, blue and dressed
//! trees, quasi-stationary spine), and checks the associated martingales.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b, tol): (f64, f64, f64) = ($a, $b, $tol);
        assert!((a - b).abs() <= tol, "{} = {a} differs from {} = {b} by more than {tol}", stringify!($a), stringify!($b));
    }};
}

pub mod backbone;
pub mod bvp;
pub mod cli;
pub mod diffusion;
pub mod martingales;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sim;
pub mod stats;
