//! Learning, contraction certification and contracting state-feedback
//! synthesis for neural ODE models `ẋ = A x + Z(x)`.

pub mod dynamics_sim;
pub mod fixtures;
pub mod lmi_cert;
pub mod lmi_solver;
pub mod nn_model;
pub mod numerics;
pub mod sector;
pub mod synthesis;
