//! Waiting times and fidelities of quantum-repeater protocols with memory
//! cut-offs: exact evaluation, Monte Carlo sampling, secret-key rate and
//! cut-off optimization.

pub mod dist;
pub mod evaluator;
pub mod keyrate;
pub mod montecarlo;
pub mod optimizer;
pub mod par;
pub mod protocol;
