//! Distributed zeroth-order policy optimisation over networked multi-agent
//! systems: coupling-graph analysis, a warehouse resource-transfer
//! environment, RBF-softmax policies, Metropolis consensus, training loops
//! and numerical checks of the accompanying bounds.

pub mod consensus;
pub mod env;
pub mod graphs;
pub mod policy;
pub mod presets;
pub mod seeding;
pub mod verify;
pub mod zoo;
