pub mod analysis;
pub mod cli;
pub mod harness;
pub mod linalg;
pub mod optim;
pub mod perturbation;
pub mod rng;
pub mod testbed;
