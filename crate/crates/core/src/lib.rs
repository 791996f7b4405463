#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augment;
pub mod datamodel;
pub mod eval;
pub mod gspo;
pub mod irt;
pub mod math;
pub mod nn;
pub mod optim;
pub mod ranker;
pub mod rng;
pub mod stats;
