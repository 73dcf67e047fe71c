pub mod cfm;
pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod diag;
pub mod env;
pub mod flow;
pub mod gradcheck;
pub mod net;
pub mod rng;
pub mod rpg;
pub mod tape;
pub mod tensor;
pub mod trainer;
