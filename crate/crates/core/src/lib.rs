pub mod collapsed;
pub mod data;
pub mod error;
pub mod exact;
pub mod experiment;
pub mod kernels;
pub mod linalg;
pub mod nonconjugate;
pub mod stochastic;
pub mod trainer;
