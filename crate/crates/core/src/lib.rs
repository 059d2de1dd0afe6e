pub mod activation;
pub mod error;
pub mod linalg;
pub mod moments;
pub mod network;
pub mod rng;
pub mod tape;
