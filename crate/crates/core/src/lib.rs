pub mod autograd;
pub mod blocks;
pub mod data;
pub mod distill;
pub mod engine;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod params;
pub mod tensor;
