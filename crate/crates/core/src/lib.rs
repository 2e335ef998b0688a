pub mod data;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
