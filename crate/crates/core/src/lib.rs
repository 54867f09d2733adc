pub mod autodiff;
pub mod capacity;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod training;
