pub mod geometry;
pub mod nn;
pub mod par;
pub mod skeleton;
pub mod augment;
pub mod data;
pub mod metrics;
pub mod pipeline;
