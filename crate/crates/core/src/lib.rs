pub mod coordinator;
pub mod harness;
pub mod model;
pub mod notify;
pub mod perception;
pub mod render;
pub mod safety;
pub mod vlm;
