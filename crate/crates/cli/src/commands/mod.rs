pub mod attack;
pub mod dataset;
pub mod demo;
pub mod explain;
pub mod train;
pub mod verify;
