pub mod check;
pub mod data;
pub mod detect;
pub mod privacy;
pub mod train;
