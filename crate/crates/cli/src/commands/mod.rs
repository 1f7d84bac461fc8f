pub mod eval;
pub mod predict;
pub mod preprocess;
pub mod synth;
pub mod train;
