pub mod autodiff;
pub mod model;
pub mod taskdata;
pub mod distill;
pub mod eval;
pub mod lifelong;
