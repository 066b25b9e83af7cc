pub mod geodesy;
pub mod ins;
pub mod preintegration;
pub mod visual;
pub mod estimator;
pub mod config;
pub mod eval;
pub mod io;
pub mod sim;
pub mod math;
