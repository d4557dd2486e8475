pub mod canon;
pub mod cli;
pub mod cloud;
pub mod kinopt;
pub mod model;
pub mod ppf;
pub mod predictor;
pub mod voting;
pub mod se3;
pub mod seed;
