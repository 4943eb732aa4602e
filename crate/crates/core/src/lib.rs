pub mod analytic;
pub mod cli;
pub mod metrics;
pub mod model;
pub mod scenarios;
pub mod sim;
