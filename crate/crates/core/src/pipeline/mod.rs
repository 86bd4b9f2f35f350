pub mod config;
pub mod doeb;
pub mod run;
pub mod sweep;
pub mod synthetic;
