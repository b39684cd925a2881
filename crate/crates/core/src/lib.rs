pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod meta;
pub mod modulation;
pub mod nn;
pub mod optim;
pub mod task_net;
pub mod tasks;

pub use error::{Error, Result};
