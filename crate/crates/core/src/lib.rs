pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod ebv;
pub mod error;
pub mod head;
pub mod hsic;
pub mod oracle;
pub mod projector;
pub mod trainer;

pub use error::{Error, Result};
