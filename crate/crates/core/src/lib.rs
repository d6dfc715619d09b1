pub mod agent;
pub mod data;
pub mod error;
pub mod gcnn;
pub mod graph;
pub mod netsim;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
