pub mod attnlab;
pub mod cli;
pub mod config;
pub mod datastore;
pub mod diffcore;
pub mod error;
pub mod gazenet;
pub mod gradsuite;
pub mod policynet;
pub mod simenv;
pub mod trainer;

pub use error::{Error, Result};
