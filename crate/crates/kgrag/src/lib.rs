//! File formats, OpenAI-compatible backends, the parallel evaluation runner,
//! the `kgrag` command line and the HTTP query service built on
//! [`kgrag_core`].

pub mod cli;
pub mod error;
pub mod gateway;
pub mod io;
pub mod runner;
pub mod service;
pub mod store;

pub use error::{Error, Result};
pub use gateway::BackendSet;
pub use store::Workspace;
