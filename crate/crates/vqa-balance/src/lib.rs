//! Storage, experiment runner, annotation HTTP service, and command line
//! front end around `vqa-balance-core`.

pub mod checkpoint;
pub mod experiment;
pub mod manifest;
pub mod store;
pub mod service;
pub mod cli;
