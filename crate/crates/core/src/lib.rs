pub mod exec;
pub mod graph;
pub mod index;
pub mod model;
pub mod reduce;
pub mod provider;
pub mod text;
pub mod pipeline;
pub mod reading;
pub mod storage;
pub mod store;
pub mod harness;
