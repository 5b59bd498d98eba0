pub mod dataset;
pub mod harness;
pub mod lang;
pub mod models;
pub mod nn;
pub mod par;
pub mod preset;
pub mod scene;
pub mod seed;
pub mod semantics;
