pub mod classify;
pub mod decode;
pub mod harness;
pub mod metrics;
pub mod ontology;
pub mod prompt;
pub mod retrieve;
pub mod text;
