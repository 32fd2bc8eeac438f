pub mod annotation;
pub mod config;
pub mod corpus;
pub mod experiment;
pub mod gateway;
pub mod jsonl;
pub mod metrics;
pub mod prompt;
pub mod sampling;
pub mod synthesis;
pub mod train;
