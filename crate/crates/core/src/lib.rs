pub mod corpus;
pub mod endpoint;
pub mod generate;
pub mod text;
pub mod retrieval;
pub mod kag;
pub mod transcript;
pub mod agent;
pub mod metrics;
pub mod rewards;
pub mod pairs;
