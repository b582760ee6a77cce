pub mod coherence;
pub mod corpus;
pub mod evalio;
pub mod fim;
pub mod framegrid;
pub mod fsio;
pub mod llm;
pub mod metrics;
pub mod numeric;
pub mod parser;
pub mod pipeline;
pub mod timeline;
