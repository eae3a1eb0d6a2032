//! Style- and content-conditioned LSTM language modeling.

pub mod corpus;
pub mod schema;
pub mod bpe;
pub mod model;
pub mod trainer;
pub mod sampler;
pub mod evalsuite;
