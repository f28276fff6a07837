pub mod corpus_ops;
pub mod eval;
pub mod prepare;
pub mod train;
