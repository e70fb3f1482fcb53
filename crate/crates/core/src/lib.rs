//! Desk-scale LLM pretraining stack: BPE tokenizer, online data scheduler with
//! multiplexing, content stuffing and file-level resumption, and a miniature
//! pre-norm transformer with its training and fine-tuning loops.

pub mod tokenizer;
pub mod corpus_stream;
pub mod scheduler;
pub mod model;
pub mod trainer;
pub mod sft;
