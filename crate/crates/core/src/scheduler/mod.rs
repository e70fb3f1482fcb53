//! Online data scheduler: weighted multiplexing of dataset streams, content
//! stuffing into fixed windows, batching and file-granular checkpoints.

mod batch;
mod checkpoint;
mod mux;
mod pack;
mod stream;

pub use batch::{batch, Batch, BatchMetadata, TokenBatch};
pub use checkpoint::{CompletedFiles, StreamCheckpoint, STREAM_CHECKPOINT_VERSION};
pub use mux::{DocumentSource, ExhaustionPolicy, MuxState};
pub use pack::{pack, Pack, PackedSequence, Packer, Segment};
pub use stream::{DataStream, StreamConfig, StreamStats};
