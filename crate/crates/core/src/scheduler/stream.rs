use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;
use std::thread;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::TokenBatch;
use super::checkpoint::{CompletedFiles, StreamCheckpoint, STREAM_CHECKPOINT_VERSION};
use super::mux::{DocumentSource, ExhaustionPolicy, MuxState};
use super::pack::{PackedSequence, Packer};
use crate::corpus_stream::{derived_rng, read_documents, worker_split, Document, StreamError, StreamPlan};
use crate::tokenizer::TokenizerModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub context_len: usize,
    pub batch_size: usize,
    pub num_workers: usize,
    /// Per-file record shuffle window; 0 or 1 keeps file order.
    pub shuffle_buffer: usize,
    /// Bounded queue depth between each reader thread and the scheduler.
    pub prefetch_depth: usize,
    pub policy: ExhaustionPolicy,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            context_len: 128,
            batch_size: 8,
            num_workers: 2,
            shuffle_buffer: 0,
            prefetch_depth: 64,
            policy: ExhaustionPolicy::Renormalize,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StreamStats {
    pub documents: u64,
    pub malformed_records: u64,
    pub skipped_empty: u64,
    pub files_completed: u64,
    pub end_reason: Option<String>,
}

enum WorkerItem {
    Doc(Document),
    FileEnd {
        file: Arc<Path>,
        documents: usize,
        malformed: usize,
        skipped_empty: usize,
    },
    Failed(StreamError),
}

fn run_reader(
    tx: SyncSender<WorkerItem>,
    tokenizer: Arc<TokenizerModel>,
    dataset: String,
    files: Vec<PathBuf>,
    shuffle_seed: u64,
    shuffle_buffer: usize,
) {
    for path in files {
        let mut reader = match read_documents(tokenizer.clone(), &path, &dataset) {
            Ok(r) => r,
            Err(e) => {
                let _ = tx.send(WorkerItem::Failed(e));
                return;
            }
        };
        let file = reader.file().clone();
        let mut rng = derived_rng(shuffle_seed, &[b"records", path.to_string_lossy().as_bytes()]);
        let mut window: Vec<Document> = Vec::new();
        let mut emitted = 0usize;
        for doc in reader.by_ref() {
            if shuffle_buffer <= 1 {
                if tx.send(WorkerItem::Doc(doc)).is_err() {
                    return;
                }
                emitted += 1;
                continue;
            }
            window.push(doc);
            if window.len() == shuffle_buffer {
                let i = rng.random_range(0..window.len());
                if tx.send(WorkerItem::Doc(window.swap_remove(i))).is_err() {
                    return;
                }
                emitted += 1;
            }
        }
        while !window.is_empty() {
            let i = rng.random_range(0..window.len());
            if tx.send(WorkerItem::Doc(window.swap_remove(i))).is_err() {
                return;
            }
            emitted += 1;
        }
        let stats = reader.into_stats();
        if let Some(msg) = stats.io_error {
            let _ = tx.send(WorkerItem::Failed(StreamError::IoFailure {
                path,
                source: std::io::Error::other(msg),
            }));
            return;
        }
        let end = WorkerItem::FileEnd {
            file,
            documents: emitted,
            malformed: stats.malformed_lines.len(),
            skipped_empty: stats.skipped_empty,
        };
        if tx.send(end).is_err() {
            return;
        }
    }
}

struct WorkerSlot {
    rx: Option<Receiver<WorkerItem>>,
    lookahead: Option<Document>,
}

#[derive(Default)]
struct FileEvents {
    ends: Vec<(Arc<Path>, usize)>,
    malformed: u64,
    skipped_empty: u64,
    error: Option<StreamError>,
}

/// One dataset's documents on this rank: round-robin over its readers, each
/// with a one-document lookahead so exhaustion is known before the next draw.
struct DatasetSource {
    slots: Vec<WorkerSlot>,
    cursor: usize,
    events: FileEvents,
}

impl DatasetSource {
    fn fill(&mut self, w: usize) {
        let slot = &mut self.slots[w];
        while slot.lookahead.is_none() {
            let Some(rx) = &slot.rx else { return };
            match rx.recv() {
                Ok(WorkerItem::Doc(doc)) => slot.lookahead = Some(doc),
                Ok(WorkerItem::FileEnd {
                    file,
                    documents,
                    malformed,
                    skipped_empty,
                }) => {
                    self.events.ends.push((file, documents));
                    self.events.malformed += malformed as u64;
                    self.events.skipped_empty += skipped_empty as u64;
                }
                Ok(WorkerItem::Failed(e)) => {
                    self.events.error.get_or_insert(e);
                    slot.rx = None;
                }
                Err(_) => slot.rx = None,
            }
        }
    }
}

impl DocumentSource for DatasetSource {
    fn next_document(&mut self) -> Option<Document> {
        let n = self.slots.len();
        for step in 0..n {
            let w = (self.cursor + step) % n;
            if let Some(doc) = self.slots[w].lookahead.take() {
                self.fill(w);
                self.cursor = (w + 1) % n;
                return Some(doc);
            }
        }
        None
    }

    fn is_exhausted(&mut self) -> bool {
        self.slots.iter().all(|s| s.lookahead.is_none())
    }
}

#[derive(Debug, Default)]
struct FileProgress {
    drawn: usize,
    emitted: usize,
    total: Option<usize>,
}

/// The scheduler for one rank: reader threads, multiplexer, packer and batcher,
/// with file-granular checkpointing.
pub struct DataStream {
    plan: StreamPlan,
    rank: usize,
    config: StreamConfig,
    vocab_size: usize,
    shuffle_seed: u64,
    sources: Vec<DatasetSource>,
    mux: MuxState,
    packer: Packer,
    progress: Vec<BTreeMap<PathBuf, FileProgress>>,
    completed: Vec<BTreeSet<PathBuf>>,
    sequences_emitted: u64,
    drained: bool,
    finished: bool,
    stats: StreamStats,
}

impl DataStream {
    /// Starts streaming `rank`'s share of `plan`, optionally resuming from `checkpoint`.
    pub fn open(
        plan: &StreamPlan,
        rank: usize,
        tokenizer: Arc<TokenizerModel>,
        config: &StreamConfig,
        checkpoint: Option<&StreamCheckpoint>,
    ) -> Result<Self, StreamError> {
        if config.context_len < 2 {
            return Err(StreamError::InvalidConfig("context_len must be at least 2".into()));
        }
        if config.batch_size == 0 {
            return Err(StreamError::InvalidConfig("batch_size must be at least 1".into()));
        }
        let workers = worker_split(plan, rank, config.num_workers)?;
        let names: Vec<String> = plan.datasets.iter().map(|d| d.name.clone()).collect();
        let weights: Vec<f64> = plan.datasets.iter().map(|d| d.weight).collect();
        let mux_seed = derived_rng(plan.seed, &[b"mux", &(rank as u64).to_le_bytes()]).random::<u64>();
        let mut mux = MuxState::new(names.clone(), weights, config.policy, mux_seed)?;

        let mut completed: Vec<BTreeSet<PathBuf>> = vec![BTreeSet::new(); plan.datasets.len()];
        let mut cursors = vec![0usize; plan.datasets.len()];
        let mut shuffle_seed = plan.seed;
        let mut sequences_emitted = 0;
        if let Some(ckpt) = checkpoint {
            if ckpt.version != STREAM_CHECKPOINT_VERSION {
                return Err(StreamError::SchemaMismatch(format!("version {}", ckpt.version)));
            }
            for block in &ckpt.completed {
                let d = plan
                    .dataset_index(&block.dataset)
                    .ok_or_else(|| StreamError::PlanMismatch(format!("unknown dataset `{}`", block.dataset)))?;
                for f in &block.files {
                    if !plan.datasets[d].files.contains(f) {
                        return Err(StreamError::PlanMismatch(format!(
                            "file {} is not part of dataset `{}`",
                            f.display(),
                            block.dataset
                        )));
                    }
                    completed[d].insert(f.clone());
                }
            }
            for (name, &c) in &ckpt.cursors {
                if let Some(d) = plan.dataset_index(name) {
                    cursors[d] = c % config.num_workers;
                }
            }
            mux.restore_rng(ckpt.mux_rng);
            shuffle_seed = ckpt.shuffle_seed;
            sequences_emitted = ckpt.sequences_emitted;
        }

        let mut sources = Vec::with_capacity(plan.datasets.len());
        for (d, name) in names.iter().enumerate() {
            let mut slots = Vec::with_capacity(workers.len());
            for worker in &workers {
                let files: Vec<PathBuf> = worker.per_dataset[d]
                    .iter()
                    .filter(|f| !completed[d].contains(*f))
                    .cloned()
                    .collect();
                let (tx, rx) = sync_channel(config.prefetch_depth.max(1));
                let tokenizer = tokenizer.clone();
                let dataset = name.clone();
                let buffer = config.shuffle_buffer;
                thread::Builder::new()
                    .name(format!("reader-{name}-{}", worker.worker))
                    .spawn(move || run_reader(tx, tokenizer, dataset, files, shuffle_seed, buffer))
                    .map_err(|e| StreamError::InvalidConfig(format!("cannot spawn reader: {e}")))?;
                slots.push(WorkerSlot {
                    rx: Some(rx),
                    lookahead: None,
                });
            }
            let mut source = DatasetSource {
                slots,
                cursor: cursors[d],
                events: FileEvents::default(),
            };
            for w in 0..source.slots.len() {
                source.fill(w);
            }
            sources.push(source);
        }

        let mut stream = Self {
            plan: plan.clone(),
            rank,
            config: config.clone(),
            vocab_size: tokenizer.vocab_size(),
            shuffle_seed,
            sources,
            mux,
            packer: Packer::new(config.context_len),
            progress: (0..plan.datasets.len()).map(|_| BTreeMap::new()).collect(),
            completed,
            sequences_emitted,
            drained: false,
            finished: false,
            stats: StreamStats::default(),
        };
        stream.absorb_events()?;
        Ok(stream)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    /// Vocabulary size of the tokenizer feeding this stream.
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn stats(&self) -> &StreamStats {
        &self.stats
    }

    pub fn mux(&self) -> &MuxState {
        &self.mux
    }

    /// Hot-reloads mixture weights; call between batches.
    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<(), StreamError> {
        self.mux.set_weights(weights)
    }

    pub fn completed_files(&self, dataset: usize) -> &BTreeSet<PathBuf> {
        &self.completed[dataset]
    }

    /// True when no file has been partly consumed: resuming from a checkpoint
    /// taken now reproduces the remaining stream exactly.
    pub fn at_file_boundary(&self) -> bool {
        self.progress.iter().all(BTreeMap::is_empty) && self.packer.buffered() == 0
    }

    fn dataset_of(&self, name: &str) -> usize {
        self.plan.dataset_index(name).expect("documents only come from planned datasets")
    }

    fn settle(&mut self, d: usize, file: &Path) {
        let done = matches!(
            self.progress[d].get(file),
            Some(p) if p.total == Some(p.emitted)
        );
        if done {
            self.progress[d].remove(file);
            self.completed[d].insert(file.to_path_buf());
            self.stats.files_completed += 1;
        }
    }

    fn absorb_events(&mut self) -> Result<(), StreamError> {
        for d in 0..self.sources.len() {
            let events = std::mem::take(&mut self.sources[d].events);
            self.stats.malformed_records += events.malformed;
            self.stats.skipped_empty += events.skipped_empty;
            if let Some(e) = events.error {
                return Err(e);
            }
            for (file, total) in events.ends {
                self.progress[d].entry(file.to_path_buf()).or_default().total = Some(total);
                self.settle(d, &file);
            }
        }
        Ok(())
    }

    fn next_sequence(&mut self) -> Result<Option<PackedSequence>, StreamError> {
        loop {
            if let Some(seq) = self.packer.pop() {
                return Ok(Some(seq));
            }
            if self.drained {
                return Ok(self.packer.finish());
            }
            let pulled = self.mux.mux_next(&mut self.sources);
            self.absorb_events()?;
            match pulled {
                Ok((doc, d)) => {
                    self.stats.documents += 1;
                    self.progress[d].entry(doc.file.to_path_buf()).or_default().drawn += 1;
                    self.packer.push(&doc);
                }
                Err(e @ (StreamError::AllExhausted | StreamError::StreamStopped(_))) => {
                    self.stats.end_reason = Some(e.to_string());
                    self.drained = true;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Next batch of up to `batch_size` sequences; `None` once the stream is spent.
    pub fn next_batch(&mut self) -> Result<Option<TokenBatch>, StreamError> {
        if self.finished {
            return Ok(None);
        }
        let mut seqs = Vec::with_capacity(self.config.batch_size);
        while seqs.len() < self.config.batch_size {
            match self.next_sequence()? {
                Some(seq) => seqs.push(seq),
                None => break,
            }
        }
        if seqs.is_empty() {
            self.finished = true;
            return Ok(None);
        }
        for seq in &seqs {
            for seg in seq.segments.iter().filter(|s| s.ends_document) {
                let d = self.dataset_of(&seg.source);
                self.progress[d].entry(seg.file.to_path_buf()).or_default().emitted += 1;
                self.settle(d, &seg.file);
            }
        }
        let batch = TokenBatch::from_sequences(seqs, self.sequences_emitted);
        self.sequences_emitted = batch.metadata.end_sequence;
        Ok(Some(batch))
    }

    /// Snapshot of completed files and generator state. Valid between batches.
    pub fn checkpoint(&self) -> StreamCheckpoint {
        let mut completed = Vec::new();
        for (d, dataset) in self.plan.datasets.iter().enumerate() {
            let mut by_rank: BTreeMap<usize, Vec<PathBuf>> = BTreeMap::new();
            by_rank.entry(self.rank).or_default();
            for f in &self.completed[d] {
                let rank = dataset.rank_of(f, self.plan.world_size).unwrap_or(self.rank);
                by_rank.entry(rank).or_default().push(f.clone());
            }
            completed.extend(by_rank.into_iter().map(|(rank, files)| CompletedFiles {
                dataset: dataset.name.clone(),
                rank,
                files,
            }));
        }
        StreamCheckpoint {
            version: STREAM_CHECKPOINT_VERSION,
            completed,
            cursors: self
                .plan
                .datasets
                .iter()
                .zip(&self.sources)
                .map(|(d, s)| (d.name.clone(), s.cursor))
                .collect(),
            sequences_emitted: self.sequences_emitted,
            mux_rng: self.mux.rng_state(),
            shuffle_seed: self.shuffle_seed,
        }
    }
}

impl Iterator for DataStream {
    type Item = Result<TokenBatch, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch().transpose()
    }
}
