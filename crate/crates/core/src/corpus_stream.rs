//! File planning and document reading: enumerate each dataset's files, shuffle
//! them with a fixed seed, deal them out to ranks and workers, and turn JSONL
//! records into EOS-terminated token streams.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::tokenizer::{TokenId, TokenizerModel, EOS_ID};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("dataset `{0}` matched no files")]
    NoFilesMatched(String),
    #[error("invalid dataset configuration: {0}")]
    InvalidDatasets(String),
    #[error("rank {rank} out of range for world size {world_size}")]
    RankOutOfRange { rank: usize, world_size: usize },
    #[error("num_workers must be at least 1")]
    NoWorkers,
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record in {path} at line {line}")]
    MalformedRecord { path: PathBuf, line: usize },
    #[error("unsupported stream checkpoint: {0}")]
    SchemaMismatch(String),
    #[error("stream checkpoint does not match the current plan: {0}")]
    PlanMismatch(String),
    #[error("all weighted streams are exhausted")]
    AllExhausted,
    #[error("stream `{0}` ran out under the stop policy")]
    StreamStopped(String),
    #[error("invalid stream configuration: {0}")]
    InvalidConfig(String),
}

/// One data source with its mixture weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub root: PathBuf,
    pub weight: f64,
    #[serde(default = "default_glob")]
    pub file_glob: String,
}

fn default_glob() -> String {
    "*.jsonl".to_string()
}

/// Checks names are unique single words and weights are usable.
pub fn validate_specs(specs: &[DatasetSpec]) -> Result<(), StreamError> {
    if specs.is_empty() {
        return Err(StreamError::InvalidDatasets("no datasets configured".into()));
    }
    let mut total = 0.0;
    for (i, spec) in specs.iter().enumerate() {
        if spec.name.is_empty() || spec.name.chars().any(char::is_whitespace) {
            return Err(StreamError::InvalidDatasets(format!(
                "dataset name {:?} must be non-empty without whitespace",
                spec.name
            )));
        }
        if specs[..i].iter().any(|s| s.name == spec.name) {
            return Err(StreamError::InvalidDatasets(format!("duplicate dataset name `{}`", spec.name)));
        }
        if !(spec.weight.is_finite() && spec.weight >= 0.0) {
            return Err(StreamError::InvalidDatasets(format!(
                "dataset `{}` has invalid weight {}",
                spec.name, spec.weight
            )));
        }
        total += spec.weight;
    }
    if total <= 0.0 {
        return Err(StreamError::InvalidDatasets("dataset weights sum to zero".into()));
    }
    Ok(())
}

/// Stable 64-bit FNV-1a, used to derive per-dataset seeds.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub(crate) fn derived_rng(seed: u64, parts: &[&[u8]]) -> Xoshiro256StarStar {
    let mut h = seed;
    for part in parts {
        h = fnv1a(&[&h.to_le_bytes()[..], part].concat());
    }
    Xoshiro256StarStar::seed_from_u64(h)
}

/// File list of one dataset after the seeded shuffle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetPlan {
    pub name: String,
    pub weight: f64,
    pub files: Vec<PathBuf>,
}

impl DatasetPlan {
    pub fn rank_of(&self, file: &Path, world_size: usize) -> Option<usize> {
        self.files.iter().position(|f| f == file).map(|i| i % world_size)
    }
}

/// Assignment of every matched file to exactly one rank.
///
/// File `i` of a dataset's shuffled list goes to rank `i % world_size`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamPlan {
    pub seed: u64,
    pub world_size: usize,
    pub datasets: Vec<DatasetPlan>,
}

impl StreamPlan {
    pub fn rank_files(&self, dataset: usize, rank: usize) -> Vec<PathBuf> {
        self.datasets[dataset]
            .files
            .iter()
            .skip(rank)
            .step_by(self.world_size)
            .cloned()
            .collect()
    }

    pub fn dataset_index(&self, name: &str) -> Option<usize> {
        self.datasets.iter().position(|d| d.name == name)
    }
}

fn matching_files(spec: &DatasetSpec) -> Result<Vec<PathBuf>, StreamError> {
    let pattern = glob::Pattern::new(&spec.file_glob)
        .map_err(|e| StreamError::InvalidDatasets(format!("dataset `{}`: bad glob: {e}", spec.name)))?;
    let mut files = Vec::new();
    for entry in WalkDir::new(&spec.root).follow_links(true) {
        let entry = entry.map_err(|e| StreamError::IoFailure {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| spec.root.clone()),
            source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk failed")),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(&spec.root).unwrap_or(entry.path());
        if pattern.matches_path(rel) {
            files.push(entry.into_path());
        }
    }
    files.sort();
    Ok(files)
}

/// Enumerates, shuffles and deals out every dataset's files.
pub fn plan_stream(specs: &[DatasetSpec], seed: u64, world_size: usize) -> Result<StreamPlan, StreamError> {
    validate_specs(specs)?;
    if world_size == 0 {
        return Err(StreamError::InvalidConfig("world_size must be at least 1".into()));
    }
    let mut datasets = Vec::with_capacity(specs.len());
    for spec in specs {
        let files = matching_files(spec)?;
        if files.is_empty() {
            return Err(StreamError::NoFilesMatched(spec.name.clone()));
        }
        datasets.push(DatasetPlan {
            name: spec.name.clone(),
            weight: spec.weight,
            files: shuffle_files(files, seed, &spec.name),
        });
    }
    Ok(StreamPlan {
        seed,
        world_size,
        datasets,
    })
}

/// Seeded shuffle of a sorted file list; a pure function of (files, seed, name).
pub fn shuffle_files(mut files: Vec<PathBuf>, seed: u64, dataset: &str) -> Vec<PathBuf> {
    files.sort();
    files.shuffle(&mut derived_rng(seed, &[b"plan", dataset.as_bytes()]));
    files
}

/// Files one worker of a rank reads, per dataset (indexed like the plan).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerFiles {
    pub worker: usize,
    pub per_dataset: Vec<Vec<PathBuf>>,
}

/// Partitions a rank's files among `num_workers` readers.
///
/// Each dataset's rank list is reshuffled with a (seed, dataset, rank) generator,
/// then worker `j` takes positions `j, j + num_workers, ...`.
pub fn worker_split(plan: &StreamPlan, rank: usize, num_workers: usize) -> Result<Vec<WorkerFiles>, StreamError> {
    if rank >= plan.world_size {
        return Err(StreamError::RankOutOfRange {
            rank,
            world_size: plan.world_size,
        });
    }
    if num_workers == 0 {
        return Err(StreamError::NoWorkers);
    }
    let mut workers: Vec<WorkerFiles> = (0..num_workers)
        .map(|worker| WorkerFiles {
            worker,
            per_dataset: vec![Vec::new(); plan.datasets.len()],
        })
        .collect();
    for (d, dataset) in plan.datasets.iter().enumerate() {
        let mut files = plan.rank_files(d, rank);
        if num_workers > 1 {
            files.shuffle(&mut derived_rng(
                plan.seed,
                &[b"workers", dataset.name.as_bytes(), &(rank as u64).to_le_bytes()],
            ));
        }
        for (i, file) in files.into_iter().enumerate() {
            workers[i % num_workers].per_dataset[d].push(file);
        }
    }
    Ok(workers)
}

/// One tokenized record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub dataset: Arc<str>,
    pub file: Arc<Path>,
    /// Zero-based line number of the record.
    pub index_in_file: usize,
    /// Encoded text followed by EOS.
    pub tokens: Vec<TokenId>,
}

#[derive(Deserialize)]
struct Record {
    text: String,
    #[serde(default)]
    #[allow(dead_code)]
    meta: Option<serde_json::Map<String, serde_json::Value>>,
}

/// Counters collected while reading one file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReadStats {
    pub documents: usize,
    pub skipped_empty: usize,
    /// Line numbers (1-based) of records that failed to parse.
    pub malformed_lines: Vec<usize>,
    /// Set when reading stopped early on an I/O error.
    pub io_error: Option<String>,
}

/// Sequential reader over one JSONL corpus file.
pub struct DocumentReader {
    tokenizer: Arc<TokenizerModel>,
    dataset: Arc<str>,
    file: Arc<Path>,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    stats: ReadStats,
}

impl DocumentReader {
    pub fn stats(&self) -> &ReadStats {
        &self.stats
    }

    pub fn file(&self) -> &Arc<Path> {
        &self.file
    }

    pub fn into_stats(self) -> ReadStats {
        self.stats
    }
}

impl Iterator for DocumentReader {
    type Item = Document;

    fn next(&mut self) -> Option<Document> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => {
                    self.stats.io_error = Some(e.to_string());
                    return None;
                }
            };
            let index = self.line_no;
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(_) => {
                    log::warn!("{}", StreamError::MalformedRecord { path: self.file.to_path_buf(), line: index + 1 });
                    self.stats.malformed_lines.push(index + 1);
                    continue;
                }
            };
            if record.text.is_empty() {
                self.stats.skipped_empty += 1;
                continue;
            }
            let mut tokens = self.tokenizer.encode(&record.text, false);
            tokens.push(EOS_ID);
            self.stats.documents += 1;
            return Some(Document {
                dataset: self.dataset.clone(),
                file: self.file.clone(),
                index_in_file: index,
                tokens,
            });
        }
    }
}

/// Opens `file` for reading as part of `dataset`.
pub fn read_documents(
    tokenizer: Arc<TokenizerModel>,
    file: &Path,
    dataset: &str,
) -> Result<DocumentReader, StreamError> {
    let handle = File::open(file).map_err(|source| StreamError::IoFailure {
        path: file.to_path_buf(),
        source,
    })?;
    Ok(DocumentReader {
        tokenizer,
        dataset: Arc::from(dataset),
        file: Arc::from(file),
        lines: BufReader::new(handle).lines(),
        line_no: 0,
        stats: ReadStats::default(),
    })
}

/// Raw `text` fields of one JSONL file, skipping blank, empty and malformed
/// records exactly as [`DocumentReader`] does.
pub fn read_record_texts(file: &Path) -> Result<(Vec<String>, ReadStats), StreamError> {
    let io = |source| StreamError::IoFailure {
        path: file.to_path_buf(),
        source,
    };
    let mut stats = ReadStats::default();
    let mut texts = Vec::new();
    for (index, line) in BufReader::new(File::open(file).map_err(io)?).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(&line) {
            Ok(r) if r.text.is_empty() => stats.skipped_empty += 1,
            Ok(r) => {
                stats.documents += 1;
                texts.push(r.text);
            }
            Err(_) => stats.malformed_lines.push(index + 1),
        }
    }
    Ok((texts, stats))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;
    use std::fs;

    use super::*;
    use crate::tokenizer::{train_bpe, DIGIT_BASE};

    fn make_dataset(dir: &Path, name: &str, n_files: usize) -> DatasetSpec {
        let root = dir.join(name);
        fs::create_dir_all(&root).unwrap();
        for i in 0..n_files {
            fs::write(root.join(format!("part-{i:03}.jsonl")), format!("{{\"text\": \"doc {i}\"}}\n")).unwrap();
        }
        fs::write(root.join("README.txt"), "not a shard").unwrap();
        DatasetSpec {
            name: name.into(),
            root,
            weight: 1.0,
            file_glob: "*.jsonl".into(),
        }
    }

    fn tokenizer() -> Arc<TokenizerModel> {
        Arc::new(train_bpe(["hello world doc text"], 320).unwrap())
    }

    #[test]
    fn ten_files_four_ranks() {
        let dir = tempfile::tempdir().unwrap();
        let spec = make_dataset(dir.path(), "web", 10);
        let plan = plan_stream(&[spec], 7, 4).unwrap();
        assert_eq!(plan.datasets[0].files.len(), 10);
        let counts: Vec<usize> = (0..4).map(|r| plan.rank_files(0, r).len()).collect();
        // oracle: round-robin counting
        let oracle: Vec<usize> = (0..4).map(|r| (0..10).filter(|i| i % 4 == r).count()).collect();
        assert_eq!(counts, oracle);
        assert_eq!(counts, vec![3, 3, 2, 2]);
    }

    #[test]
    fn single_rank_owns_everything() {
        let dir = tempfile::tempdir().unwrap();
        let spec = make_dataset(dir.path(), "web", 5);
        let plan = plan_stream(&[spec], 1, 1).unwrap();
        assert_eq!(plan.rank_files(0, 0), plan.datasets[0].files);
    }

    #[test]
    fn planning_is_deterministic_and_seed_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let spec = make_dataset(dir.path(), "web", 30);
        let a = plan_stream(&[spec.clone()], 11, 3).unwrap();
        let b = plan_stream(&[spec.clone()], 11, 3).unwrap();
        let c = plan_stream(&[spec], 12, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.datasets[0].files, c.datasets[0].files);
    }

    #[test]
    fn no_matching_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = make_dataset(dir.path(), "web", 2);
        spec.file_glob = "*.parquet".into();
        assert!(matches!(plan_stream(&[spec], 0, 1), Err(StreamError::NoFilesMatched(n)) if n == "web"));
    }

    #[test]
    fn rejects_bad_specs() {
        let dir = tempfile::tempdir().unwrap();
        let a = make_dataset(dir.path(), "a", 1);
        let mut dup = a.clone();
        dup.weight = 2.0;
        assert!(plan_stream(&[a.clone(), dup], 0, 1).is_err());
        let mut zero = a.clone();
        zero.weight = 0.0;
        assert!(plan_stream(&[zero], 0, 1).is_err());
        let mut neg = a;
        neg.weight = -1.0;
        assert!(plan_stream(&[neg], 0, 1).is_err());
    }

    #[test]
    fn rebalance_preserves_union() {
        let dir = tempfile::tempdir().unwrap();
        let spec = make_dataset(dir.path(), "web", 17);
        for ws in 1..6 {
            let plan = plan_stream(&[spec.clone()], 3, ws).unwrap();
            let mut union: Vec<PathBuf> = (0..ws).flat_map(|r| plan.rank_files(0, r)).collect();
            union.sort();
            let mut all = plan.datasets[0].files.clone();
            all.sort();
            assert_eq!(union, all);
            let sizes: Vec<usize> = (0..ws).map(|r| plan.rank_files(0, r).len()).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn worker_partitions() {
        let dir = tempfile::tempdir().unwrap();
        let spec = make_dataset(dir.path(), "web", 5);
        let plan = plan_stream(&[spec], 5, 1).unwrap();

        let one = worker_split(&plan, 0, 1).unwrap();
        assert_eq!(one[0].per_dataset[0], plan.rank_files(0, 0));

        let two = worker_split(&plan, 0, 2).unwrap();
        let sizes: Vec<usize> = two.iter().map(|w| w.per_dataset[0].len()).collect();
        assert_eq!(sizes, vec![3, 2]);
        let mut union: Vec<PathBuf> = two.iter().flat_map(|w| w.per_dataset[0].clone()).collect();
        let distinct: BTreeSet<_> = union.iter().cloned().collect();
        assert_eq!(distinct.len(), union.len());
        union.sort();
        let mut rank = plan.rank_files(0, 0);
        rank.sort();
        assert_eq!(union, rank);

        assert_eq!(two, worker_split(&plan, 0, 2).unwrap());
        assert!(matches!(worker_split(&plan, 1, 2), Err(StreamError::RankOutOfRange { .. })));
        assert!(matches!(worker_split(&plan, 0, 0), Err(StreamError::NoWorkers)));
    }

    #[test]
    fn reads_records_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        fs::write(
            &path,
            "{\"text\": \"hello\"}\n{\"text\": \"world\", \"meta\": {\"lang\": \"en\"}}\n{\"text\": \"2024\"}\n",
        )
        .unwrap();
        let docs: Vec<Document> = read_documents(tokenizer(), &path, "web").unwrap().collect();
        assert_eq!(docs.iter().map(|d| d.index_in_file).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(docs.iter().all(|d| d.tokens.last() == Some(&EOS_ID)));
        assert_eq!(
            docs[2].tokens,
            vec![DIGIT_BASE + 2, DIGIT_BASE, DIGIT_BASE + 2, DIGIT_BASE + 4, EOS_ID]
        );
        assert_eq!(&*docs[0].dataset, "web");
    }

    #[test]
    fn skips_empty_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        fs::write(&path, "{\"text\": \"\"}\nnot json\n{\"meta\": {}}\n\n{\"text\": \"ok\"}\n").unwrap();
        let mut reader = read_documents(tokenizer(), &path, "web").unwrap();
        let docs: Vec<Document> = reader.by_ref().collect();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].index_in_file, 4);
        let stats = reader.into_stats();
        assert_eq!(stats.skipped_empty, 1);
        assert_eq!(stats.malformed_lines, vec![2, 3]);
    }

    #[test]
    fn missing_file_is_io_failure() {
        let err = read_documents(tokenizer(), Path::new("/nonexistent/x.jsonl"), "web").err().unwrap();
        assert!(matches!(err, StreamError::IoFailure { .. }));
    }
}
