//! `NYOSTREAM v1` stream checkpoint.
//!
//! ```text
//! NYOSTREAM v1
//! dataset <name> rank <r> completed <k>
//! <path>                    (k lines)
//! cursor <name> <worker>    (round-robin position, one per dataset)
//! sequences <n>             (sequences emitted so far)
//! mux_rng <64 hex chars>
//! shuffle_seed <u64>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus_stream::StreamError;

pub const STREAM_CHECKPOINT_VERSION: u32 = 1;
const HEADER: &str = "NYOSTREAM v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletedFiles {
    pub dataset: String,
    pub rank: usize,
    pub files: Vec<PathBuf>,
}

/// File-granular resume point of one rank's stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamCheckpoint {
    pub version: u32,
    pub completed: Vec<CompletedFiles>,
    pub cursors: BTreeMap<String, usize>,
    pub sequences_emitted: u64,
    pub mux_rng: [u8; 32],
    pub shuffle_seed: u64,
}

fn schema(reason: impl Into<String>) -> StreamError {
    StreamError::SchemaMismatch(reason.into())
}

impl StreamCheckpoint {
    pub fn completed_count(&self) -> usize {
        self.completed.iter().map(|c| c.files.len()).sum()
    }

    /// Union of several ranks' checkpoints, for resuming under a new world size.
    /// Generator state and cursors come from `self`.
    pub fn merged_with(&self, others: &[StreamCheckpoint]) -> StreamCheckpoint {
        let mut out = self.clone();
        for other in others {
            for block in &other.completed {
                match out
                    .completed
                    .iter_mut()
                    .find(|b| b.dataset == block.dataset && b.rank == block.rank)
                {
                    Some(b) => {
                        for f in &block.files {
                            if !b.files.contains(f) {
                                b.files.push(f.clone());
                            }
                        }
                    }
                    None => out.completed.push(block.clone()),
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for block in &self.completed {
            out.push_str(&format!(
                "dataset {} rank {} completed {}\n",
                block.dataset,
                block.rank,
                block.files.len()
            ));
            for f in &block.files {
                out.push_str(&f.to_string_lossy());
                out.push('\n');
            }
        }
        for (name, cursor) in &self.cursors {
            out.push_str(&format!("cursor {name} {cursor}\n"));
        }
        out.push_str(&format!("sequences {}\n", self.sequences_emitted));
        out.push_str(&format!("mux_rng {}\n", hex::encode(self.mux_rng)));
        out.push_str(&format!("shuffle_seed {}\n", self.shuffle_seed));
        out
    }

    pub fn from_text(text: &str) -> Result<Self, StreamError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(HEADER) => {}
            Some(other) if other.starts_with("NYOSTREAM") => {
                return Err(schema(format!("unsupported version `{other}`")))
            }
            _ => return Err(schema("missing NYOSTREAM header")),
        }
        let mut completed = Vec::new();
        let mut cursors = BTreeMap::new();
        let mut sequences = None;
        let mut mux_rng = None;
        let mut shuffle_seed = None;
        while let Some(line) = lines.next() {
            let fields: Vec<&str> = line.split(' ').collect();
            match fields.as_slice() {
                ["dataset", name, "rank", rank, "completed", n] => {
                    let rank = rank.parse().map_err(|_| schema(format!("bad rank in `{line}`")))?;
                    let n: usize = n.parse().map_err(|_| schema(format!("bad count in `{line}`")))?;
                    let mut files = Vec::with_capacity(n);
                    for _ in 0..n {
                        let path = lines.next().ok_or_else(|| schema("truncated file list"))?;
                        files.push(PathBuf::from(path));
                    }
                    completed.push(CompletedFiles {
                        dataset: name.to_string(),
                        rank,
                        files,
                    });
                }
                ["cursor", name, n] => {
                    let n = n.parse().map_err(|_| schema(format!("bad cursor `{line}`")))?;
                    cursors.insert(name.to_string(), n);
                }
                ["sequences", n] => {
                    sequences = Some(n.parse().map_err(|_| schema(format!("bad sequence count `{line}`")))?);
                }
                ["mux_rng", hex_state] => {
                    let bytes = hex::decode(hex_state).map_err(|_| schema("mux_rng is not hex"))?;
                    let state: [u8; 32] = bytes.try_into().map_err(|_| schema("mux_rng must be 32 bytes"))?;
                    mux_rng = Some(state);
                }
                ["shuffle_seed", n] => {
                    shuffle_seed = Some(n.parse().map_err(|_| schema(format!("bad shuffle seed `{line}`")))?);
                }
                [""] => {}
                _ => return Err(schema(format!("unrecognized line `{line}`"))),
            }
        }
        Ok(Self {
            version: STREAM_CHECKPOINT_VERSION,
            completed,
            cursors,
            sequences_emitted: sequences.unwrap_or(0),
            mux_rng: mux_rng.ok_or_else(|| schema("missing mux_rng"))?,
            shuffle_seed: shuffle_seed.ok_or_else(|| schema("missing shuffle_seed"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), StreamError> {
        fs::write(path, self.to_text()).map_err(|source| StreamError::IoFailure {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, StreamError> {
        let text = fs::read_to_string(path).map_err(|source| StreamError::IoFailure {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> StreamCheckpoint {
        StreamCheckpoint {
            version: 1,
            completed: vec![
                CompletedFiles {
                    dataset: "web".into(),
                    rank: 0,
                    files: vec!["/data/web/a.jsonl".into(), "/data/web/b c.jsonl".into()],
                },
                CompletedFiles {
                    dataset: "code".into(),
                    rank: 0,
                    files: vec![],
                },
            ],
            cursors: [("web".to_string(), 1), ("code".to_string(), 0)].into_iter().collect(),
            sequences_emitted: 42,
            mux_rng: std::array::from_fn(|i| i as u8 * 7),
            shuffle_seed: 99,
        }
    }

    #[test]
    fn text_round_trip() {
        let ckpt = sample();
        let text = ckpt.to_text();
        assert!(text.starts_with("NYOSTREAM v1\ndataset web rank 0 completed 2\n/data/web/a.jsonl\n"));
        assert!(text.contains("\nmux_rng 00070e15"));
        assert!(text.ends_with("shuffle_seed 99\n"));
        assert_eq!(StreamCheckpoint::from_text(&text).unwrap(), ckpt);
    }

    #[test]
    fn rejects_other_versions() {
        let text = sample().to_text().replace("NYOSTREAM v1", "NYOSTREAM v2");
        assert!(matches!(StreamCheckpoint::from_text(&text), Err(StreamError::SchemaMismatch(_))));
        assert!(StreamCheckpoint::from_text("garbage").is_err());
        let short = sample().to_text().replace(&hex::encode(sample().mux_rng), "abcd");
        assert!(StreamCheckpoint::from_text(&short).is_err());
    }

    #[test]
    fn merge_unions_files() {
        let a = sample();
        let mut b = sample();
        b.completed[0].files = vec!["/data/web/z.jsonl".into(), "/data/web/a.jsonl".into()];
        b.completed[1].rank = 1;
        let m = a.merged_with(&[b]);
        assert_eq!(m.completed[0].files.len(), 3);
        assert_eq!(m.completed.len(), 3);
    }
}
