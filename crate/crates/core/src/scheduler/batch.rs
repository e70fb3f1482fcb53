use std::collections::BTreeMap;

use serde::Serialize;

use super::pack::PackedSequence;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchMetadata {
    /// Non-pad tokens contributed by each dataset.
    pub source_tokens: BTreeMap<String, usize>,
    pub pad_tokens: usize,
    /// Global index of the first sequence in this batch.
    pub first_sequence: u64,
    /// One past the global index of the last sequence.
    pub end_sequence: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub sequences: Vec<PackedSequence>,
    pub metadata: BatchMetadata,
}

impl TokenBatch {
    pub fn from_sequences(sequences: Vec<PackedSequence>, first_sequence: u64) -> Self {
        let mut source_tokens = BTreeMap::new();
        let mut pad_tokens = 0;
        for seq in &sequences {
            pad_tokens += seq.pad_count;
            for seg in &seq.segments {
                *source_tokens.entry(seg.source.to_string()).or_insert(0) += seg.len;
            }
        }
        let end_sequence = first_sequence + sequences.len() as u64;
        Self {
            sequences,
            metadata: BatchMetadata {
                source_tokens,
                pad_tokens,
                first_sequence,
                end_sequence,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Groups consecutive sequences; the last batch may be short.
pub struct Batch<I> {
    seqs: I,
    batch_size: usize,
    next_index: u64,
}

impl<I: Iterator<Item = PackedSequence>> Iterator for Batch<I> {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        let chunk: Vec<PackedSequence> = self.seqs.by_ref().take(self.batch_size).collect();
        if chunk.is_empty() {
            return None;
        }
        let batch = TokenBatch::from_sequences(chunk, self.next_index);
        self.next_index = batch.metadata.end_sequence;
        Some(batch)
    }
}

pub fn batch<I: IntoIterator<Item = PackedSequence>>(seqs: I, batch_size: usize) -> Batch<I::IntoIter> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    Batch {
        seqs: seqs.into_iter(),
        batch_size,
        next_index: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::super::pack::{pack, tests::doc_of_len};
    use super::*;

    #[test]
    fn ten_sequences_by_four() {
        let docs: Vec<_> = (0..10).map(|i| doc_of_len("a", i, 8)).collect();
        let sizes: Vec<usize> = batch(pack(docs, 8), 4).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn metadata_counts() {
        let docs: Vec<_> = (0..25)
            .map(|i| doc_of_len(if i % 2 == 0 { "web" } else { "code" }, i, 3 + (i * 5) % 11))
            .collect();
        let total: usize = docs.iter().map(|d| d.tokens.len()).sum();
        let mut seen = 0;
        let mut expected_first = 0;
        for b in batch(pack(docs, 16), 3) {
            let counted: usize = b.metadata.source_tokens.values().sum();
            assert_eq!(counted, b.len() * 16 - b.metadata.pad_tokens);
            // recount from segment provenance
            for (name, &n) in &b.metadata.source_tokens {
                let recount: usize = b
                    .sequences
                    .iter()
                    .flat_map(|s| s.segments.iter())
                    .filter(|seg| &*seg.source == name)
                    .map(|seg| seg.len)
                    .sum();
                assert_eq!(n, recount);
            }
            assert_eq!(b.metadata.first_sequence, expected_first);
            expected_first = b.metadata.end_sequence;
            seen += counted;
        }
        assert_eq!(seen, total);
    }
}
