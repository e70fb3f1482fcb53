use std::path::Path;
use std::sync::Arc;

use crate::corpus_stream::Document;
use crate::tokenizer::{TokenId, PAD_ID};

/// A contiguous slice of one document inside a packed sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub source: Arc<str>,
    pub file: Arc<Path>,
    pub index_in_file: usize,
    /// Offset of the first token of the slice inside the sequence.
    pub start: usize,
    pub len: usize,
    /// True when the slice holds the document's final token.
    pub ends_document: bool,
}

/// A fixed-length training window filled with consecutive documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub tokens: Vec<TokenId>,
    /// Offsets (exclusive ends) of every document that finishes inside this window,
    /// strictly increasing.
    pub doc_boundaries: Vec<usize>,
    /// Dataset of each segment, in order.
    pub sources: Vec<Arc<str>>,
    /// Trailing PAD tokens; non-zero only for the last window of a stream.
    pub pad_count: usize,
    pub segments: Vec<Segment>,
}

impl PackedSequence {
    pub fn content_len(&self) -> usize {
        self.tokens.len() - self.pad_count
    }

    /// Exclusive end offset of every segment, including a trailing document piece
    /// that continues into the next window. Ends at `content_len()`.
    pub fn segment_ends(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.start + s.len).collect()
    }
}

/// Rolling buffer that stuffs documents into windows of `context_len` tokens.
///
/// Documents longer than the remaining room continue in the next window.
#[derive(Debug)]
pub struct Packer {
    context_len: usize,
    current: PackedSequence,
    ready: std::collections::VecDeque<PackedSequence>,
}

fn empty_sequence(capacity: usize) -> PackedSequence {
    PackedSequence {
        tokens: Vec::with_capacity(capacity),
        doc_boundaries: Vec::new(),
        sources: Vec::new(),
        pad_count: 0,
        segments: Vec::new(),
    }
}

impl Packer {
    pub fn new(context_len: usize) -> Self {
        assert!(context_len >= 2, "context_len must be at least 2");
        Self {
            context_len,
            current: empty_sequence(context_len),
            ready: Default::default(),
        }
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    /// Tokens waiting for a window to fill.
    pub fn buffered(&self) -> usize {
        self.current.tokens.len()
    }

    pub fn push(&mut self, doc: &Document) {
        let mut offset = 0;
        while offset < doc.tokens.len() {
            let room = self.context_len - self.current.tokens.len();
            let take = room.min(doc.tokens.len() - offset);
            let start = self.current.tokens.len();
            self.current.tokens.extend_from_slice(&doc.tokens[offset..offset + take]);
            offset += take;
            let ends_document = offset == doc.tokens.len();
            if ends_document {
                self.current.doc_boundaries.push(start + take);
            }
            self.current.sources.push(doc.dataset.clone());
            self.current.segments.push(Segment {
                source: doc.dataset.clone(),
                file: doc.file.clone(),
                index_in_file: doc.index_in_file,
                start,
                len: take,
                ends_document,
            });
            if self.current.tokens.len() == self.context_len {
                let full = std::mem::replace(&mut self.current, empty_sequence(self.context_len));
                self.ready.push_back(full);
            }
        }
    }

    pub fn pop(&mut self) -> Option<PackedSequence> {
        self.ready.pop_front()
    }

    /// Pads out and returns the partial window, if any.
    pub fn finish(&mut self) -> Option<PackedSequence> {
        if self.current.tokens.is_empty() {
            return None;
        }
        let mut last = std::mem::replace(&mut self.current, empty_sequence(0));
        last.pad_count = self.context_len - last.tokens.len();
        last.tokens.resize(self.context_len, PAD_ID);
        Some(last)
    }
}

/// Iterator adaptor over [`Packer`].
pub struct Pack<I> {
    docs: I,
    packer: Packer,
    done: bool,
}

impl<I: Iterator<Item = Document>> Iterator for Pack<I> {
    type Item = PackedSequence;

    fn next(&mut self) -> Option<PackedSequence> {
        loop {
            if let Some(seq) = self.packer.pop() {
                return Some(seq);
            }
            if self.done {
                return None;
            }
            match self.docs.next() {
                Some(doc) => self.packer.push(&doc),
                None => {
                    self.done = true;
                    return self.packer.finish();
                }
            }
        }
    }
}

/// Packs a document stream into `context_len` windows.
pub fn pack<I: IntoIterator<Item = Document>>(docs: I, context_len: usize) -> Pack<I::IntoIter> {
    Pack {
        docs: docs.into_iter(),
        packer: Packer::new(context_len),
        done: false,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tokenizer::EOS_ID;

    pub(crate) fn doc_of_len(source: &str, id: usize, len: usize) -> Document {
        let mut tokens: Vec<TokenId> = (0..len - 1).map(|t| 300 + ((id * 7 + t) % 50) as TokenId).collect();
        tokens.push(EOS_ID);
        Document {
            dataset: Arc::from(source),
            file: Arc::from(Path::new(&format!("{source}-{id}.jsonl"))),
            index_in_file: 0,
            tokens,
        }
    }

    /// Concatenate everything, then slice into windows.
    fn concat_slice_oracle(docs: &[Document], context_len: usize) -> Vec<(Vec<TokenId>, Vec<usize>, usize)> {
        let mut flat = Vec::new();
        let mut ends = Vec::new();
        for d in docs {
            flat.extend_from_slice(&d.tokens);
            ends.push(flat.len());
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < flat.len() {
            let end = (start + context_len).min(flat.len());
            let mut window = flat[start..end].to_vec();
            let pad = context_len - window.len();
            window.resize(context_len, PAD_ID);
            let bounds = ends.iter().filter(|&&e| e > start && e <= end).map(|e| e - start).collect();
            out.push((window, bounds, pad));
            start = end;
        }
        out
    }

    fn summary(seqs: &[PackedSequence]) -> Vec<(Vec<TokenId>, Vec<usize>, usize)> {
        seqs.iter()
            .map(|s| (s.tokens.clone(), s.doc_boundaries.clone(), s.pad_count))
            .collect()
    }

    #[test]
    fn six_four_five_into_eight() {
        let docs = vec![doc_of_len("a", 0, 6), doc_of_len("a", 1, 4), doc_of_len("a", 2, 5)];
        let seqs: Vec<_> = pack(docs.clone(), 8).collect();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].doc_boundaries, vec![6]);
        assert_eq!(seqs[0].pad_count, 0);
        assert_eq!(seqs[1].doc_boundaries, vec![2, 7]);
        assert_eq!(seqs[1].pad_count, 1);
        assert_eq!(seqs[1].tokens[7], PAD_ID);
        assert_eq!(seqs[0].segment_ends(), vec![6, 8]);
        assert_eq!(seqs[1].segment_ends(), vec![2, 7]);
        assert_eq!(summary(&seqs), concat_slice_oracle(&docs, 8));
    }

    #[test]
    fn exact_fit() {
        let docs = vec![doc_of_len("a", 0, 16)];
        let seqs: Vec<_> = pack(docs, 16).collect();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].doc_boundaries, vec![16]);
        assert_eq!(seqs[0].pad_count, 0);
    }

    #[test]
    fn long_document_spans_windows() {
        let docs = vec![doc_of_len("a", 0, 20)];
        let seqs: Vec<_> = pack(docs.clone(), 8).collect();
        assert_eq!(seqs.len(), 3);
        assert!(seqs[0].doc_boundaries.is_empty());
        assert_eq!(seqs[2].doc_boundaries, vec![4]);
        assert_eq!(summary(&seqs), concat_slice_oracle(&docs, 8));
    }

    #[test]
    fn empty_stream() {
        assert_eq!(pack(Vec::new(), 8).count(), 0);
    }

    proptest::proptest! {
        #[test]
        fn matches_oracle_and_unpacks(lens in proptest::collection::vec(1usize..40, 0..60), ctx in 2usize..33) {
            let docs: Vec<Document> = lens.iter().enumerate().map(|(i, &l)| doc_of_len(if i % 3 == 0 { "a" } else { "b" }, i, l)).collect();
            let seqs: Vec<_> = pack(docs.clone(), ctx).collect();
            proptest::prop_assert_eq!(summary(&seqs), concat_slice_oracle(&docs, ctx));
            for s in &seqs[..seqs.len().saturating_sub(1)] {
                proptest::prop_assert_eq!(s.pad_count, 0);
            }
            // de-pack: strip pads, split at document ends
            let mut rebuilt: Vec<Vec<TokenId>> = vec![Vec::new()];
            for s in &seqs {
                for seg in &s.segments {
                    rebuilt.last_mut().unwrap().extend_from_slice(&s.tokens[seg.start..seg.start + seg.len]);
                    if seg.ends_document {
                        rebuilt.push(Vec::new());
                    }
                }
                proptest::prop_assert_eq!(s.segment_ends().last().copied().unwrap_or(0), s.content_len());
                proptest::prop_assert_eq!(s.sources.len(), s.segments.len());
            }
            rebuilt.pop();
            let original: Vec<Vec<TokenId>> = docs.iter().map(|d| d.tokens.clone()).collect();
            proptest::prop_assert_eq!(rebuilt, original);
        }
    }
}
