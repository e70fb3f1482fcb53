use serde::{Deserialize, Serialize};

use super::pretokenize::{normalize, split_normalized, PretokenKind};
use super::{TokenizerError, TokenizerModel};

/// Corpus-level tokenizer efficiency measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenizerMetrics {
    /// UTF-8 bytes per emitted token.
    pub compression_rate: f64,
    /// Tokens per whitespace-delimited word.
    pub fertility: f64,
    /// Share of word tokens that do not start a word.
    pub continued_word_proportion: f64,
}

/// Raw counts behind [`TokenizerMetrics`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MetricCounts {
    pub bytes: u64,
    pub tokens: u64,
    pub words: u64,
    pub word_tokens: u64,
}

impl MetricCounts {
    fn finish(self) -> Result<TokenizerMetrics, TokenizerError> {
        if self.bytes == 0 || self.tokens == 0 {
            return Err(TokenizerError::EmptyCorpus);
        }
        let (fertility, continued) = if self.words == 0 {
            (0.0, 0.0)
        } else {
            (
                self.word_tokens as f64 / self.words as f64,
                (self.word_tokens - self.words) as f64 / self.word_tokens as f64,
            )
        };
        Ok(TokenizerMetrics {
            compression_rate: self.bytes as f64 / self.tokens as f64,
            fertility,
            continued_word_proportion: continued,
        })
    }
}

/// Word tokens are the tokens emitted for the non-whitespace pretokens (word and
/// digit pieces); a word is a maximal run of non-whitespace characters. BOS/EOS
/// are never counted.
pub fn compute_metrics<I, S>(model: &TokenizerModel, corpus: I) -> Result<TokenizerMetrics, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts = MetricCounts::default();
    let mut ids = Vec::new();
    for record in corpus {
        let text = normalize(record.as_ref());
        counts.bytes += text.len() as u64;
        counts.words += text.split_whitespace().count() as u64;
        for pretoken in split_normalized(&text) {
            ids.clear();
            model.encode_pretoken(&pretoken, &mut ids);
            counts.tokens += ids.len() as u64;
            if matches!(pretoken.kind, PretokenKind::Word | PretokenKind::Digit) {
                counts.word_tokens += ids.len() as u64;
            }
        }
    }
    counts.finish()
}

#[cfg(test)]
mod tests {
    use super::super::{train_bpe, RESERVED_VOCAB};
    use super::*;

    #[test]
    fn aa_aa_micro_corpus() {
        // alphabet {a} + merge (a, a)
        let model = train_bpe(["aa aa"], RESERVED_VOCAB + 2).unwrap();
        assert_eq!(model.encode("aa aa", false).len(), 3);
        let m = compute_metrics(&model, ["aa aa"]).unwrap();
        assert!((m.compression_rate - 5.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.fertility, 1.0);
        assert_eq!(m.continued_word_proportion, 0.0);
    }

    #[test]
    fn two_token_words() {
        // alphabet {a, b}, no merges: every "ab" is two tokens
        let model = train_bpe(["ab ab"], RESERVED_VOCAB + 2).unwrap();
        let m = compute_metrics(&model, ["ab ab ab"]).unwrap();
        assert_eq!(m.fertility, 2.0);
        assert_eq!(m.continued_word_proportion, 0.5);
    }

    #[test]
    fn single_character() {
        let model = train_bpe(["a"], 300).unwrap();
        let m = compute_metrics(&model, ["a"]).unwrap();
        assert_eq!(m.fertility, 1.0);
        assert_eq!(m.compression_rate, 1.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let model = train_bpe(["a"], 300).unwrap();
        assert!(matches!(compute_metrics(&model, [""]), Err(TokenizerError::EmptyCorpus)));
        assert!(matches!(
            compute_metrics(&model, Vec::<String>::new()),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn invariants_hold_with_digits_and_fallback() {
        let model = train_bpe(["hello world", "x1y2"], 310).unwrap();
        let m = compute_metrics(&model, ["abc123 \tδέλτα  9", "zz"]).unwrap();
        assert!(m.compression_rate > 0.0);
        assert!(m.fertility >= 1.0);
        assert!((0.0..1.0).contains(&m.continued_word_proportion));
    }
}
