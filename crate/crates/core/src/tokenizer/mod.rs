//! Byte-pair-encoding tokenizer with atomic digits, whitespace-run tokens and
//! byte fallback.
//!
//! Vocabulary layout (ids are dense):
//!
//! | ids         | tokens                                        |
//! |-------------|-----------------------------------------------|
//! | 0, 1, 2     | `<s>` (BOS), `</s>` (EOS), `<pad>`            |
//! | 3 ..= 258   | byte fallback, one per byte value             |
//! | 259 ..= 282 | runs of 1..=24 U+0020 characters              |
//! | 283 ..= 292 | the digits `0` ..= `9`                        |
//! | 293 ..      | learned text tokens (alphabet, then merges)   |
//!
//! Byte tokens are named `<byte-XY>` where each nibble is spelled with a
//! letter `a`..`p`, so no reserved name contains a digit.

mod metrics;
mod pretokenize;
mod serialize;
mod train;

use std::collections::HashMap;

use thiserror::Error;

pub use metrics::{compute_metrics, TokenizerMetrics};
pub use pretokenize::{normalize, pretokenize, Pretoken, PretokenKind, MAX_SPACE_RUN};
pub use train::{train_bpe, train_bpe_detailed, MergeRecord, TrainerOptions};

pub type TokenId = u32;

pub const BOS_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const PAD_ID: TokenId = 2;
pub const BYTE_BASE: TokenId = 3;
pub const SPACE_BASE: TokenId = BYTE_BASE + 256;
pub const DIGIT_BASE: TokenId = SPACE_BASE + MAX_SPACE_RUN as TokenId;
pub const FIRST_LEARNED_ID: TokenId = DIGIT_BASE + 10;

/// Number of ids reserved before any learned token.
pub const RESERVED_VOCAB: usize = FIRST_LEARNED_ID as usize;

/// Desk-scale default vocabulary size.
pub const DEFAULT_VOCAB_SIZE: usize = 512;
/// Vocabulary size of the full-scale multilingual tokenizer. Never trained here.
pub const FULL_SCALE_VOCAB_SIZE: usize = 139_776;

pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const PAD_TOKEN: &str = "<pad>";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus contains no text")]
    EmptyCorpus,
    #[error("target vocabulary size {target} cannot hold the {reserved} reserved tokens plus at least one learned token")]
    TargetTooSmall { target: usize, reserved: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    IdOutOfRange { id: TokenId, vocab_size: usize },
    #[error("malformed tokenizer file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Classification of a vocabulary id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Bos,
    Eos,
    Pad,
    Byte(u8),
    SpaceRun(usize),
    Digit(u8),
    Text,
}

pub fn token_kind(id: TokenId) -> TokenKind {
    match id {
        BOS_ID => TokenKind::Bos,
        EOS_ID => TokenKind::Eos,
        PAD_ID => TokenKind::Pad,
        id if id < SPACE_BASE => TokenKind::Byte((id - BYTE_BASE) as u8),
        id if id < DIGIT_BASE => TokenKind::SpaceRun((id - SPACE_BASE) as usize + 1),
        id if id < FIRST_LEARNED_ID => TokenKind::Digit((id - DIGIT_BASE) as u8),
        _ => TokenKind::Text,
    }
}

pub(crate) fn byte_token_name(b: u8) -> String {
    let nibble = |n: u8| (b'a' + n) as char;
    format!("<byte-{}{}>", nibble(b >> 4), nibble(b & 0x0f))
}

pub(crate) fn reserved_vocab() -> Vec<String> {
    let mut vocab = Vec::with_capacity(RESERVED_VOCAB);
    vocab.push(BOS_TOKEN.to_string());
    vocab.push(EOS_TOKEN.to_string());
    vocab.push(PAD_TOKEN.to_string());
    vocab.extend((0..=255u8).map(byte_token_name));
    vocab.extend((1..=MAX_SPACE_RUN).map(|n| " ".repeat(n)));
    vocab.extend((0..10).map(|d| d.to_string()));
    vocab
}

#[derive(Debug, Clone, Copy)]
struct MergeRule {
    rank: usize,
    result: TokenId,
}

/// Trained tokenizer. Immutable once built and shareable across threads.
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    vocab: Vec<String>,
    /// Learned text tokens only.
    text_index: HashMap<String, TokenId>,
    merges: Vec<(TokenId, TokenId)>,
    merge_rules: HashMap<(TokenId, TokenId), MergeRule>,
}

#[derive(Clone, Copy)]
enum Symbol {
    Known(TokenId),
    Unknown(char),
}

impl TokenizerModel {
    /// Builds a model from learned text tokens (ids from [`FIRST_LEARNED_ID`]) and
    /// ordered merges. Each merge's concatenation must already be a text token.
    pub(crate) fn from_parts(
        learned: Vec<String>,
        merges: Vec<(TokenId, TokenId)>,
    ) -> Result<Self, TokenizerError> {
        let mut vocab = reserved_vocab();
        let mut text_index = HashMap::with_capacity(learned.len());
        for token in learned {
            let id = vocab.len() as TokenId;
            if token.is_empty() {
                return Err(TokenizerError::Malformed {
                    line: 0,
                    reason: format!("empty token at id {id}"),
                });
            }
            if vocab[..RESERVED_VOCAB].contains(&token) || text_index.insert(token.clone(), id).is_some() {
                return Err(TokenizerError::Malformed {
                    line: 0,
                    reason: format!("duplicate token {token:?}"),
                });
            }
            vocab.push(token);
        }
        let mut merge_rules = HashMap::with_capacity(merges.len());
        for (rank, &(left, right)) in merges.iter().enumerate() {
            let (Some(l), Some(r)) = (vocab.get(left as usize), vocab.get(right as usize)) else {
                return Err(TokenizerError::Malformed {
                    line: 0,
                    reason: format!("merge {rank} references unknown ids"),
                });
            };
            let joined = format!("{l}{r}");
            let Some(&result) = text_index.get(&joined) else {
                return Err(TokenizerError::Malformed {
                    line: 0,
                    reason: format!("merge {rank} result {joined:?} missing from vocab"),
                });
            };
            merge_rules.entry((left, right)).or_insert(MergeRule { rank, result });
        }
        Ok(Self {
            vocab,
            text_index,
            merges,
            merge_rules,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        if let Some(&id) = self.text_index.get(token) {
            return Some(id);
        }
        self.vocab[..RESERVED_VOCAB]
            .iter()
            .position(|t| t == token)
            .map(|i| i as TokenId)
    }

    /// Bytes a token contributes to decoded text. Control tokens render empty.
    pub fn surface_bytes(&self, id: TokenId) -> Result<Vec<u8>, TokenizerError> {
        if id as usize >= self.vocab.len() {
            return Err(TokenizerError::IdOutOfRange {
                id,
                vocab_size: self.vocab.len(),
            });
        }
        Ok(match token_kind(id) {
            TokenKind::Bos | TokenKind::Eos | TokenKind::Pad => Vec::new(),
            TokenKind::Byte(b) => vec![b],
            _ => self.vocab[id as usize].as_bytes().to_vec(),
        })
    }

    /// Applies merges in rank order to a single word pretoken.
    fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let mut symbols: Vec<Symbol> = word
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                match self.text_index.get(&*c.encode_utf8(&mut buf)) {
                    Some(&id) => Symbol::Known(id),
                    None => Symbol::Unknown(c),
                }
            })
            .collect();
        loop {
            let mut best: Option<(usize, MergeRule)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                if let (Symbol::Known(l), Symbol::Known(r)) = (symbols[i], symbols[i + 1]) {
                    if let Some(rule) = self.merge_rules.get(&(l, r)) {
                        if best.is_none_or(|(_, b)| rule.rank < b.rank) {
                            best = Some((i, *rule));
                        }
                    }
                }
            }
            let Some((i, rule)) = best else { break };
            symbols[i] = Symbol::Known(rule.result);
            symbols.remove(i + 1);
        }
        for symbol in symbols {
            match symbol {
                Symbol::Known(id) => out.push(id),
                Symbol::Unknown(c) => push_bytes(c, out),
            }
        }
    }

    /// Encodes `text` after canonical normalization. Total: characters outside the
    /// vocabulary fall back to byte tokens.
    pub fn encode(&self, text: &str, add_bos_eos: bool) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len() / 2 + 2);
        if add_bos_eos {
            out.push(BOS_ID);
        }
        for pretoken in pretokenize(text) {
            self.encode_pretoken(&pretoken, &mut out);
        }
        if add_bos_eos {
            out.push(EOS_ID);
        }
        out
    }

    pub(crate) fn encode_pretoken(&self, pretoken: &Pretoken, out: &mut Vec<TokenId>) {
        match pretoken.kind {
            PretokenKind::SpaceRun => out.push(SPACE_BASE + pretoken.text.len() as TokenId - 1),
            PretokenKind::Digit => {
                out.push(DIGIT_BASE + (pretoken.text.as_bytes()[0] - b'0') as TokenId)
            }
            PretokenKind::OtherByte => pretoken.text.chars().for_each(|c| push_bytes(c, out)),
            PretokenKind::Word => self.encode_word(&pretoken.text, out),
        }
    }

    /// Decodes ids back to text. BOS, EOS and PAD render as empty strings.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            bytes.extend(self.surface_bytes(id)?);
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            // only reachable for id sequences that encode never produces
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }
}

fn push_bytes(c: char, out: &mut Vec<TokenId>) {
    let mut buf = [0u8; 4];
    for &b in c.encode_utf8(&mut buf).as_bytes() {
        out.push(BYTE_BASE + b as TokenId);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(corpus: &[&str], vocab: usize) -> TokenizerModel {
        train_bpe(corpus.iter().copied(), vocab).unwrap()
    }

    #[test]
    fn layout_constants() {
        assert_eq!(SPACE_BASE, 259);
        assert_eq!(DIGIT_BASE, 283);
        assert_eq!(RESERVED_VOCAB, 293);
        let vocab = reserved_vocab();
        assert_eq!(vocab.len(), RESERVED_VOCAB);
        assert_eq!(vocab[token_id_of_byte(0x41) as usize], "<byte-eb>");
    }

    fn token_id_of_byte(b: u8) -> TokenId {
        BYTE_BASE + b as TokenId
    }

    #[test]
    fn year_is_four_digit_tokens() {
        let m = model(&["2024 was a year", "hello world"], 320);
        let ids = m.encode("2024", false);
        assert_eq!(ids, vec![DIGIT_BASE + 2, DIGIT_BASE, DIGIT_BASE + 2, DIGIT_BASE + 4]);
    }

    #[test]
    fn four_spaces_one_token() {
        let m = model(&["a b"], 300);
        assert_eq!(m.encode("    ", false), vec![SPACE_BASE + 3]);
    }

    #[test]
    fn bos_eos_wrap() {
        let m = model(&["abc"], 300);
        let ids = m.encode("abc", true);
        assert_eq!(ids.first(), Some(&BOS_ID));
        assert_eq!(ids.last(), Some(&EOS_ID));
        assert_eq!(m.decode(&ids).unwrap(), "abc");
    }

    #[test]
    fn decode_edge_cases() {
        let m = model(&["héllo wörld"], 320);
        assert_eq!(m.decode(&[]).unwrap(), "");
        assert_eq!(m.decode(&[PAD_ID, PAD_ID, PAD_ID]).unwrap(), "");
        let s = "héllo  wörld";
        assert_eq!(m.decode(&m.encode(s, false)).unwrap(), normalize(s));
        let err = m.decode(&[m.vocab_size() as TokenId]).unwrap_err();
        assert!(matches!(err, TokenizerError::IdOutOfRange { .. }));
    }

    #[test]
    fn unknown_characters_fall_back_to_bytes() {
        let m = model(&["aaa"], 300);
        let ids = m.encode("é", false);
        assert_eq!(ids, vec![token_id_of_byte(0xc3), token_id_of_byte(0xa9)]);
        assert_eq!(m.decode(&ids).unwrap(), "é");
    }

    #[test]
    fn space_run_counts() {
        let m = model(&["x"], 300);
        for n in 1..=100usize {
            let ids = m.encode(&" ".repeat(n), false);
            let expected = n / 24 + usize::from(n % 24 > 0);
            assert_eq!(ids.len(), expected, "n = {n}");
            assert!(ids.iter().all(|&id| matches!(token_kind(id), TokenKind::SpaceRun(_))));
        }
    }

    fn assert_digit_atomic(m: &TokenizerModel, ids: &[TokenId]) {
        for &id in ids {
            let surface = m.surface_bytes(id).unwrap();
            if surface.iter().any(u8::is_ascii_digit) {
                assert_eq!(surface.len(), 1, "token {id} mixes a digit with other text");
            }
        }
    }

    #[test]
    fn vocab_never_mixes_digits() {
        let m = model(&["abc123def 4x4 v2.0 r2d2 c3po"; 8], 340);
        for token in m.vocab() {
            if token.chars().any(|c| c.is_ascii_digit()) {
                assert_eq!(token.chars().count(), 1, "{token:?}");
            }
        }
        assert_digit_atomic(&m, &m.encode("x86_64 and 3.14159", false));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(512))]
        #[test]
        fn round_trip_is_normalization(s in proptest::prelude::any::<String>()) {
            let m = shared_model();
            let ids = m.encode(&s, false);
            proptest::prop_assert_eq!(m.decode(&ids).unwrap(), normalize(&s));
            assert_digit_atomic(m, &ids);
        }
    }

    fn shared_model() -> &'static TokenizerModel {
        use std::sync::OnceLock;
        static MODEL: OnceLock<TokenizerModel> = OnceLock::new();
        MODEL.get_or_init(|| {
            model(
                &["the quick brown fox jumps over the lazy dog", "héllo wörld 1234", "日本語のテキスト"],
                360,
            )
        })
    }
}
