//! `NYOTOK v1` text format.
//!
//! ```text
//! NYOTOK v1
//! vocab <n>
//! <id>\t<escaped token>      (n lines)
//! merges <m>
//! <left>\t<right>            (m lines, escaped)
//! ```
//!
//! Escapes: TAB as `\t`, LF as `\n`, backslash as `\\`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{reserved_vocab, TokenId, TokenizerError, TokenizerModel, RESERVED_VOCAB};

const HEADER: &str = "NYOTOK v1";

fn escape(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for c in token.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str, line: usize) -> Result<String, TokenizerError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            other => {
                return Err(TokenizerError::Malformed {
                    line,
                    reason: format!("bad escape sequence \\{}", other.map(String::from).unwrap_or_default()),
                })
            }
        }
    }
    Ok(out)
}

fn malformed(line: usize, reason: impl Into<String>) -> TokenizerError {
    TokenizerError::Malformed {
        line,
        reason: reason.into(),
    }
}

fn count_line(line: Option<(usize, &str)>, keyword: &str) -> Result<usize, TokenizerError> {
    let (no, text) = line.ok_or_else(|| malformed(0, format!("missing `{keyword}` line")))?;
    text.strip_prefix(keyword)
        .and_then(|rest| rest.strip_prefix(' '))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| malformed(no, format!("expected `{keyword} <count>`")))
}

impl TokenizerModel {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        out.push_str(&format!("vocab {}\n", self.vocab.len()));
        for (id, token) in self.vocab.iter().enumerate() {
            out.push_str(&format!("{id}\t{}\n", escape(token)));
        }
        out.push_str(&format!("merges {}\n", self.merges.len()));
        for &(l, r) in &self.merges {
            out.push_str(&format!(
                "{}\t{}\n",
                escape(&self.vocab[l as usize]),
                escape(&self.vocab[r as usize])
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(malformed(1, format!("expected header `{HEADER}`"))),
        }
        let n = count_line(lines.next(), "vocab")?;
        if n < RESERVED_VOCAB {
            return Err(malformed(2, "vocabulary smaller than the reserved block"));
        }
        let reserved = reserved_vocab();
        let mut learned = Vec::with_capacity(n - RESERVED_VOCAB);
        let mut strings = Vec::with_capacity(n);
        for expected_id in 0..n {
            let (no, line) = lines.next().ok_or_else(|| malformed(0, "truncated vocab"))?;
            let (id, token) = line
                .split_once('\t')
                .ok_or_else(|| malformed(no, "expected `<id>\\t<token>`"))?;
            if id.parse::<usize>().ok() != Some(expected_id) {
                return Err(malformed(no, format!("expected id {expected_id}")));
            }
            let token = unescape(token, no)?;
            if expected_id < RESERVED_VOCAB {
                if token != reserved[expected_id] {
                    return Err(malformed(no, format!("reserved id {expected_id} must be {:?}", reserved[expected_id])));
                }
            } else {
                learned.push(token.clone());
            }
            strings.push(token);
        }
        let m = count_line(lines.next(), "merges")?;
        let index: HashMap<&str, TokenId> = strings
            .iter()
            .enumerate()
            .skip(RESERVED_VOCAB)
            .map(|(i, t)| (t.as_str(), i as TokenId))
            .collect();
        let lookup = |s: &str, no: usize| -> Result<TokenId, TokenizerError> {
            index
                .get(s)
                .copied()
                .ok_or_else(|| malformed(no, format!("merge references unknown token {s:?}")))
        };
        let mut merges = Vec::with_capacity(m);
        for _ in 0..m {
            let (no, line) = lines.next().ok_or_else(|| malformed(0, "truncated merges"))?;
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| malformed(no, "expected `<left>\\t<right>`"))?;
            merges.push((lookup(&unescape(l, no)?, no)?, lookup(&unescape(r, no)?, no)?));
        }
        match lines.next() {
            None | Some((_, "")) => {}
            Some((no, _)) => return Err(malformed(no, "trailing content")),
        }
        if lines.next().is_some() {
            return Err(malformed(0, "trailing content"));
        }
        TokenizerModel::from_parts(learned, merges)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::super::train_bpe;
    use super::*;

    #[test]
    fn escapes() {
        assert_eq!(escape("a\tb\nc\\d"), "a\\tb\\nc\\\\d");
        assert_eq!(unescape("a\\tb\\nc\\\\d", 1).unwrap(), "a\tb\nc\\d");
        assert!(unescape("bad\\x", 1).is_err());
    }

    #[test]
    fn save_and_load() {
        let model = train_bpe(["tab\\sep back\\slash héllo wörld", "foo bar baz"], 330).unwrap();
        let text = model.to_text();
        assert!(text.starts_with("NYOTOK v1\nvocab 330\n0\t<s>\n"));
        let back = TokenizerModel::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        let sample = "back\\slash héllo";
        assert_eq!(back.encode(sample, true), model.encode(sample, true));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.txt");
        model.save(&path).unwrap();
        assert_eq!(TokenizerModel::load(&path).unwrap().to_text(), text);
    }

    #[test]
    fn rejects_corruption() {
        let model = train_bpe(["abc abd"], 300).unwrap();
        let text = model.to_text();
        assert!(TokenizerModel::from_text(&text.replace("NYOTOK v1", "NYOTOK v2")).is_err());
        assert!(TokenizerModel::from_text(&text.replace("0\t<s>", "0\t<q>")).is_err());
        let truncated: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(TokenizerModel::from_text(&truncated).is_err());
    }
}
