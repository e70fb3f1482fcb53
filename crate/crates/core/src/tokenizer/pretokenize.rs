use unicode_normalization::UnicodeNormalization;

/// Longest run of U+0020 that maps onto a single whitespace token.
pub const MAX_SPACE_RUN: usize = 24;

/// Canonical composition (NFC). Applied to every record before tokenization.
pub fn normalize(text: &str) -> String {
    text.nfc().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PretokenKind {
    /// Maximal run of characters that are neither whitespace nor ASCII digits.
    Word,
    /// A single ASCII digit.
    Digit,
    /// Between 1 and [`MAX_SPACE_RUN`] U+0020 characters.
    SpaceRun,
    /// One non-space whitespace character (tab, newline, ...), emitted through byte fallback.
    OtherByte,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pretoken {
    pub kind: PretokenKind,
    pub text: String,
}

impl Pretoken {
    fn new(kind: PretokenKind, text: &str) -> Self {
        Self {
            kind,
            text: text.to_owned(),
        }
    }
}

fn is_other_whitespace(c: char) -> bool {
    c != ' ' && c.is_whitespace()
}

/// Splits already-normalized text into pretokens. BPE merges never cross a pretoken.
pub(crate) fn split_normalized(text: &str) -> Vec<Pretoken> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(start, c)) = chars.peek() {
        if c == ' ' {
            let mut run = 0;
            while let Some(&(_, ' ')) = chars.peek() {
                chars.next();
                run += 1;
            }
            // greedy left-to-right chunking
            while run > 0 {
                let n = run.min(MAX_SPACE_RUN);
                out.push(Pretoken {
                    kind: PretokenKind::SpaceRun,
                    text: " ".repeat(n),
                });
                run -= n;
            }
        } else if c.is_ascii_digit() {
            chars.next();
            out.push(Pretoken::new(PretokenKind::Digit, &text[start..start + 1]));
        } else if is_other_whitespace(c) {
            chars.next();
            out.push(Pretoken::new(
                PretokenKind::OtherByte,
                &text[start..start + c.len_utf8()],
            ));
        } else {
            let mut end = start;
            while let Some(&(i, c)) = chars.peek() {
                if c == ' ' || c.is_ascii_digit() || is_other_whitespace(c) {
                    break;
                }
                end = i + c.len_utf8();
                chars.next();
            }
            out.push(Pretoken::new(PretokenKind::Word, &text[start..end]));
        }
    }
    out
}

/// Normalizes `text` and splits it into tagged pretokens.
///
/// The concatenated pretoken texts equal `normalize(text)`.
pub fn pretokenize(text: &str) -> Vec<Pretoken> {
    split_normalized(&normalize(text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use PretokenKind::*;

    fn kinds(text: &str) -> Vec<(PretokenKind, String)> {
        pretokenize(text)
            .into_iter()
            .map(|p| (p.kind, p.text))
            .collect()
    }

    // Reference classifier: one label per character, then group labels.
    fn char_scan_oracle(text: &str) -> Vec<(PretokenKind, String)> {
        let mut out: Vec<(PretokenKind, String)> = Vec::new();
        for c in text.chars() {
            let kind = if c == ' ' {
                SpaceRun
            } else if c.is_ascii_digit() {
                Digit
            } else if c.is_whitespace() {
                OtherByte
            } else {
                Word
            };
            let extend = match out.last() {
                Some((k, s)) if *k == kind => match kind {
                    Word => true,
                    SpaceRun => s.len() < MAX_SPACE_RUN,
                    _ => false,
                },
                _ => false,
            };
            if extend {
                out.last_mut().unwrap().1.push(c);
            } else {
                out.push((kind, c.to_string()));
            }
        }
        out
    }

    #[test]
    fn word_space_digits() {
        let expected = vec![
            (Word, "ab".to_string()),
            (SpaceRun, " ".to_string()),
            (Digit, "1".to_string()),
            (Digit, "2".to_string()),
        ];
        assert_eq!(kinds("ab 12"), expected);
        assert_eq!(char_scan_oracle("ab 12"), expected);
    }

    #[test]
    fn empty_input() {
        assert!(pretokenize("").is_empty());
    }

    #[test]
    fn thirty_spaces_chunk_greedily() {
        let got = kinds(&" ".repeat(30));
        assert_eq!(got, vec![(SpaceRun, " ".repeat(24)), (SpaceRun, " ".repeat(6))]);
        assert_eq!(got, char_scan_oracle(&" ".repeat(30)));
    }

    #[test]
    fn tabs_and_newlines_are_single_other_pretokens() {
        assert_eq!(
            kinds("a\t\nb"),
            vec![
                (Word, "a".into()),
                (OtherByte, "\t".into()),
                (OtherByte, "\n".into()),
                (Word, "b".into())
            ]
        );
    }

    #[test]
    fn normalizes_to_composed_form() {
        // e + combining acute composes to U+00E9
        let got = pretokenize("e\u{301}");
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].text, "\u{e9}");
    }

    proptest::proptest! {
        #[test]
        fn matches_char_scan_and_concatenates(s in "\\PC{0,64}") {
            let norm = normalize(&s);
            let got = kinds(&s);
            let joined: String = got.iter().map(|(_, t)| t.as_str()).collect();
            proptest::prop_assert_eq!(&joined, &norm);
            proptest::prop_assert_eq!(got, char_scan_oracle(&norm));
        }
    }
}
