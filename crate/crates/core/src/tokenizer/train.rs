use std::collections::{HashMap, HashSet};

use super::pretokenize::{normalize, split_normalized, PretokenKind};
use super::{reserved_vocab, TokenId, TokenizerError, TokenizerModel, FIRST_LEARNED_ID, RESERVED_VOCAB};

/// Sentinel for a character that did not make it into the alphabet.
const UNKNOWN: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct TrainerOptions {
    pub target_vocab_size: usize,
    /// Characters seen fewer times than this are left to byte fallback.
    pub min_char_frequency: u64,
}

impl Default for TrainerOptions {
    fn default() -> Self {
        Self {
            target_vocab_size: super::DEFAULT_VOCAB_SIZE,
            min_char_frequency: 1,
        }
    }
}

/// One learned merge with the pair frequency observed when it was selected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeRecord {
    pub left: String,
    pub right: String,
    pub frequency: u64,
}

/// Trains a tokenizer on `corpus`, one record per item.
pub fn train_bpe<I, S>(corpus: I, target_vocab_size: usize) -> Result<TokenizerModel, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let options = TrainerOptions {
        target_vocab_size,
        ..TrainerOptions::default()
    };
    train_bpe_detailed(corpus, &options).map(|(model, _)| model)
}

/// Like [`train_bpe`], also returning every merge with its selection-time frequency.
pub fn train_bpe_detailed<I, S>(
    corpus: I,
    options: &TrainerOptions,
) -> Result<(TokenizerModel, Vec<MergeRecord>), TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let target = options.target_vocab_size;
    if target <= RESERVED_VOCAB {
        return Err(TokenizerError::TargetTooSmall {
            target,
            reserved: RESERVED_VOCAB,
        });
    }

    let mut word_counts: HashMap<String, u64> = HashMap::new();
    let mut saw_text = false;
    for record in corpus {
        let text = normalize(record.as_ref());
        saw_text |= !text.is_empty();
        for pretoken in split_normalized(&text) {
            if pretoken.kind == PretokenKind::Word {
                *word_counts.entry(pretoken.text).or_default() += 1;
            }
        }
    }
    if !saw_text {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut words: Vec<(String, u64)> = word_counts.into_iter().collect();
    words.sort_unstable();

    let mut char_counts: HashMap<char, u64> = HashMap::new();
    for (word, count) in &words {
        for c in word.chars() {
            *char_counts.entry(c).or_default() += count;
        }
    }
    let mut alphabet: Vec<(char, u64)> = char_counts
        .into_iter()
        .filter(|&(_, n)| n >= options.min_char_frequency)
        .collect();
    alphabet.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    alphabet.truncate(target - RESERVED_VOCAB);

    let reserved: HashSet<String> = reserved_vocab().into_iter().collect();
    let mut learned: Vec<String> = alphabet.iter().map(|(c, _)| c.to_string()).collect();
    let mut index: HashMap<String, TokenId> = learned
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), FIRST_LEARNED_ID + i as TokenId))
        .collect();
    // id -> string for learned tokens, offset by FIRST_LEARNED_ID
    let name = |learned: &[String], id: u32| learned[(id - FIRST_LEARNED_ID) as usize].clone();

    let mut symbols: Vec<(Vec<u32>, u64)> = words
        .iter()
        .map(|(word, count)| {
            let syms = word
                .chars()
                .map(|c| index.get(c.to_string().as_str()).copied().unwrap_or(UNKNOWN))
                .collect();
            (syms, *count)
        })
        .collect();

    let mut merges: Vec<(TokenId, TokenId)> = Vec::new();
    let mut records = Vec::new();
    let mut forbidden: HashSet<(u32, u32)> = HashSet::new();

    while RESERVED_VOCAB + learned.len() < target {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, count) in &symbols {
            for w in syms.windows(2) {
                if w[0] != UNKNOWN && w[1] != UNKNOWN {
                    *pair_counts.entry((w[0], w[1])).or_default() += count;
                }
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|(pair, _)| !forbidden.contains(pair))
            .map(|(pair, n)| (n, name(&learned, pair.0), name(&learned, pair.1), pair))
            // highest frequency, then lexicographically smallest pair
            .min_by(|a, b| b.0.cmp(&a.0).then_with(|| (&a.1, &a.2).cmp(&(&b.1, &b.2))));
        let Some((frequency, left, right, pair)) = best else {
            break;
        };
        let joined = format!("{left}{right}");
        if reserved.contains(&joined) {
            // would shadow a control or byte token name
            forbidden.insert(pair);
            continue;
        }
        let result = match index.get(&joined) {
            Some(&id) => id,
            None => {
                let id = FIRST_LEARNED_ID + learned.len() as TokenId;
                index.insert(joined.clone(), id);
                learned.push(joined);
                id
            }
        };
        merges.push(pair);
        records.push(MergeRecord {
            left,
            right,
            frequency,
        });
        for (syms, _) in &mut symbols {
            apply_merge(syms, pair, result);
        }
    }

    let model = TokenizerModel::from_parts(learned, merges)?;
    Ok((model, records))
}

fn apply_merge(syms: &mut Vec<u32>, pair: (u32, u32), result: u32) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(result);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    *syms = out;
}
