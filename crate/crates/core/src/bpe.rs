//! Byte-pair-encoding subword vocabulary.
//!
//! Words start as characters with an end-of-word marker attached to the last
//! one (`l o w</w>`). Learning repeatedly merges the most frequent adjacent
//! pair; encoding replays the merges in learned order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const END_OF_WORD: &str = "</w>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
/// Rendering of an unknown-character unit when decoding.
pub const UNK_CHAR: char = '\u{fffd}';

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const SPECIALS: [&str; 3] = [BOS, EOS, UNK];

/// Vocabulary size used for the full movie-review corpus.
pub const PAPER_VOCAB_SIZE: usize = 30_469;

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("cannot learn from an empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary {target} is smaller than the {base} base symbols")]
    TargetTooSmall { target: usize, base: usize },
    #[error("unknown id {0}")]
    UnknownId(u32),
    #[error("malformed {file} file at line {line}: {message}")]
    Format { file: &'static str, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    index: Index,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Index {
    ids: HashMap<String, u32>,
    // (left id, right id) -> (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| if i + 1 == n { format!("{c}{END_OF_WORD}") } else { c.to_string() })
        .collect()
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Ord for Candidate {
    // Highest count first, then the lexicographically smallest pair.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn merge_word(word: &mut Vec<u32>, pair: (u32, u32), merged: u32) -> bool {
    let mut changed = false;
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(merged);
            i += 2;
            changed = true;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
    changed
}

fn pairs_of(word: &[u32]) -> impl Iterator<Item = (u32, u32)> + '_ {
    word.windows(2).map(|w| (w[0], w[1]))
}

/// Word -> frequency table over a tokenized corpus.
pub fn word_counts<'a, I, S>(sentences: I) -> BTreeMap<String, u64>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut counts = BTreeMap::new();
    for s in sentences {
        for w in s {
            *counts.entry(w.as_ref().to_string()).or_insert(0) += 1;
        }
    }
    counts
}

impl BpeModel {
    /// Greedy merge learning until the vocabulary reaches `target_vocab_size`
    /// or no pair occurs at least twice.
    pub fn learn(word_freqs: &BTreeMap<String, u64>, target_vocab_size: usize) -> Result<Self, BpeError> {
        let words: Vec<(&String, u64)> = word_freqs
            .iter()
            .filter(|(w, &f)| !w.is_empty() && f > 0)
            .map(|(w, &f)| (w, f))
            .collect();
        if words.is_empty() {
            return Err(BpeError::EmptyCorpus);
        }

        let mut chars = BTreeSet::new();
        for (w, _) in &words {
            chars.extend(w.chars());
        }
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for c in &chars {
            vocab.push(c.to_string());
            vocab.push(format!("{c}{END_OF_WORD}"));
        }
        if target_vocab_size < vocab.len() {
            return Err(BpeError::TargetTooSmall { target: target_vocab_size, base: vocab.len() });
        }
        let mut ids: HashMap<String, u32> =
            vocab.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();

        let mut segmented: Vec<Vec<u32>> = words
            .iter()
            .map(|(w, _)| initial_symbols(w).iter().map(|s| ids[s]).collect())
            .collect();
        let freqs: Vec<u64> = words.iter().map(|(_, f)| *f).collect();

        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        let mut occurs_in: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (wi, seg) in segmented.iter().enumerate() {
            for p in pairs_of(seg) {
                *counts.entry(p).or_default() += freqs[wi];
                occurs_in.entry(p).or_default().insert(wi);
            }
        }
        let mut heap: BinaryHeap<Candidate> = counts
            .iter()
            .map(|(&pair, &count)| Candidate {
                count,
                left: vocab[pair.0 as usize].clone(),
                right: vocab[pair.1 as usize].clone(),
                pair,
            })
            .collect();

        let mut merges = Vec::new();
        while vocab.len() < target_vocab_size {
            let Some(top) = heap.pop() else { break };
            let current = counts.get(&top.pair).copied().unwrap_or(0);
            if current != top.count {
                // Stale entry; fresher ones were pushed as counts changed.
                continue;
            }
            if current < 2 {
                break;
            }
            let merged_str = format!("{}{}", top.left, top.right);
            let merged = match ids.get(&merged_str) {
                Some(&id) => id,
                None => {
                    let id = vocab.len() as u32;
                    vocab.push(merged_str.clone());
                    ids.insert(merged_str, id);
                    id
                }
            };
            merges.push((top.left.clone(), top.right.clone()));

            let affected: Vec<usize> = occurs_in
                .get(&top.pair)
                .map(|s| {
                    let mut v: Vec<usize> = s.iter().copied().collect();
                    v.sort_unstable();
                    v
                })
                .unwrap_or_default();
            let mut touched: HashSet<(u32, u32)> = HashSet::new();
            for wi in affected {
                let f = freqs[wi];
                let before: Vec<(u32, u32)> = pairs_of(&segmented[wi]).collect();
                if !merge_word(&mut segmented[wi], top.pair, merged) {
                    continue;
                }
                for p in before {
                    let c = counts.get_mut(&p).expect("pair was counted");
                    *c -= f;
                    touched.insert(p);
                }
                for p in pairs_of(&segmented[wi]) {
                    *counts.entry(p).or_default() += f;
                    occurs_in.entry(p).or_default().insert(wi);
                    touched.insert(p);
                }
            }
            for p in touched {
                let count = counts[&p];
                if count > 0 {
                    heap.push(Candidate {
                        count,
                        left: vocab[p.0 as usize].clone(),
                        right: vocab[p.1 as usize].clone(),
                        pair: p,
                    });
                }
            }
        }
        Ok(BpeModel::from_parts(merges, vocab))
    }

    fn from_parts(merges: Vec<(String, String)>, vocab: Vec<String>) -> Self {
        let mut m = BpeModel { merges, vocab, index: Index::default() };
        m.rebuild_index();
        m
    }

    fn rebuild_index(&mut self) {
        let ids: HashMap<String, u32> =
            self.vocab.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        let mut ranks = HashMap::new();
        for (rank, (l, r)) in self.merges.iter().enumerate() {
            let (Some(&li), Some(&ri), Some(&mi)) = (ids.get(l), ids.get(r), ids.get(&format!("{l}{r}"))) else {
                continue;
            };
            ranks.entry((li, ri)).or_insert((rank, mi));
        }
        self.index = Index { ids, ranks };
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.ids.get(token).copied()
    }

    /// Subword ids of one word.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut seg: Vec<u32> = initial_symbols(word)
            .iter()
            .map(|s| self.id(s).unwrap_or(UNK_ID))
            .collect();
        loop {
            let best = pairs_of(&seg)
                .filter_map(|p| self.index.ranks.get(&p).map(|&(rank, merged)| (rank, p, merged)))
                .min_by_key(|&(rank, _, _)| rank);
            let Some((_, pair, merged)) = best else { break };
            merge_word(&mut seg, pair, merged);
        }
        seg
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        words.iter().flat_map(|w| self.encode_word(w.as_ref())).collect()
    }

    /// Join subword units back into words. BOS and EOS are skipped; a trailing
    /// unit without an end-of-word marker still yields a final word.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>, BpeError> {
        let mut words = Vec::new();
        let mut current = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(BpeError::UnknownId(id))?;
            match id {
                BOS_ID | EOS_ID => continue,
                UNK_ID => current.push(UNK_CHAR),
                _ => match tok.strip_suffix(END_OF_WORD) {
                    Some(stem) => {
                        current.push_str(stem);
                        words.push(std::mem::take(&mut current));
                    }
                    None => current.push_str(tok),
                },
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        Ok(words)
    }

    /// One `left right` pair per line, in application order.
    pub fn merges_text(&self) -> String {
        self.merges.iter().map(|(l, r)| format!("{l} {r}\n")).collect()
    }

    /// One `token<TAB>id` line per vocabulary entry, in id order.
    pub fn vocab_text(&self) -> String {
        self.vocab.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_text(merges: &str, vocab: &str) -> Result<Self, BpeError> {
        let mut merge_list = Vec::new();
        for (n, line) in merges.lines().enumerate() {
            let (l, r) = line.split_once(' ').ok_or_else(|| BpeError::Format {
                file: "merges",
                line: n + 1,
                message: "expected `left right`".into(),
            })?;
            merge_list.push((l.to_string(), r.to_string()));
        }
        let mut tokens = Vec::new();
        for (n, line) in vocab.lines().enumerate() {
            let fmt_err = |message: &str| BpeError::Format { file: "vocab", line: n + 1, message: message.into() };
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| fmt_err("expected `token<TAB>id`"))?;
            let id: usize = id.parse().map_err(|_| fmt_err("id is not an integer"))?;
            if id != tokens.len() {
                return Err(fmt_err("ids must be dense and in order"));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(BpeError::Format { file: "vocab", line: 1, message: "missing special tokens".into() });
        }
        Ok(BpeModel::from_parts(merge_list, tokens))
    }

    pub fn save(&self, merges_path: &Path, vocab_path: &Path) -> Result<(), BpeError> {
        fs::write(merges_path, self.merges_text())?;
        fs::write(vocab_path, self.vocab_text())?;
        Ok(())
    }

    pub fn load(merges_path: &Path, vocab_path: &Path) -> Result<Self, BpeError> {
        Self::from_text(&fs::read_to_string(merges_path)?, &fs::read_to_string(vocab_path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(entries: &[(&str, u64)]) -> BTreeMap<String, u64> {
        entries.iter().map(|(w, f)| (w.to_string(), *f)).collect()
    }

    /// Reference pair counting by brute force over every adjacent position.
    fn brute_force_best_pair(words: &[(Vec<String>, u64)]) -> Option<((String, String), u64)> {
        let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (seg, f) in words {
            for w in seg.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_default() += f;
            }
        }
        let max = counts.values().copied().max()?;
        counts.into_iter().find(|(_, c)| *c == max)
    }

    /// Step-by-step replay: apply each merge, in order, left to right.
    fn replay(model: &BpeModel, word: &str) -> Vec<String> {
        let mut seg = initial_symbols(word);
        for (l, r) in model.merges() {
            let mut out = Vec::new();
            let mut i = 0;
            while i < seg.len() {
                if i + 1 < seg.len() && &seg[i] == l && &seg[i + 1] == r {
                    out.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    out.push(seg[i].clone());
                    i += 1;
                }
            }
            seg = out;
        }
        seg
    }

    fn base_size(t: &BTreeMap<String, u64>) -> usize {
        let chars: BTreeSet<char> = t.keys().flat_map(|w| w.chars()).collect();
        SPECIALS.len() + 2 * chars.len()
    }

    #[test]
    fn first_merge_matches_brute_force() {
        let t = table(&[("low", 5), ("lower", 2)]);
        let words: Vec<_> = t.iter().map(|(w, f)| (initial_symbols(w), *f)).collect();
        let (pair, count) = brute_force_best_pair(&words).unwrap();
        assert_eq!(pair, ("l".to_string(), "o".to_string()));
        assert_eq!(count, 7);
        let m = BpeModel::learn(&t, base_size(&t) + 1).unwrap();
        assert_eq!(m.merges(), &[("l".to_string(), "o".to_string())]);
    }

    #[test]
    fn no_budget_means_no_merges() {
        let t = table(&[("low", 5), ("lower", 2)]);
        let m = BpeModel::learn(&t, base_size(&t)).unwrap();
        assert!(m.merges().is_empty());
        assert!(matches!(BpeModel::learn(&t, base_size(&t) - 1), Err(BpeError::TargetTooSmall { .. })));
        assert!(matches!(BpeModel::learn(&BTreeMap::new(), 100), Err(BpeError::EmptyCorpus)));
    }

    #[test]
    fn overlapping_pairs() {
        let t = table(&[("aaaa", 1)]);
        let m = BpeModel::learn(&t, 100).unwrap();
        // a a a a</w> -> aa a a</w>; afterwards every pair occurs once.
        assert_eq!(m.merges(), &[("a".to_string(), "a".to_string())]);
        let units: Vec<_> = m.encode_word("aaaa").iter().map(|&i| m.token(i).unwrap().to_string()).collect();
        assert_eq!(units, ["aa", "a", "a</w>"]);
    }

    #[test]
    fn encode_matches_replay() {
        let t = table(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]);
        let m = BpeModel::learn(&t, 40).unwrap();
        for w in ["lower", "low", "newest", "widest", "lowest", "wider"] {
            let got: Vec<_> = m.encode_word(w).iter().map(|&i| m.token(i).unwrap().to_string()).collect();
            assert_eq!(got, replay(&m, w), "{w}");
        }
        let lower: Vec<_> = m.encode_word("lower").iter().map(|&i| m.token(i).unwrap().to_string()).collect();
        assert!(lower[0].starts_with("lo"));
    }

    #[test]
    fn merged_word_is_one_id() {
        let t = table(&[("the", 50), ("a", 3)]);
        let m = BpeModel::learn(&t, 100).unwrap();
        assert_eq!(m.encode_word("the").len(), 1);
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let t = table(&[("abc", 4)]);
        let m = BpeModel::learn(&t, 100).unwrap();
        assert_eq!(m.encode_word("xyz"), vec![UNK_ID; 3]);
        assert_eq!(m.decode(&m.encode_word("xyz")).unwrap(), ["\u{fffd}\u{fffd}\u{fffd}"]);
    }

    #[test]
    fn decode_edges() {
        let t = table(&[("ab", 4), ("cd", 4)]);
        let m = BpeModel::learn(&t, 100).unwrap();
        assert!(m.decode(&[]).unwrap().is_empty());
        let ids = m.encode(&["ab", "cd"]);
        assert_eq!(m.decode(&ids).unwrap(), ["ab", "cd"]);
        let mut framed = vec![BOS_ID];
        framed.extend(&ids);
        framed.push(EOS_ID);
        assert_eq!(m.decode(&framed).unwrap(), ["ab", "cd"]);
        assert!(matches!(m.decode(&[9999]), Err(BpeError::UnknownId(9999))));
    }

    #[test]
    fn text_files_reload_bit_exact() {
        let t = table(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3), ("I", 2)]);
        let m = BpeModel::learn(&t, 30).unwrap();
        let back = BpeModel::from_text(&m.merges_text(), &m.vocab_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.merges_text(), m.merges_text());
        assert_eq!(back.vocab_text(), m.vocab_text());
    }

    fn word_table() -> impl Strategy<Value = BTreeMap<String, u64>> {
        prop::collection::btree_map("[a-e]{1,7}", 1u64..20, 1..25)
    }

    proptest! {
        #[test]
        fn round_trip_on_learn_time_words(t in word_table(), extra in 0usize..60) {
            let target = base_size(&t) + extra;
            let m = BpeModel::learn(&t, target).unwrap();
            prop_assert!(m.vocab_size() <= target);
            for w in t.keys() {
                let ids = m.encode_word(w);
                prop_assert_eq!(m.decode(&ids).unwrap(), vec![w.clone()]);
                let names: Vec<String> = ids.iter().map(|&i| m.token(i).unwrap().to_string()).collect();
                prop_assert_eq!(names, replay(&m, w));
            }
        }

        #[test]
        fn learning_is_deterministic_and_monotone(t in word_table(), a in 0usize..40, b in 0usize..40) {
            let (small, large) = (a.min(b), a.max(b));
            let base = base_size(&t);
            let ms = BpeModel::learn(&t, base + small).unwrap();
            let ml = BpeModel::learn(&t, base + large).unwrap();
            prop_assert_eq!(&ms, &BpeModel::learn(&t, base + small).unwrap());
            prop_assert!(ml.merges().starts_with(ms.merges()));
            for w in t.keys() {
                prop_assert!(ml.encode_word(w).len() <= ms.encode_word(w).len());
            }
        }
    }
}
