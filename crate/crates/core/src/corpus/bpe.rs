//! Byte-level BPE with a shared vocabulary for both languages.
//!
//! Ids `0..=255` are raw bytes, followed by the three specials, followed by
//! merged tokens. Every string round-trips through `encode`/`decode`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::{CorpusError, ParallelPair};

pub const BOS: u32 = 256;
pub const PAD: u32 = 257;
pub const UNK: u32 = 258;
const BASE_SIZE: usize = 259;
const HEADER: &str = "ffn-lens-vocab 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    /// `(left, right) -> result`, in the order learned.
    merges: Vec<(u32, u32, u32)>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
    tokens: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
}

/// Splits text so that every whitespace character opens a new piece.
pub(crate) fn pretokenize(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() && i > start {
            pieces.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

fn merge_word(word: &mut Vec<u32>, left: u32, right: u32, result: u32) {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == left && word[i + 1] == right {
            out.push(result);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

impl Vocabulary {
    fn base() -> Self {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        tokens.push(b"<bos>".to_vec());
        tokens.push(b"<pad>".to_vec());
        tokens.push(b"<unk>".to_vec());
        let token_to_id = tokens[..256]
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            merges: Vec::new(),
            ranks: HashMap::new(),
            tokens,
            token_to_id,
        }
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        let result = match self.token_to_id.get(&bytes) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.tokens.push(bytes.clone());
                self.token_to_id.insert(bytes, id);
                id
            }
        };
        self.ranks.insert((left, right), (self.merges.len(), result));
        self.merges.push((left, right, result));
        result
    }

    /// Learns merges until the vocabulary reaches `vocab_size` or no pair repeats.
    ///
    /// Ties between equally frequent pairs go to the smallest `(left, right)`.
    pub fn train(pairs: &[ParallelPair], vocab_size: usize) -> Result<Self, CorpusError> {
        if vocab_size <= BASE_SIZE {
            return Err(CorpusError::Config(format!(
                "vocab_size {vocab_size} must exceed {BASE_SIZE} (256 bytes + 3 specials)"
            )));
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for p in pairs {
            for text in [&p.lang_a_text, &p.lang_b_text] {
                for piece in pretokenize(text) {
                    *counts.entry(piece).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(Vec<u32>, u64)> = counts
            .into_iter()
            .map(|(w, c)| (w.bytes().map(u32::from).collect(), c))
            .collect();

        let mut vocab = Self::base();
        while vocab.tokens.len() < vocab_size {
            let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (w, c) in &words {
                for win in w.windows(2) {
                    *pair_counts.entry((win[0], win[1])).or_default() += c;
                }
            }
            let best = pair_counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((left, right), _)) = best else {
                break;
            };
            let result = vocab.push_merge(left, right);
            for (w, _) in &mut words {
                merge_word(w, left, right, result);
            }
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        let mut word: Vec<u32> = piece.bytes().map(u32::from).collect();
        loop {
            let best = word
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, res)| (rank, w[0], w[1], res)))
                .min();
            match best {
                Some((_, l, r, res)) => merge_word(&mut word, l, r, res),
                None => break,
            }
        }
        out.extend(word);
    }

    /// Subword ids without BOS.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pretokenize(text) {
            self.encode_piece(piece, &mut out);
        }
        out
    }

    /// Concatenates token bytes; specials decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if (BOS..=UNK).contains(&id) {
                continue;
            }
            if let Some(t) = self.tokens.get(id as usize) {
                bytes.extend_from_slice(t);
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER}");
        let _ = writeln!(s, "size {}", self.tokens.len());
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (l, r, res) in &self.merges {
            let _ = writeln!(s, "{l} {r} {res}");
        }
        let _ = writeln!(s, "specials 3");
        let _ = writeln!(s, "bos {BOS}");
        let _ = writeln!(s, "pad {PAD}");
        let _ = writeln!(s, "unk {UNK}");
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let bad = |msg: String| CorpusError::Vocab(msg);
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad(format!("missing or unsupported header, expected `{HEADER}`")));
        }
        let mut field = |name: &str| -> Result<usize, CorpusError> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{name}` line")))?;
            line.strip_prefix(name)
                .and_then(|rest| rest.trim().parse().ok())
                .ok_or_else(|| bad(format!("malformed `{name}` line: {line}")))
        };
        let size = field("size")?;
        let n_merges = field("merges")?;
        let mut vocab = Self::base();
        for _ in 0..n_merges {
            let line = lines.next().ok_or_else(|| bad("truncated merge list".into()))?;
            let nums: Vec<u32> = line
                .split(' ')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| bad(format!("malformed merge `{line}`")))?;
            let [l, r, res] = nums[..] else {
                return Err(bad(format!("malformed merge `{line}`")));
            };
            let known = vocab.tokens.len() as u32;
            if l >= known || r >= known || (BOS..=UNK).contains(&l) || (BOS..=UNK).contains(&r) {
                return Err(bad(format!("merge `{line}` references an unknown token")));
            }
            if vocab.push_merge(l, r) != res {
                return Err(bad(format!("merge `{line}` result id is inconsistent")));
            }
        }
        let rest: Vec<&str> = lines.collect();
        let expected = [
            "specials 3".to_string(),
            format!("bos {BOS}"),
            format!("pad {PAD}"),
            format!("unk {UNK}"),
        ];
        if rest != expected {
            return Err(bad("malformed specials section".into()));
        }
        if vocab.tokens.len() != size {
            return Err(bad(format!("size {size} but rebuilt {}", vocab.tokens.len())));
        }
        Ok(vocab)
    }

    pub fn sha256(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(texts: &[(&str, &str)]) -> Vec<ParallelPair> {
        texts
            .iter()
            .enumerate()
            .map(|(i, (a, b))| ParallelPair {
                lang_a_text: a.to_string(),
                lang_b_text: b.to_string(),
                pair_id: i as u64,
            })
            .collect()
    }

    #[test]
    fn pretokenize_attaches_space_to_following_word() {
        assert_eq!(pretokenize("ab  cd e"), vec!["ab", " ", " cd", " e"]);
        assert_eq!(pretokenize(" x"), vec![" x"]);
        assert!(pretokenize("").is_empty());
    }

    #[test]
    fn most_frequent_pair_merges_first() {
        let corpus = pairs(&[("aaaa", "aaaa"); 10]);
        let v = Vocabulary::train(&corpus, 300).unwrap();
        assert_eq!(v.merges()[0], (97, 97, 259));
        assert_eq!(v.token_bytes(259), Some(&b"aa"[..]));
    }

    #[test]
    fn too_small_vocab_is_config_error() {
        let corpus = pairs(&[("a", "b")]);
        assert!(matches!(Vocabulary::train(&corpus, 259), Err(CorpusError::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_text_round_trips() {
        let corpus = pairs(&[
            ("Tenhle úkol je obtížný", "This task is difficult"),
            ("úkol je snadný", "the task is easy"),
            ("je to úkol", "it is a task"),
        ]);
        let a = Vocabulary::train(&corpus, 290).unwrap();
        let b = Vocabulary::train(&corpus, 290).unwrap();
        assert_eq!(a.merges(), b.merges());
        let back = Vocabulary::from_text(&a.to_text()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.sha256(), a.sha256());
    }

    #[test]
    fn corrupt_vocab_file_is_rejected() {
        let corpus = pairs(&[("abab abab", "cdcd cdcd")]);
        let text = Vocabulary::train(&corpus, 270).unwrap().to_text();
        assert!(Vocabulary::from_text(&text.replace("ffn-lens-vocab 1", "ffn-lens-vocab 9")).is_err());
        let truncated: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(Vocabulary::from_text(&truncated).is_err());
    }

    #[test]
    fn ids_are_dense() {
        let corpus = pairs(&[("hello hello hello", "ahoj ahoj ahoj")]);
        let v = Vocabulary::train(&corpus, 280).unwrap();
        for id in 0..v.len() as u32 {
            assert!(v.token_bytes(id).is_some());
        }
        assert!(v.token_bytes(v.len() as u32).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn decode_inverts_encode(s in "\\PC{0,40}") {
            thread_local! {
                static VOCAB: Vocabulary = Vocabulary::train(&[
                    ParallelPair { lang_a_text: "Europol zpracovává a předává údaje".into(),
                                   lang_b_text: "Europol shall process and transfer data".into(), pair_id: 0 },
                    ParallelPair { lang_a_text: "žluťoučký kůň úpěl ďábelské ódy".into(),
                                   lang_b_text: "the quick brown fox jumps over".into(), pair_id: 1 },
                ], 330).unwrap();
            }
            let back = VOCAB.with(|v| v.decode(&v.encode(&s)));
            prop_assert_eq!(back, s);
        }
    }
}
