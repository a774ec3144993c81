use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// The vocabulary file shipped with the crate: one token per line, line
/// number = id, reserved tokens first.
pub const BUILTIN_VOCAB: &str = include_str!("../../assets/vocab.txt");

/// Dense word-level vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Config(format!(
                "vocabulary must start with {RESERVED:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn builtin() -> Self {
        Self::from_text(BUILTIN_VOCAB).expect("shipped vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

/// A padded token sequence and its validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokens {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

/// Number of positions `prompt` needs including BOS and EOS.
pub fn token_count(prompt: &str) -> usize {
    prompt.split_whitespace().count() + 2
}

/// Lowercases, splits on whitespace, maps to ids (unknown words become UNK),
/// wraps in BOS/EOS, truncates to `max_len` and pads with PAD.
pub fn tokenize(vocab: &Vocabulary, prompt: &str, max_len: usize) -> Tokens {
    assert!(max_len >= 2, "max_len must leave room for BOS and EOS");
    let lowered = prompt.to_lowercase();
    let mut ids = vec![BOS];
    ids.extend(
        lowered
            .split_whitespace()
            .take(max_len - 2)
            .map(|w| vocab.id(w)),
    );
    ids.push(EOS);
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < real).collect();
    Tokens { ids, mask }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_is_dense_with_reserved_first() {
        let v = Vocabulary::builtin();
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(BOS), Some("<bos>"));
        assert_eq!(v.token(EOS), Some("<eos>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(id).unwrap()), id);
        }
        assert!((55..=70).contains(&v.len()));
    }

    #[test]
    fn empty_prompt() {
        let t = tokenize(&Vocabulary::builtin(), "", 6);
        assert_eq!(t.ids, vec![BOS, EOS, PAD, PAD, PAD, PAD]);
        assert_eq!(t.mask, vec![true, true, false, false, false, false]);
    }

    #[test]
    fn red_circle_ids_come_from_vocab_file() {
        let v = Vocabulary::builtin();
        // Line numbers in assets/vocab.txt.
        let line = |w: &str| {
            BUILTIN_VOCAB
                .lines()
                .position(|l| l == w)
                .unwrap() as u32
        };
        let t = tokenize(&v, "a red circle", 8);
        assert_eq!(
            t.ids,
            vec![BOS, line("a"), line("red"), line("circle"), EOS, PAD, PAD, PAD]
        );
        assert_eq!(t.ids[1..4], [4, 7, 11]);
    }

    #[test]
    fn unknown_words_map_to_unk_and_case_folds() {
        let v = Vocabulary::builtin();
        let t = tokenize(&v, "A Zebra", 5);
        assert_eq!(t.ids, vec![BOS, v.id("a"), UNK, EOS, PAD]);
    }

    #[test]
    fn truncates_but_keeps_eos() {
        let v = Vocabulary::builtin();
        let t = tokenize(&v, "a red circle left of a blue square", 5);
        assert_eq!(t.ids, vec![BOS, v.id("a"), v.id("red"), v.id("circle"), EOS]);
        assert!(t.mask.iter().all(|m| *m));
    }

    #[test]
    fn deterministic() {
        let v = Vocabulary::builtin();
        assert_eq!(tokenize(&v, "a green square", 10), tokenize(&v, "a green square", 10));
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(Vocabulary::from_text("a\nb\n").is_err());
        assert!(Vocabulary::from_text("<pad>\n<bos>\n<eos>\n<unk>\nx\nx\n").is_err());
    }
}
