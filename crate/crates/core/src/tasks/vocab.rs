use std::collections::HashMap;

use super::TaskError;
use crate::model::{EOS, PAD, START};

/// Words of the instruction wrapper, in order, around the named ending.
pub const WRAPPER_HEAD: [&str; 2] = ["end", "with"];
pub const WRAPPER_TAIL: &str = ":";

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Closed word-level vocabulary: specials, wrapper words, content words, endings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    content: std::ops::Range<usize>,
    endings: std::ops::Range<usize>,
}

/// Deterministic pronounceable pseudo-words: consonant-vowel-consonant-vowel,
/// visited with a stride so neighbours differ in every letter.
fn pseudo_words(count: usize, offset: usize) -> Vec<String> {
    let syllables: Vec<[u8; 2]> = CONSONANTS
        .iter()
        .flat_map(|&c| VOWELS.iter().map(move |&v| [c, v]))
        .collect();
    let n = syllables.len();
    let total = n * n;
    // 37 is coprime with 70², so the stride visits every word once.
    (offset..offset + count)
        .map(|i| {
            let k = (i * 37) % total;
            let (a, b) = (syllables[k / n], syllables[k % n]);
            String::from_utf8(vec![a[0], a[1], b[0], b[1]]).expect("ascii")
        })
        .collect()
}

impl Vocabulary {
    pub fn new(n_content: usize, n_endings: usize) -> Result<Self, TaskError> {
        let mut words: Vec<String> = ["<pad>", "</s>", "<start>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        debug_assert_eq!((PAD, EOS, START), (0, 1, 2));
        words.extend(WRAPPER_HEAD.iter().map(|s| s.to_string()));
        words.push(WRAPPER_TAIL.to_string());
        let content_start = words.len();
        words.extend(pseudo_words(n_content, 0));
        let ending_start = words.len();
        words.extend(pseudo_words(n_endings, n_content));
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(TaskError::Config(format!("duplicate word {w}")));
            }
        }
        Ok(Self {
            content: content_start..ending_start,
            endings: ending_start..words.len(),
            words,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn content_ids(&self) -> std::ops::Range<usize> {
        self.content.clone()
    }

    pub fn ending_ids(&self) -> std::ops::Range<usize> {
        self.endings.clone()
    }

    pub fn is_special(id: usize) -> bool {
        id == PAD || id == EOS || id == START
    }

    /// Whitespace-separated words; unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, TaskError> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| TaskError::UnknownWord(w.to_string()))
            })
            .collect()
    }

    /// Space-joined words with special tokens dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&t| !Self::is_special(t))
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `end with X :` followed by `prefix`.
    pub fn wrap(&self, instructed: usize, prefix: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = WRAPPER_HEAD
            .iter()
            .map(|w| self.index[*w])
            .collect();
        out.push(instructed);
        out.push(self.index[WRAPPER_TAIL]);
        out.extend_from_slice(prefix);
        out
    }
}
