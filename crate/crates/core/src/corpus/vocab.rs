//! Closed-vocabulary tokenisation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const SEN: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const UNK: TokenId = 4;

pub const SPECIALS: [&str; 5] = ["[PAD]", "[SEN]", "[BOS]", "[EOS]", "[UNK]"];

/// Lowercases, splits on whitespace, and splits every ASCII punctuation
/// character into its own token. Bracketed special tokens pass through.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if SPECIALS.contains(&chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let mut cur = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub fn is_punctuation(word: &str) -> bool {
    !word.is_empty() && word.chars().all(|c| c.is_ascii_punctuation())
}

fn stopword_set() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        include_str!("../../data/stopwords.txt")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

pub fn is_stopword(word: &str) -> bool {
    stopword_set().contains(word)
}

pub fn stopwords() -> impl Iterator<Item = &'static str> {
    let mut v: Vec<_> = stopword_set().iter().copied().collect();
    v.sort_unstable();
    v.into_iter()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Specials followed by `words` in the given order (duplicates skipped).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: HashSet<String> = list.iter().cloned().collect();
        for w in words {
            let w = w.as_ref();
            if seen.insert(w.to_string()) {
                list.push(w.to_string());
            }
        }
        Self::from(list)
    }

    /// Builds a vocabulary from raw texts: words by descending frequency then
    /// lexical order, truncated to `max_size` entries including specials.
    pub fn build<'a, I>(texts: I, max_size: Option<usize>) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in tokenize(t) {
                if !SPECIALS.contains(&w.as_str()) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let cap = max_size
            .map(|m| m.saturating_sub(SPECIALS.len()))
            .unwrap_or(usize::MAX);
        Self::from_words(ranked.into_iter().take(cap).map(|(w, _)| w))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn get(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or("[UNK]")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Whether the token may serve as a keyword (not special, stopword, or
    /// punctuation).
    pub fn is_content(&self, id: TokenId) -> bool {
        if id < SPECIALS.len() {
            return false;
        }
        let w = self.word(id);
        !is_stopword(w) && !is_punctuation(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("I'm SO happy, really!"),
            vec!["i", "'", "m", "so", "happy", ",", "really", "!"]
        );
        assert_eq!(tokenize("[SEN] hi"), vec!["[SEN]", "hi"]);
    }

    #[test]
    fn specials_have_reserved_ids() {
        let v = Vocab::from_words(["hello"]);
        assert_eq!(v.id("[PAD]"), PAD);
        assert_eq!(v.id("[SEN]"), SEN);
        assert_eq!(v.id("[BOS]"), BOS);
        assert_eq!(v.id("[EOS]"), EOS);
        assert_eq!(v.id("nope"), UNK);
        assert_eq!(v.id("hello"), 5);
    }

    #[test]
    fn build_orders_by_frequency_and_caps() {
        let v = Vocab::build(["b a b", "c b a"], Some(7));
        assert_eq!(&v.words()[5..], &["b".to_string(), "a".to_string()]);
    }

    #[test]
    fn content_filter() {
        let v = Vocab::from_words(["the", ".", "dog"]);
        assert!(!v.is_content(v.id("the")));
        assert!(!v.is_content(v.id(".")));
        assert!(v.is_content(v.id("dog")));
        assert!(!v.is_content(SEN));
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::from_words(["x", "y"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.id("y"), 6);
    }
}
