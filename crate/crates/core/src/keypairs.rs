//! Keyword-pair mining: same-turn speaker-keyword × listener-word
//! co-occurrence scored by pointwise mutual information.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::vocab::{is_punctuation, is_stopword};
use crate::corpus::{Dialogue, Role, TokenId, Utterance, Vocab, KEYWORD_CAP};
use crate::error::{Error, Result};

/// Default PMI cut-off, in nats.
pub const DEFAULT_PMI_THRESHOLD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct KeywordPair {
    pub head: TokenId,
    pub tail: TokenId,
    pub pmi: f64,
}

/// Pair, head, and tail tallies. Forms a commutative monoid under
/// [`CooccurrenceCounts::merge`], so shards can be counted independently.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CooccurrenceCounts {
    pub pairs: BTreeMap<(TokenId, TokenId), u64>,
    pub heads: BTreeMap<TokenId, u64>,
    pub tails: BTreeMap<TokenId, u64>,
    pub total: u64,
}

impl CooccurrenceCounts {
    /// Adds one turn. Repeated tokens within an utterance count once.
    pub fn add_turn(&mut self, speaker_keywords: &[TokenId], listener_words: &[TokenId]) {
        let hs: BTreeSet<TokenId> = speaker_keywords.iter().copied().collect();
        let ts: BTreeSet<TokenId> = listener_words.iter().copied().collect();
        for &h in &hs {
            for &t in &ts {
                *self.pairs.entry((h, t)).or_default() += 1;
                *self.heads.entry(h).or_default() += 1;
                *self.tails.entry(t).or_default() += 1;
                self.total += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &CooccurrenceCounts) {
        for (k, v) in &other.pairs {
            *self.pairs.entry(*k).or_default() += v;
        }
        for (k, v) in &other.heads {
            *self.heads.entry(*k).or_default() += v;
        }
        for (k, v) in &other.tails {
            *self.tails.entry(*k).or_default() += v;
        }
        self.total += other.total;
    }

    pub fn pair_count(&self, h: TokenId, t: TokenId) -> u64 {
        self.pairs.get(&(h, t)).copied().unwrap_or(0)
    }
}

/// `(speaker, listener)` utterance pairs of the same turn.
pub fn turns(dialogue: &Dialogue) -> impl Iterator<Item = (&Utterance, &Utterance)> {
    dialogue
        .utterances
        .windows(2)
        .filter(|w| w[0].role == Role::Speaker && w[1].role == Role::Listener)
        .map(|w| (&w[0], &w[1]))
}

/// Tallies speaker keywords × listener candidate words over every turn.
pub fn count_cooccurrence(dialogues: &[Dialogue]) -> Result<CooccurrenceCounts> {
    let annotated = dialogues.iter().any(|d| {
        d.utterances
            .iter()
            .any(|u| u.role == Role::Speaker && !u.keyword_positions.is_empty())
    });
    if !annotated {
        return Err(Error::Unannotated(
            "no speaker utterance carries keywords".into(),
        ));
    }
    let mut counts = CooccurrenceCounts::default();
    for d in dialogues {
        for (s, l) in turns(d) {
            counts.add_turn(&s.keyword_tokens(), &l.keyword_tokens());
        }
    }
    Ok(counts)
}

/// `ln(pair·total / (head·tail))`.
pub fn pmi(counts: &CooccurrenceCounts, h: TokenId, t: TokenId) -> Result<f64> {
    let c = counts.pair_count(h, t);
    if c == 0 {
        return Err(Error::AbsentPair {
            head: h.to_string(),
            tail: t.to_string(),
        });
    }
    let hc = counts.heads[&h] as f64;
    let tc = counts.tails[&t] as f64;
    Ok(((c as f64) * (counts.total as f64) / (hc * tc)).ln())
}

/// Every pair with `pmi ≥ threshold` whose tail is neither a stopword nor
/// punctuation, ordered by descending pmi then by (head, tail) words.
pub fn build_pairs(counts: &CooccurrenceCounts, threshold: f64, vocab: &Vocab) -> Vec<KeywordPair> {
    let mut out: Vec<KeywordPair> = counts
        .pairs
        .keys()
        .filter(|(_, t)| {
            let w = vocab.word(*t);
            !is_stopword(w) && !is_punctuation(w)
        })
        .filter_map(|&(head, tail)| {
            let v = pmi(counts, head, tail).expect("observed pair");
            (v >= threshold).then_some(KeywordPair { head, tail, pmi: v })
        })
        .collect();
    out.sort_by(|a, b| {
        b.pmi
            .total_cmp(&a.pmi)
            .then_with(|| vocab.word(a.head).cmp(vocab.word(b.head)))
            .then_with(|| vocab.word(a.tail).cmp(vocab.word(b.tail)))
    });
    out
}

/// Head → `(tail, pmi)` lookup, tails sorted by descending pmi.
#[derive(Clone, Debug, Default)]
pub struct PairIndex {
    by_head: HashMap<TokenId, Vec<(TokenId, f64)>>,
}

impl PairIndex {
    pub fn new(pairs: &[KeywordPair]) -> Self {
        let mut by_head: HashMap<TokenId, Vec<(TokenId, f64)>> = HashMap::new();
        for p in pairs {
            by_head.entry(p.head).or_default().push((p.tail, p.pmi));
        }
        for v in by_head.values_mut() {
            v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        }
        Self { by_head }
    }

    pub fn tails(&self, head: TokenId) -> &[(TokenId, f64)] {
        self.by_head.get(&head).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Highest pmi of `tail` among pairs headed by any of `heads`.
    pub fn best_pmi(&self, heads: &[TokenId], tail: TokenId) -> Option<f64> {
        heads
            .iter()
            .flat_map(|h| self.tails(*h))
            .filter(|(t, _)| *t == tail)
            .map(|(_, p)| *p)
            .max_by(f64::total_cmp)
    }

    pub fn is_empty(&self) -> bool {
        self.by_head.is_empty()
    }
}

/// Positions of listener tokens that are tails of pairs headed by a
/// same-turn speaker keyword; top 6 by pmi, returned in increasing order.
pub fn assign_listener_keywords(
    listener: &Utterance,
    index: &PairIndex,
    speaker_keywords: &[TokenId],
) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = listener
        .tokens
        .iter()
        .enumerate()
        .filter_map(|(p, &t)| index.best_pmi(speaker_keywords, t).map(|s| (p, s)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<usize> = scored.into_iter().take(KEYWORD_CAP).map(|(p, _)| p).collect();
    kept.sort_unstable();
    kept
}

/// Replaces every listener utterance's keyword candidates with the
/// pair-assigned keywords.
pub fn relabel_listeners(dialogues: &[Dialogue], index: &PairIndex) -> Vec<Dialogue> {
    dialogues
        .iter()
        .map(|d| {
            let mut d = d.clone();
            for i in 1..d.utterances.len() {
                if d.utterances[i].role == Role::Listener {
                    let heads = if d.utterances[i - 1].role == Role::Speaker {
                        d.utterances[i - 1].keyword_tokens()
                    } else {
                        Vec::new()
                    };
                    let kw = assign_listener_keywords(&d.utterances[i], index, &heads);
                    d.utterances[i].keyword_positions = kw;
                }
            }
            d
        })
        .collect()
}

/// `head<TAB>tail<TAB>pmi` lines with six decimals.
pub fn pairs_to_string(pairs: &[KeywordPair], vocab: &Vocab) -> String {
    let mut s = String::new();
    for p in pairs {
        writeln!(s, "{}\t{}\t{:.6}", vocab.word(p.head), vocab.word(p.tail), p.pmi)
            .expect("string write");
    }
    s
}

/// Parses a pairs file. Words outside `vocab` are skipped with a warning.
pub fn parse_pairs(path: &Path, text: &str, vocab: &Vocab) -> Result<Vec<KeywordPair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err("expected head<TAB>tail<TAB>pmi"));
        }
        let pmi: f64 = fields[2].parse().map_err(|_| err("pmi is not a number"))?;
        match (vocab.get(fields[0]), vocab.get(fields[1])) {
            (Some(head), Some(tail)) => out.push(KeywordPair { head, tail, pmi }),
            _ => log::warn!("{}:{}: pair outside vocabulary skipped", path.display(), i + 1),
        }
    }
    Ok(out)
}
