//! Deterministic synthetic dialogues with planted ground truth.
//!
//! Every speaker utterance mentions a few *head* keywords; the listener's
//! reply in the same turn mentions the planted *tail* of each head, plus some
//! distractor content words that an imperfect listener-side annotator would
//! also propose. Listener emotions follow a fixed transition table from the
//! speaker's emotion.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::SPECIALS;
use super::{Corpus, Dialogue, EmotionId, Role, TokenId, Utterance, Vocab};
use crate::error::{Error, Result};

const STOP_POOL: [&str; 12] = [
    "i", "the", "a", "my", "so", "it", "was", "that", "you", "to", "and", "is",
];
const PUNCT: [&str; 3] = [".", "!", "?"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Upper bound on the vocabulary, specials included.
    pub vocab_size: usize,
    pub n_emo: usize,
    pub dialogues: usize,
    /// Candidate numbers of (speaker, listener) turns; one is drawn uniformly
    /// per dialogue.
    pub turns: Vec<usize>,
    /// Number of planted head words (each has exactly one tail word).
    pub heads: usize,
    pub fillers: usize,
    pub min_speaker_keywords: usize,
    pub max_speaker_keywords: usize,
    /// Filler words the listener-side annotator proposes besides the tails.
    pub listener_distractors: usize,
    /// Probability that the listener emotion follows the transition table.
    pub emotion_rule_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            n_emo: 8,
            dialogues: 200,
            turns: vec![1, 2, 3],
            heads: 40,
            fillers: 60,
            min_speaker_keywords: 1,
            max_speaker_keywords: 3,
            listener_distractors: 2,
            emotion_rule_prob: 0.9,
        }
    }
}

impl SynthConfig {
    pub fn required_vocab(&self) -> usize {
        SPECIALS.len() + STOP_POOL.len() + PUNCT.len() + 2 * self.heads + self.fillers
    }

    fn validate(&self) -> Result<()> {
        let need = self.required_vocab();
        if self.vocab_size < need {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than the {need} tokens required ({} reserved specials)",
                self.vocab_size,
                SPECIALS.len()
            )));
        }
        if self.n_emo == 0 || self.heads == 0 || self.fillers == 0 {
            return Err(Error::Config("n_emo, heads and fillers must be positive".into()));
        }
        if self.turns.is_empty() || self.turns.contains(&0) {
            return Err(Error::Config("turns must be a nonempty list of positive counts".into()));
        }
        if self.min_speaker_keywords == 0
            || self.min_speaker_keywords > self.max_speaker_keywords
            || self.max_speaker_keywords > self.heads
        {
            return Err(Error::Config("speaker keyword range is invalid".into()));
        }
        if self.max_speaker_keywords > super::KEYWORD_CAP
            || self.max_speaker_keywords + self.listener_distractors > super::KEYWORD_CAP
        {
            return Err(Error::Config("planted keyword counts exceed the keyword cap".into()));
        }
        if self.listener_distractors > self.fillers {
            return Err(Error::Config("more distractors than filler words".into()));
        }
        if !(0.0..=1.0).contains(&self.emotion_rule_prob) {
            return Err(Error::Config("emotion_rule_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The rules a synthetic corpus was generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedRules {
    /// `(head, tail)` token pairs; every head has exactly one tail.
    pub pairs: Vec<(TokenId, TokenId)>,
    pub n_emo: usize,
}

impl PlantedRules {
    /// Listener emotion planted for a speaker emotion.
    pub fn next_emotion(&self, speaker: EmotionId) -> EmotionId {
        transition(speaker, self.n_emo)
    }

    pub fn tail_of(&self, head: TokenId) -> Option<TokenId> {
        self.pairs.iter().find(|p| p.0 == head).map(|p| p.1)
    }
}

fn transition(e: EmotionId, n_emo: usize) -> EmotionId {
    (e + 1) % n_emo
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub rules: PlantedRules,
}

pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let heads: Vec<String> = (0..cfg.heads).map(|i| format!("h{i:03}")).collect();
    let tails: Vec<String> = (0..cfg.heads).map(|i| format!("t{i:03}")).collect();
    let fillers: Vec<String> = (0..cfg.fillers).map(|i| format!("w{i:03}")).collect();
    let vocab = Vocab::from_words(
        STOP_POOL
            .iter()
            .map(|s| s.to_string())
            .chain(PUNCT.iter().map(|s| s.to_string()))
            .chain(heads.iter().cloned())
            .chain(tails.iter().cloned())
            .chain(fillers.iter().cloned()),
    );
    let head_ids: Vec<TokenId> = heads.iter().map(|w| vocab.id(w)).collect();
    let tail_ids: Vec<TokenId> = tails.iter().map(|w| vocab.id(w)).collect();
    let filler_ids: Vec<TokenId> = fillers.iter().map(|w| vocab.id(w)).collect();
    let stop_ids: Vec<TokenId> = STOP_POOL.iter().map(|w| vocab.id(w)).collect();
    let punct_ids: Vec<TokenId> = PUNCT.iter().map(|w| vocab.id(w)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dialogues = Vec::with_capacity(cfg.dialogues);
    for di in 0..cfg.dialogues {
        let label = rng.random_range(0..cfg.n_emo);
        let turns = *cfg.turns.choose(&mut rng).expect("nonempty turns");
        let mut utterances = Vec::with_capacity(2 * turns);
        for _ in 0..turns {
            let k = rng.random_range(cfg.min_speaker_keywords..=cfg.max_speaker_keywords);
            let chosen: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.heads, k).into_vec();

            let keywords: Vec<TokenId> = chosen.iter().map(|&h| head_ids[h]).collect();
            let speaker = compose(&mut rng, &keywords, &[], &stop_ids, &filler_ids, &punct_ids);
            utterances.push(Utterance {
                role: Role::Speaker,
                emotion: label,
                ..speaker
            });

            let listener_emotion = if rng.random_bool(cfg.emotion_rule_prob) {
                transition(label, cfg.n_emo)
            } else {
                rng.random_range(0..cfg.n_emo)
            };
            let tails_here: Vec<TokenId> = chosen.iter().map(|&h| tail_ids[h]).collect();
            let distractors: Vec<TokenId> = filler_ids
                .choose_multiple(&mut rng, cfg.listener_distractors)
                .copied()
                .collect();
            let listener = compose(
                &mut rng,
                &tails_here,
                &distractors,
                &stop_ids,
                &filler_ids,
                &punct_ids,
            );
            utterances.push(Utterance {
                role: Role::Listener,
                emotion: listener_emotion,
                ..listener
            });
        }
        dialogues.push(Dialogue {
            id: format!("syn{di:05}"),
            emotion_label: label,
            utterances,
        });
    }

    Ok(SyntheticCorpus {
        corpus: Corpus { vocab, dialogues },
        rules: PlantedRules {
            pairs: head_ids.into_iter().zip(tail_ids).collect(),
            n_emo: cfg.n_emo,
        },
    })
}

/// Shuffles keywords, marked extras, stopwords and one unmarked filler into an
/// utterance ending in punctuation. Keyword and extra positions are recorded.
fn compose(
    rng: &mut ChaCha8Rng,
    keywords: &[TokenId],
    extras: &[TokenId],
    stops: &[TokenId],
    fillers: &[TokenId],
    punct: &[TokenId],
) -> Utterance {
    #[derive(Clone, Copy, PartialEq)]
    enum Slot {
        Marked(TokenId),
        Plain(TokenId),
    }
    let mut slots: Vec<Slot> = keywords.iter().chain(extras).map(|&t| Slot::Marked(t)).collect();
    let n_stop = rng.random_range(2..=4);
    for _ in 0..n_stop {
        slots.push(Slot::Plain(*stops.choose(rng).expect("stops")));
    }
    let filler = *fillers.choose(rng).expect("fillers");
    if !keywords.contains(&filler) && !extras.contains(&filler) {
        slots.push(Slot::Plain(filler));
    }
    slots.shuffle(rng);
    slots.push(Slot::Plain(*punct.choose(rng).expect("punct")));

    let mut tokens = Vec::with_capacity(slots.len());
    let mut keyword_positions = Vec::new();
    for (i, s) in slots.into_iter().enumerate() {
        match s {
            Slot::Marked(t) => {
                keyword_positions.push(i);
                tokens.push(t);
            }
            Slot::Plain(t) => tokens.push(t),
        }
    }
    Utterance {
        role: Role::Speaker,
        tokens,
        emotion: 0,
        keyword_positions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::annotate::{annotate, OracleAnnotator};
    use crate::corpus::extract_instances;
    use crate::corpus::io::corpus_to_string;
    use proptest::prelude::*;

    fn small(dialogues: usize) -> SynthConfig {
        SynthConfig {
            dialogues,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = synth_corpus(&small(30), 7).unwrap();
        let b = synth_corpus(&small(30), 7).unwrap();
        assert_eq!(corpus_to_string(&a.corpus), corpus_to_string(&b.corpus));
        let c = synth_corpus(&small(30), 8).unwrap();
        assert_ne!(corpus_to_string(&a.corpus), corpus_to_string(&c.corpus));
    }

    #[test]
    fn instance_count_is_sum_of_listener_turns() {
        let syn = synth_corpus(&small(100), 3).unwrap();
        // independent tally: a dialogue of t turns has exactly t listener
        // utterances, each of which is preceded by at least one utterance
        let expected: usize = syn.corpus.dialogues.iter().map(|d| d.utterances.len() / 2).sum();
        let got: usize = syn.corpus.dialogues.iter().map(|d| extract_instances(d).len()).sum();
        assert_eq!(got, expected);
        assert!(syn
            .corpus
            .dialogues
            .iter()
            .all(|d| [2, 4, 6].contains(&d.utterances.len())));
    }

    #[test]
    fn too_small_vocab_is_a_config_error() {
        let cfg = SynthConfig {
            vocab_size: 4,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_corpus(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn listener_mentions_every_planted_tail() {
        let syn = synth_corpus(&small(20), 11).unwrap();
        for d in &syn.corpus.dialogues {
            for turn in d.utterances.chunks(2) {
                for h in turn[0].keyword_tokens() {
                    let t = syn.rules.tail_of(h).unwrap();
                    assert!(turn[1].tokens.contains(&t));
                }
            }
        }
    }

    #[test]
    fn oracle_annotation_reproduces_planted_labels() {
        let syn = synth_corpus(&small(10), 2).unwrap();
        let oracle = OracleAnnotator::new(&syn.corpus.dialogues);
        for d in &syn.corpus.dialogues {
            let mut blank = d.clone();
            for u in &mut blank.utterances {
                u.keyword_positions.clear();
                u.emotion = 0;
            }
            assert_eq!(&annotate(&blank, &oracle, &syn.corpus.vocab).unwrap(), d);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn instances_always_satisfy_invariants(seed in any::<u64>()) {
            let syn = synth_corpus(&small(8), seed).unwrap();
            for d in &syn.corpus.dialogues {
                prop_assert!(d.validate().is_ok());
                for inst in extract_instances(d) {
                    prop_assert_eq!(inst.target.role, Role::Listener);
                    prop_assert!(!inst.context.is_empty());
                    prop_assert_eq!(inst.context_emotions().len(), inst.context.len());
                    prop_assert_eq!(inst.context_keywords().len(), inst.context.len());
                }
            }
        }
    }
}
