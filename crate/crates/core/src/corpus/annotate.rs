//! Pluggable emotion/keyword annotation.

use std::collections::HashMap;

use super::{Dialogue, EmotionId, TokenId, Vocab, KEYWORD_CAP};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeywordCandidate {
    pub position: usize,
    pub score: f64,
}

/// Source of per-utterance emotion and keyword proposals. Implementations
/// must be deterministic.
pub trait Annotator {
    fn emotion(&self, dialogue: &Dialogue, index: usize) -> EmotionId;
    fn keywords(&self, dialogue: &Dialogue, index: usize) -> Vec<KeywordCandidate>;
}

/// Fills emotion and keyword positions of every utterance. Stopwords,
/// punctuation, and special tokens are dropped before the top-6 cut; ties in
/// score go to the earlier position.
pub fn annotate(dialogue: &Dialogue, annotator: &dyn Annotator, vocab: &Vocab) -> Result<Dialogue> {
    let mut out = dialogue.clone();
    for (i, utt) in out.utterances.iter_mut().enumerate() {
        let reject = |reason: String| Error::Annotation {
            dialogue: dialogue.id.clone(),
            utterance: i,
            reason,
        };
        let mut cands = annotator.keywords(dialogue, i);
        if let Some(bad) = cands.iter().find(|c| c.position >= utt.tokens.len()) {
            return Err(reject(format!(
                "keyword position {} outside {} tokens",
                bad.position,
                utt.tokens.len()
            )));
        }
        cands.retain(|c| vocab.is_content(utt.tokens[c.position]));
        cands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.position.cmp(&b.position)));
        let mut kept: Vec<usize> = Vec::with_capacity(KEYWORD_CAP);
        for c in cands {
            if !kept.contains(&c.position) {
                kept.push(c.position);
                if kept.len() == KEYWORD_CAP {
                    break;
                }
            }
        }
        kept.sort_unstable();
        utt.keyword_positions = kept;
        utt.emotion = annotator.emotion(dialogue, i);
    }
    Ok(out)
}

/// Reads annotations straight from a reference corpus (e.g. the planted
/// ground truth of a synthetic corpus).
#[derive(Clone, Debug, Default)]
pub struct OracleAnnotator {
    truth: HashMap<(String, usize), (EmotionId, Vec<usize>)>,
}

impl OracleAnnotator {
    pub fn new(reference: &[Dialogue]) -> Self {
        let truth = reference
            .iter()
            .flat_map(|d| {
                d.utterances.iter().enumerate().map(move |(i, u)| {
                    ((d.id.clone(), i), (u.emotion, u.keyword_positions.clone()))
                })
            })
            .collect();
        Self { truth }
    }
}

impl Annotator for OracleAnnotator {
    fn emotion(&self, dialogue: &Dialogue, index: usize) -> EmotionId {
        self.truth
            .get(&(dialogue.id.clone(), index))
            .map(|t| t.0)
            .unwrap_or(dialogue.utterances[index].emotion)
    }

    fn keywords(&self, dialogue: &Dialogue, index: usize) -> Vec<KeywordCandidate> {
        self.truth
            .get(&(dialogue.id.clone(), index))
            .map(|t| {
                t.1.iter()
                    .map(|&position| KeywordCandidate { position, score: 1.0 })
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Scores tokens from a fixed lexicon (token → weight); emotions come from a
/// caller-supplied per-utterance table, falling back to a default.
#[derive(Clone, Debug)]
pub struct LexiconAnnotator {
    pub weights: HashMap<TokenId, f64>,
    pub emotions: HashMap<usize, EmotionId>,
    pub default_emotion: EmotionId,
}

impl Annotator for LexiconAnnotator {
    fn emotion(&self, _dialogue: &Dialogue, index: usize) -> EmotionId {
        self.emotions
            .get(&index)
            .copied()
            .unwrap_or(self.default_emotion)
    }

    fn keywords(&self, dialogue: &Dialogue, index: usize) -> Vec<KeywordCandidate> {
        dialogue.utterances[index]
            .tokens
            .iter()
            .enumerate()
            .filter_map(|(position, t)| {
                self.weights
                    .get(t)
                    .map(|&score| KeywordCandidate { position, score })
            })
            .collect()
    }
}
