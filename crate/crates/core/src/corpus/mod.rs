//! Dialogue data model, instance extraction, annotation, and corpora.

pub mod annotate;
pub mod import;
pub mod io;
pub mod synth;
pub mod vocab;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use vocab::{TokenId, Vocab};

pub type EmotionId = usize;

/// Maximum number of keywords kept per utterance.
pub const KEYWORD_CAP: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Speaker,
    Listener,
}

impl Role {
    pub fn index(self) -> usize {
        match self {
            Role::Speaker => 0,
            Role::Listener => 1,
        }
    }

    pub fn other(self) -> Role {
        match self {
            Role::Speaker => Role::Listener,
            Role::Listener => Role::Speaker,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub tokens: Vec<TokenId>,
    pub emotion: EmotionId,
    /// Token indices (into `tokens`, without the `[SEN]` prefix), strictly
    /// increasing.
    pub keyword_positions: Vec<usize>,
}

impl Utterance {
    pub fn new(role: Role, tokens: Vec<TokenId>, emotion: EmotionId) -> Self {
        Self {
            role,
            tokens,
            emotion,
            keyword_positions: Vec::new(),
        }
    }

    pub fn keyword_tokens(&self) -> Vec<TokenId> {
        self.keyword_positions.iter().map(|&p| self.tokens[p]).collect()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.keyword_positions.len() > KEYWORD_CAP {
            return Err(format!(
                "{} keywords exceed the cap of {KEYWORD_CAP}",
                self.keyword_positions.len()
            ));
        }
        for w in self.keyword_positions.windows(2) {
            if w[0] >= w[1] {
                return Err("keyword positions not strictly increasing".into());
            }
        }
        if let Some(&p) = self.keyword_positions.iter().find(|&&p| p >= self.tokens.len()) {
            return Err(format!(
                "keyword position {p} outside {} tokens",
                self.tokens.len()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub emotion_label: EmotionId,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidDialogue {
            id: self.id.clone(),
            reason,
        };
        if self.utterances.len() < 2 {
            return Err(fail("fewer than 2 utterances".into()));
        }
        let mut expected = Role::Speaker;
        for (i, u) in self.utterances.iter().enumerate() {
            if u.role != expected {
                return Err(fail(format!("utterance {i} breaks role alternation")));
            }
            u.validate().map_err(|r| fail(format!("utterance {i}: {r}")))?;
            expected = expected.other();
        }
        Ok(())
    }

    pub fn listener_turns(&self) -> usize {
        self.utterances
            .iter()
            .filter(|u| u.role == Role::Listener)
            .count()
    }
}

/// One training/evaluation example: a context and the listener response that
/// follows it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub context: Vec<Utterance>,
    pub target: Utterance,
}

impl Instance {
    pub fn context_emotions(&self) -> Vec<EmotionId> {
        self.context.iter().map(|u| u.emotion).collect()
    }

    pub fn context_keywords(&self) -> Vec<Vec<TokenId>> {
        self.context.iter().map(Utterance::keyword_tokens).collect()
    }

    pub fn is_multi_turn(&self) -> bool {
        self.context.len() >= 2
    }
}

/// One instance per listener utterance, with every preceding utterance as
/// context.
pub fn extract_instances(dialogue: &Dialogue) -> Vec<Instance> {
    let mut out = Vec::new();
    for (n, u) in dialogue.utterances.iter().enumerate() {
        if u.role == Role::Listener && n > 0 {
            out.push(Instance {
                id: format!("{}#{}", dialogue.id, out.len()),
                context: dialogue.utterances[..n].to_vec(),
                target: u.clone(),
            });
        }
    }
    out
}

/// Counts of instances in a corpus: `(all, multi_turn)`.
pub fn instance_counts(dialogues: &[Dialogue]) -> (usize, usize) {
    let mut all = 0;
    let mut multi = 0;
    for d in dialogues {
        for (n, u) in d.utterances.iter().enumerate() {
            if u.role == Role::Listener && n > 0 {
                all += 1;
                if n >= 2 {
                    multi += 1;
                }
            }
        }
    }
    (all, multi)
}

/// A tokenised corpus together with the vocabulary its ids refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub dialogues: Vec<Dialogue>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Dialogue-level split. Sizes are `round(n·r_train)`, `round(n·r_valid)`,
/// and the remainder; membership is a seeded shuffle, and each part keeps the
/// original corpus order.
pub fn split_corpus(dialogues: &[Dialogue], ratios: [f64; 3], seed: u64) -> Result<Split> {
    if dialogues.is_empty() {
        return Err(Error::Empty("cannot split an empty corpus".into()));
    }
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be nonnegative and sum to 1"
        )));
    }
    let n = dialogues.len();
    let n_train = ((n as f64) * ratios[0]).round() as usize;
    let n_valid = (((n as f64) * ratios[1]).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut part = vec![2u8; n];
    for &i in &order[..n_train] {
        part[i] = 0;
    }
    for &i in &order[n_train..n_train + n_valid] {
        part[i] = 1;
    }
    let pick = |k: u8| -> Vec<Dialogue> {
        dialogues
            .iter()
            .zip(&part)
            .filter(|(_, &p)| p == k)
            .map(|(d, _)| d.clone())
            .collect()
    };
    Ok(Split {
        train: pick(0),
        valid: pick(1),
        test: pick(2),
    })
}
