//! Line-oriented corpus file: one JSON dialogue record per line.
//!
//! ```text
//! {"id":"d0","emotion_label":3,"utterances":[{"role":"speaker","text":"...","emotion":3,"keyword_indices":[1,4]}, ...]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Dialogue, EmotionId, Role, Utterance, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub role: Role,
    pub text: String,
    pub emotion: EmotionId,
    pub keyword_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueRecord {
    pub id: String,
    pub emotion_label: EmotionId,
    pub utterances: Vec<UtteranceRecord>,
}

impl DialogueRecord {
    pub fn from_dialogue(d: &Dialogue, vocab: &Vocab) -> Self {
        Self {
            id: d.id.clone(),
            emotion_label: d.emotion_label,
            utterances: d
                .utterances
                .iter()
                .map(|u| UtteranceRecord {
                    role: u.role,
                    text: vocab.decode(&u.tokens),
                    emotion: u.emotion,
                    keyword_indices: u.keyword_positions.clone(),
                })
                .collect(),
        }
    }

    pub fn to_dialogue(&self, vocab: &Vocab) -> Dialogue {
        Dialogue {
            id: self.id.clone(),
            emotion_label: self.emotion_label,
            utterances: self
                .utterances
                .iter()
                .map(|u| Utterance {
                    role: u.role,
                    tokens: vocab.encode(&u.text),
                    emotion: u.emotion,
                    keyword_positions: u.keyword_indices.clone(),
                })
                .collect(),
        }
    }
}

/// Serialises the corpus to the line format.
pub fn corpus_to_string(corpus: &Corpus) -> String {
    let mut s = String::new();
    for d in &corpus.dialogues {
        let rec = DialogueRecord::from_dialogue(d, &corpus.vocab);
        s.push_str(&serde_json::to_string(&rec).expect("record serialises"));
        s.push('\n');
    }
    s
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(corpus_to_string(corpus).as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn parse_records(path: &Path, reader: impl BufRead) -> Result<Vec<DialogueRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogueRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Loads a corpus file, building the vocabulary from its texts.
pub fn read_corpus(path: &Path, max_vocab: Option<usize>) -> Result<Corpus> {
    let records = parse_records(path, BufReader::new(File::open(path)?))?;
    corpus_from_records(path, &records, max_vocab)
}

pub fn corpus_from_records(
    path: &Path,
    records: &[DialogueRecord],
    max_vocab: Option<usize>,
) -> Result<Corpus> {
    let vocab = Vocab::build(
        records
            .iter()
            .flat_map(|r| r.utterances.iter().map(|u| u.text.as_str())),
        max_vocab,
    );
    let mut dialogues = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let d = rec.to_dialogue(&vocab);
        d.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        dialogues.push(d);
    }
    Ok(Corpus { vocab, dialogues })
}
