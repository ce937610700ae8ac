//! Loader for the EmpatheticDialogues CSV release
//! (`conv_id,utterance_idx,context,prompt,speaker_idx,utterance,...`).
//!
//! Utterance-level emotions are initialised to the dialogue label and keyword
//! sets are left empty; an [`Annotator`](super::annotate::Annotator) fills them.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::io::{DialogueRecord, UtteranceRecord};
use super::Role;
use crate::error::{Error, Result};

/// The 32 emotion labels, in id order.
pub const ED_EMOTIONS: [&str; 32] = [
    "afraid",
    "angry",
    "annoyed",
    "anticipating",
    "anxious",
    "apprehensive",
    "ashamed",
    "caring",
    "confident",
    "content",
    "devastated",
    "disappointed",
    "disgusted",
    "embarrassed",
    "excited",
    "faithful",
    "furious",
    "grateful",
    "guilty",
    "hopeful",
    "impressed",
    "jealous",
    "joyful",
    "lonely",
    "nostalgic",
    "prepared",
    "proud",
    "sad",
    "sentimental",
    "surprised",
    "terrified",
    "trusting",
];

pub const ED_FILES: [&str; 3] = ["train.csv", "valid.csv", "test.csv"];

pub fn emotion_id(label: &str) -> Option<usize> {
    ED_EMOTIONS.iter().position(|e| *e == label.trim())
}

struct Row {
    conv_id: String,
    idx: usize,
    label: usize,
    text: String,
}

/// Parses one CSV file. Rows with fewer than six fields are reported with
/// their line number.
pub fn parse_ed_csv(path: &Path, reader: impl Read) -> Result<Vec<DialogueRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .quoting(false)
        .from_reader(reader);
    let err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() < 6 {
            return Err(err(line, format!("expected at least 6 fields, found {}", rec.len())));
        }
        let idx: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| err(line, format!("bad utterance_idx `{}`", &rec[1])))?;
        let label =
            emotion_id(&rec[2]).ok_or_else(|| err(line, format!("unknown emotion `{}`", &rec[2])))?;
        rows.push(Row {
            conv_id: rec[0].to_string(),
            idx,
            label,
            text: rec[5].replace("_comma_", ","),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for r in rows {
        if !groups.contains_key(&r.conv_id) {
            order.push(r.conv_id.clone());
        }
        groups.entry(r.conv_id.clone()).or_default().push(r);
    }

    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).expect("grouped");
        rows.sort_by_key(|r| r.idx);
        if rows.len() < 2 {
            log::warn!("skipping dialogue `{id}` with a single utterance");
            continue;
        }
        let label = rows[0].label;
        let utterances = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| UtteranceRecord {
                role: if i % 2 == 0 { Role::Speaker } else { Role::Listener },
                text: r.text,
                emotion: label,
                keyword_indices: Vec::new(),
            })
            .collect();
        out.push(DialogueRecord {
            id,
            emotion_label: label,
            utterances,
        });
    }
    Ok(out)
}

/// Reads every release file present under `dir`, in train/valid/test order.
pub fn import_dir(dir: &Path) -> Result<Vec<DialogueRecord>> {
    let mut all = Vec::new();
    let mut found = false;
    for name in ED_FILES {
        let path = dir.join(name);
        if path.exists() {
            found = true;
            all.extend(parse_ed_csv(&path, File::open(&path)?)?);
        }
    }
    if !found {
        return Err(Error::Empty(format!(
            "no EmpatheticDialogues CSV files under {}",
            dir.display()
        )));
    }
    Ok(all)
}
