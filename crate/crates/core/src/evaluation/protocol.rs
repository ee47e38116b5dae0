use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Key {
    Bonafide,
    Spoof,
}

impl Key {
    /// Class index used by the classifier head: bona fide is 0.
    pub fn label(self) -> usize {
        match self {
            Key::Bonafide => 0,
            Key::Spoof => 1,
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Key::Bonafide => "bonafide",
            Key::Spoof => "spoof",
        })
    }
}

impl FromStr for Key {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bonafide" => Ok(Key::Bonafide),
            "spoof" => Ok(Key::Spoof),
            other => Err(format!("unknown key {other:?}, expected bonafide or spoof")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Dev,
    Eval,
}

impl Partition {
    /// Reads the partition from the `_T_` / `_D_` / `_E_` infix of an
    /// utterance id; ids without one are treated as evaluation trials.
    pub fn infer(utt_id: &str) -> Self {
        if utt_id.contains("_T_") {
            Partition::Train
        } else if utt_id.contains("_D_") {
            Partition::Dev
        } else {
            Partition::Eval
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialRecord {
    pub speaker_id: String,
    pub utt_id: String,
    /// `-` for bona fide trials.
    pub attack_id: String,
    pub key: Key,
    pub partition: Partition,
}

impl TrialRecord {
    pub fn to_line(&self) -> String {
        format!("{} {} - {} {}", self.speaker_id, self.utt_id, self.attack_id, self.key)
    }
}

/// Parsed CM protocol with unique utterance ids, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Protocol {
    records: Vec<TrialRecord>,
    index: HashMap<String, usize>,
}

impl Protocol {
    pub fn from_records(records: Vec<TrialRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.utt_id.clone(), i).is_some() {
                return Err(Error::Dataset(format!("utterance {} listed twice", r.utt_id)));
            }
        }
        Ok(Self { records, index })
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, utt_id: &str) -> Option<&TrialRecord> {
        self.index.get(utt_id).map(|&i| &self.records[i])
    }

    pub fn key_of(&self, utt_id: &str) -> Option<Key> {
        self.get(utt_id).map(|r| r.key)
    }

    pub fn count(&self, key: Key) -> usize {
        self.records.iter().filter(|r| r.key == key).count()
    }

    pub fn partition(&self, p: Partition) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter(move |r| r.partition == p)
    }

    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| r.to_line() + "\n").collect()
    }
}

/// Parses `SPEAKER UTT_ID - ATTACK_ID KEY` lines. Blank lines are skipped;
/// `path` only labels errors.
pub fn parse_protocol_str(text: &str, path: &Path) -> Result<Protocol> {
    let err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(line_no, format!("expected 5 fields, found {}", fields.len())));
        }
        let key = fields[4].parse::<Key>().map_err(|e| err(line_no, e))?;
        let utt_id = fields[1].to_string();
        if let Some(prev) = seen.insert(utt_id.clone(), line_no) {
            return Err(err(line_no, format!("utterance {utt_id} already listed on line {prev}")));
        }
        records.push(TrialRecord {
            speaker_id: fields[0].to_string(),
            partition: Partition::infer(&utt_id),
            utt_id,
            attack_id: fields[3].to_string(),
            key,
        });
    }
    Protocol::from_records(records)
}

pub fn parse_protocol(path: &Path) -> Result<Protocol> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_protocol_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Protocol> {
        parse_protocol_str(s, Path::new("p.txt"))
    }

    #[test]
    fn published_line_layout() {
        let p = parse("LA_0079 LA_T_1138215 - - bonafide\nLA_0079 LA_T_1000137 - A01 spoof\n").unwrap();
        let r = &p.records()[0];
        assert_eq!((r.key, r.attack_id.as_str(), r.partition), (Key::Bonafide, "-", Partition::Train));
        let r = &p.records()[1];
        assert_eq!((r.key, r.attack_id.as_str()), (Key::Spoof, "A01"));
        assert_eq!((p.count(Key::Bonafide), p.count(Key::Spoof)), (1, 1));
        assert_eq!(parse(&p.to_text()).unwrap(), p);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        match parse("LA_0079 LA_T_1 - - bonafide\n\nLA_0079 LA_T_2 -\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("a b - - genuine"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("a u - - spoof\na u - - spoof"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn partition_inference() {
        assert_eq!(Partition::infer("LA_D_1"), Partition::Dev);
        assert_eq!(Partition::infer("LA_E_1"), Partition::Eval);
        assert_eq!(Partition::infer("utt7"), Partition::Eval);
    }
}
