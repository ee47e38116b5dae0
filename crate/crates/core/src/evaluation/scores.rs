use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::protocol::{Key, Protocol};
use crate::error::{Error, Result};

/// Detection scores by utterance id (higher means more bona fide), with
/// optional ground-truth keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    scores: BTreeMap<String, f64>,
    keys: BTreeMap<String, Key>,
}

impl ScoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a keyed set from `(score, key)` pairs with generated ids.
    pub fn from_labeled(bonafide: &[f64], spoof: &[f64]) -> Result<Self> {
        let mut s = Self::new();
        for (i, &v) in bonafide.iter().enumerate() {
            s.insert_keyed(format!("b{i:06}"), v, Key::Bonafide)?;
        }
        for (i, &v) in spoof.iter().enumerate() {
            s.insert_keyed(format!("s{i:06}"), v, Key::Spoof)?;
        }
        Ok(s)
    }

    pub fn insert(&mut self, utt_id: impl Into<String>, score: f64) -> Result<()> {
        let utt_id = utt_id.into();
        if !score.is_finite() {
            return Err(Error::Metric(format!("score for {utt_id} is not finite")));
        }
        self.scores.insert(utt_id, score);
        Ok(())
    }

    pub fn insert_keyed(&mut self, utt_id: impl Into<String>, score: f64, key: Key) -> Result<()> {
        let utt_id = utt_id.into();
        self.insert(utt_id.clone(), score)?;
        self.keys.insert(utt_id, key);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, utt_id: &str) -> Option<f64> {
        self.scores.get(utt_id).copied()
    }

    pub fn key(&self, utt_id: &str) -> Option<Key> {
        self.keys.get(utt_id).copied()
    }

    /// Entries in utterance-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.scores.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Attaches keys from `protocol`; every scored utterance must be listed.
    pub fn with_keys(mut self, protocol: &Protocol) -> Result<Self> {
        let mut missing = Vec::new();
        for utt in self.scores.keys() {
            match protocol.key_of(utt) {
                Some(k) => {
                    self.keys.insert(utt.clone(), k);
                }
                None => missing.push(utt.clone()),
            }
        }
        if !missing.is_empty() {
            let shown: Vec<_> = missing.iter().take(5).cloned().collect();
            return Err(Error::Metric(format!(
                "{} scored utterance(s) absent from the protocol, e.g. {}",
                missing.len(),
                shown.join(", ")
            )));
        }
        Ok(self)
    }

    /// Splits into bona fide and spoof score lists. Every entry must carry
    /// a key.
    pub fn split(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mut bona, mut spoof) = (Vec::new(), Vec::new());
        for (utt, &s) in &self.scores {
            match self.keys.get(utt) {
                Some(Key::Bonafide) => bona.push(s),
                Some(Key::Spoof) => spoof.push(s),
                None => return Err(Error::Metric(format!("no key for utterance {utt}"))),
            }
        }
        Ok((bona, spoof))
    }

    /// One `utt_id score` line per entry, in id order.
    pub fn to_text(&self) -> String {
        self.scores.iter().map(|(u, s)| format!("{u} {s}\n")).collect()
    }
}

pub fn parse_scores_str(text: &str, path: &Path) -> Result<ScoreSet> {
    let err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut set = ScoreSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(err(i + 1, format!("expected `utt_id score`, found {} fields", fields.len())));
        }
        let score: f64 = fields[1]
            .parse()
            .map_err(|_| err(i + 1, format!("invalid score {:?}", fields[1])))?;
        if set.get(fields[0]).is_some() {
            return Err(err(i + 1, format!("utterance {} scored twice", fields[0])));
        }
        set.insert(fields[0], score).map_err(|e| err(i + 1, e.to_string()))?;
    }
    Ok(set)
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_scores_str(&text, path)
}

pub fn write_scores(path: &Path, set: &ScoreSet) -> Result<()> {
    fs::write(path, set.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Per-utterance arithmetic mean of two or more score sets over identical
/// utterance ids. Keys are carried over from the inputs.
pub fn fuse_scores(sets: &[ScoreSet]) -> Result<ScoreSet> {
    if sets.len() < 2 {
        return Err(Error::Contract(format!("fusion needs at least 2 score sets, got {}", sets.len())));
    }
    let mut missing: Vec<String> = Vec::new();
    for (i, a) in sets.iter().enumerate() {
        for (j, b) in sets.iter().enumerate() {
            if i == j {
                continue;
            }
            for utt in a.scores.keys() {
                if !b.scores.contains_key(utt) {
                    missing.push(format!("{utt} (set {j})"));
                }
            }
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::Fusion { missing });
    }
    let n = sets.len() as f64;
    let mut fused = ScoreSet::new();
    for utt in sets[0].scores.keys() {
        let sum: f64 = sets.iter().map(|s| s.scores[utt]).sum();
        fused.scores.insert(utt.clone(), sum / n);
        if let Some(k) = sets.iter().find_map(|s| s.keys.get(utt)) {
            fused.keys.insert(utt.clone(), *k);
        }
    }
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[(&str, f64)]) -> ScoreSet {
        let mut s = ScoreSet::new();
        for (u, v) in pairs {
            s.insert(*u, *v).unwrap();
        }
        s
    }

    #[test]
    fn fusion_examples() {
        let f = fuse_scores(&[set(&[("u", 0.2)]), set(&[("u", 0.4)])]).unwrap();
        assert!((f.get("u").unwrap() - 0.3).abs() < 1e-15);
        let s = set(&[("a", 0.123), ("b", -7.5)]);
        assert_eq!(fuse_scores(&[s.clone(), s.clone()]).unwrap(), s);
        match fuse_scores(&[set(&[("a", 1.0)]), set(&[("b", 1.0)])]) {
            Err(Error::Fusion { missing }) => assert_eq!(missing, vec!["a (set 1)", "b (set 0)"]),
            other => panic!("{other:?}"),
        }
        assert!(fuse_scores(&[s]).is_err());
    }

    #[test]
    fn score_file_round_trip() {
        let s = set(&[("x", 0.1), ("y", -2.25)]);
        let p = Path::new("s.txt");
        assert_eq!(parse_scores_str(&s.to_text(), p).unwrap(), s);
        assert!(matches!(parse_scores_str("x 1\ny\n", p), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_scores_str("x nan\n", p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn keys_must_cover_scores() {
        let s = set(&[("x", 0.1)]);
        assert!(matches!(s.split(), Err(Error::Metric(_))));
        let proto = super::super::protocol::parse_protocol_str("S x - - spoof\n", Path::new("p")).unwrap();
        let (b, sp) = s.clone().with_keys(&proto).unwrap().split().unwrap();
        assert_eq!((b.len(), sp), (0, vec![0.1]));
        let s2 = set(&[("z", 0.1)]);
        assert!(s2.with_keys(&proto).is_err());
    }
}
