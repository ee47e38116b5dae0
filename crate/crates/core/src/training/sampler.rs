use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::evaluation::{Key, TrialRecord};
use crate::frontend::FeatureMatrix;
use crate::SeedRng;

/// One epoch of class-balanced batches as indices into `records`.
///
/// Every batch holds `batch_size / 2` bona fide and `batch_size / 2` spoof
/// trials. The epoch covers the larger class once (topped up from a fresh
/// permutation to fill the last batch); the smaller class is drawn from
/// back-to-back permutations, so it repeats. Order within each batch is
/// shuffled.
pub fn balanced_batches(records: &[TrialRecord], batch_size: usize, rng: &mut SeedRng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::config("train.batch_size", "must be even and at least 2"));
    }
    let half = batch_size / 2;
    let bona: Vec<usize> = (0..records.len()).filter(|&i| records[i].key == Key::Bonafide).collect();
    let spoof: Vec<usize> = (0..records.len()).filter(|&i| records[i].key == Key::Spoof).collect();
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::Dataset(format!(
            "balanced batches need both classes, got {} bona fide and {} spoof",
            bona.len(),
            spoof.len()
        )));
    }
    let n_batches = bona.len().max(spoof.len()).div_ceil(half);
    let needed = n_batches * half;
    let draw = |pool: &[usize], rng: &mut SeedRng| {
        let mut out = Vec::with_capacity(needed);
        while out.len() < needed {
            let mut p = pool.to_vec();
            p.shuffle(rng);
            let take = (needed - out.len()).min(p.len());
            out.extend_from_slice(&p[..take]);
        }
        out
    };
    let b = draw(&bona, rng);
    let s = draw(&spoof, rng);
    Ok((0..n_batches)
        .map(|i| {
            let mut batch: Vec<usize> = b[i * half..(i + 1) * half]
                .iter()
                .chain(&s[i * half..(i + 1) * half])
                .copied()
                .collect();
            batch.shuffle(rng);
            batch
        })
        .collect())
}

/// Random contiguous window of `frames` columns. Shorter maps are tiled
/// (wrapped) up to length first.
pub fn crop_or_wrap(m: &FeatureMatrix, frames: usize, rng: &mut SeedRng) -> Result<FeatureMatrix> {
    let l = m.frames();
    let start = if l > frames { rng.random_range(0..=l - frames) } else { 0 };
    let mut values = Vec::with_capacity(m.rows() * frames);
    for r in 0..m.rows() {
        let row = m.row(r);
        values.extend((0..frames).map(|t| row[(start + t) % l]));
    }
    FeatureMatrix::new(m.utt_id().to_string(), m.rows(), frames, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::Partition;
    use crate::seed_rng;

    fn recs(nb: usize, ns: usize) -> Vec<TrialRecord> {
        (0..nb + ns)
            .map(|i| TrialRecord {
                speaker_id: "S".into(),
                utt_id: format!("u{i}"),
                attack_id: "-".into(),
                key: if i < nb { Key::Bonafide } else { Key::Spoof },
                partition: Partition::Train,
            })
            .collect()
    }

    #[test]
    fn imbalanced_classes_oversample_minority() {
        let r = recs(4, 100);
        let batches = balanced_batches(&r, 8, &mut seed_rng(1)).unwrap();
        assert_eq!(batches.len(), 25);
        let mut spoof_seen = vec![0; 104];
        for b in &batches {
            assert_eq!(b.len(), 8);
            assert_eq!(b.iter().filter(|&&i| r[i].key == Key::Bonafide).count(), 4);
            for &i in b {
                spoof_seen[i] += 1;
            }
        }
        assert!(spoof_seen[4..].iter().all(|&c| c == 1));
        assert!(spoof_seen[..4].iter().all(|&c| c == 25));
    }

    #[test]
    fn equal_classes_cover_each_sample_once() {
        let r = recs(32, 32);
        let batches = balanced_batches(&r, 16, &mut seed_rng(2)).unwrap();
        let mut seen: Vec<usize> = batches.concat();
        seen.sort();
        assert_eq!(seen, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_batches() {
        let r = recs(10, 37);
        let a = balanced_batches(&r, 6, &mut seed_rng(5)).unwrap();
        let b = balanced_batches(&r, 6, &mut seed_rng(5)).unwrap();
        assert_eq!(a, b);
        assert!(balanced_batches(&recs(3, 0), 4, &mut seed_rng(5)).is_err());
        assert!(balanced_batches(&r, 5, &mut seed_rng(5)).is_err());
    }

    #[test]
    fn crop_and_wrap() {
        let m = FeatureMatrix::new("u".into(), 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = crop_or_wrap(&m, 7, &mut seed_rng(0)).unwrap();
        assert_eq!(w.row(0), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0]);
        let c = crop_or_wrap(&m, 2, &mut seed_rng(0)).unwrap();
        assert_eq!(c.frames(), 2);
        assert_eq!(c.get(1, 0) - c.get(0, 0), 3.0);
        assert_eq!(c.get(0, 1) - c.get(0, 0), 1.0);
    }
}
