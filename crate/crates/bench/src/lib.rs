//! Deterministic inputs shared by the benchmarks.

use spoofnet::evaluation::ScoreSet;
use spoofnet::frontend::Waveform;

/// Cheap reproducible values in [-1, 1) without an RNG dependency.
pub fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

/// `seconds` of a 16 kHz chirp with a little noise.
pub fn chirp(seconds: f64) -> Waveform {
    let sr = 16_000u32;
    let n = (seconds * f64::from(sr)) as usize;
    let noise = pseudo_random(n, 3);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / f64::from(sr);
            0.4 * (2.0 * std::f64::consts::PI * (200.0 + 1500.0 * t) * t).sin() + 0.01 * noise[i]
        })
        .collect();
    Waveform::new(samples, sr).expect("non-empty waveform")
}

/// Two overlapping score clouds of `n` trials each.
pub fn score_set(n: usize) -> ScoreSet {
    let bona: Vec<f64> = pseudo_random(n, 5).iter().map(|v| v + 0.5).collect();
    let spoof = pseudo_random(n, 6);
    ScoreSet::from_labeled(&bona, &spoof).expect("non-empty classes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_reproducible_and_bounded() {
        let a = pseudo_random(1000, 1);
        assert_eq!(a, pseudo_random(1000, 1));
        assert!(a.iter().all(|v| (-1.0..1.0).contains(v)));
        assert_eq!(chirp(0.5).samples().len(), 8000);
        assert_eq!(score_set(10).len(), 20);
    }
}
