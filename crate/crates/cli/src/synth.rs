//! Synthetic LFCC-like corpus for desk-scale experiments.
//!
//! Bona fide maps are smooth random spectral envelopes with a slow gain
//! contour and white noise. Spoof maps come from the same process plus an
//! additive artifact confined to a fixed band of rows and rippling
//! periodically in time.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use spoofnet::evaluation::{Key, Partition, Protocol, TrialRecord};
use spoofnet::frontend::{feature_path, write_features, FeatureMatrix};
use spoofnet::{seed_rng, Error, Result, SeedRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub rows: usize,
    pub frames: usize,
    /// Peak amplitude of the spoofing artifact.
    pub amplitude: f64,
    /// First and one-past-last artifact rows.
    pub band: (usize, usize),
    /// Artifact ripple period in frames.
    pub ripple_period: f64,
    pub noise_std: f64,
    /// Fractions of each class assigned to train and dev; the rest is eval.
    pub train_fraction: f64,
    pub dev_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 256,
            rows: 60,
            frames: 400,
            amplitude: 0.5,
            band: (24, 30),
            ripple_period: 6.0,
            noise_std: 0.5,
            train_fraction: 0.5,
            dev_fraction: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class < 8 {
            return Err(Error::config("synth.n_per_class", "must be at least 8"));
        }
        if self.rows == 0 || self.frames == 0 {
            return Err(Error::config("synth.rows", "map dimensions must be positive"));
        }
        if self.band.0 >= self.band.1 || self.band.1 > self.rows {
            return Err(Error::config("synth.band", "must be a nonempty row range inside the map"));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::config("synth.amplitude", "must be a nonnegative number"));
        }
        if !(self.ripple_period > 0.0) {
            return Err(Error::config("synth.ripple_period", "must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("synth.noise_std", "must be nonnegative"));
        }
        let (t, d) = (self.train_fraction, self.dev_fraction);
        if !(t > 0.0 && d >= 0.0 && t + d <= 1.0) {
            return Err(Error::config("synth.train_fraction", "split fractions must be in range and sum to at most 1"));
        }
        Ok(())
    }
}

/// Paths of a generated corpus.
pub struct SynthOutput {
    pub protocol: PathBuf,
    pub features: PathBuf,
}

pub const PROTOCOL_FILE: &str = "protocol.txt";
pub const FEATURE_DIR: &str = "features";

fn base_map(cfg: &SynthConfig, rng: &mut SeedRng) -> Vec<f64> {
    let (rows, frames) = (cfg.rows, cfg.frames);
    // Spectral envelope: a few low-order cosines over the row axis.
    let mut envelope = vec![0.0; rows];
    for j in 1..=4 {
        let a: f64 = Normal::new(0.0, 1.0 / j as f64).unwrap().sample(rng);
        let phase = rng.random_range(0.0..2.0 * PI);
        for (r, e) in envelope.iter_mut().enumerate() {
            *e += a * (PI * j as f64 * r as f64 / rows as f64 + phase).cos();
        }
    }
    // Slow gain contour over time.
    let period = rng.random_range(80.0..240.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let depth = rng.random_range(0.1..0.5);
    let mut out = Vec::with_capacity(rows * frames);
    for e in &envelope {
        for t in 0..frames {
            let gain = depth * (2.0 * PI * t as f64 / period + phase).sin();
            let noise: f64 = StandardNormal.sample(rng);
            out.push(e + gain + cfg.noise_std * noise);
        }
    }
    out
}

fn add_artifact(cfg: &SynthConfig, map: &mut [f64], rng: &mut SeedRng) {
    let phase = rng.random_range(0.0..2.0 * PI);
    for r in cfg.band.0..cfg.band.1 {
        for t in 0..cfg.frames {
            map[r * cfg.frames + t] += cfg.amplitude * (2.0 * PI * t as f64 / cfg.ripple_period + phase).sin();
        }
    }
}

/// Generates the corpus in memory: protocol records and their maps.
pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<(Protocol, Vec<FeatureMatrix>)> {
    cfg.validate()?;
    let mut rng = seed_rng(seed);
    let n = cfg.n_per_class;
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).min(n);
    let n_dev = ((n as f64 * cfg.dev_fraction).round() as usize).min(n - n_train);
    let mut records = Vec::with_capacity(2 * n);
    let mut maps = Vec::with_capacity(2 * n);
    let mut counter = [0usize; 3];
    for i in 0..n {
        let partition = if i < n_train {
            Partition::Train
        } else if i < n_train + n_dev {
            Partition::Dev
        } else {
            Partition::Eval
        };
        let tag = match partition {
            Partition::Train => "T",
            Partition::Dev => "D",
            Partition::Eval => "E",
        };
        for key in [Key::Bonafide, Key::Spoof] {
            let c = &mut counter[partition as usize];
            *c += 1;
            let utt_id = format!("SYN_{tag}_{:06}", *c);
            let mut values = base_map(cfg, &mut rng);
            if key == Key::Spoof {
                add_artifact(cfg, &mut values, &mut rng);
            }
            maps.push(FeatureMatrix::new(utt_id.clone(), cfg.rows, cfg.frames, values)?);
            records.push(TrialRecord {
                speaker_id: format!("SYN_{:04}", i % 20),
                utt_id,
                attack_id: if key == Key::Spoof { "A90".into() } else { "-".into() },
                key,
                partition,
            });
        }
    }
    Ok((Protocol::from_records(records)?, maps))
}

/// Writes `protocol.txt` and `features/<utt>.lfcc` under `out_dir`.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<SynthOutput> {
    let (protocol, maps) = synth_corpus(cfg, seed)?;
    let features = out_dir.join(FEATURE_DIR);
    fs::create_dir_all(&features).map_err(|e| Error::io(format!("creating {}", features.display()), e))?;
    for m in &maps {
        write_features(&feature_path(&features, m.utt_id()), m)?;
    }
    let protocol_path = out_dir.join(PROTOCOL_FILE);
    fs::write(&protocol_path, protocol.to_text()).map_err(|e| Error::io(format!("writing {}", protocol_path.display()), e))?;
    Ok(SynthOutput {
        protocol: protocol_path,
        features,
    })
}
