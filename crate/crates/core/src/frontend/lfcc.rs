use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::features::FeatureMatrix;
use super::wav::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LfccConfig {
    pub window_ms: f64,
    pub shift_ms: f64,
    pub n_filters: usize,
    pub n_ceps: usize,
    pub fft_size: usize,
    pub delta_width: usize,
    /// Floor applied to filterbank energies before the log.
    pub log_floor: f64,
}

impl Default for LfccConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            shift_ms: 10.0,
            n_filters: 70,
            n_ceps: 20,
            fft_size: 512,
            delta_width: 2,
            log_floor: 1e-10,
        }
    }
}

impl LfccConfig {
    /// Rows of the full feature map (static, delta, double-delta).
    pub fn feature_dim(&self) -> usize {
        3 * self.n_ceps
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shift_ms > 0.0) {
            return Err(Error::config("lfcc.shift_ms", "must be positive"));
        }
        if !(self.window_ms > self.shift_ms) {
            return Err(Error::config("lfcc.window_ms", "must exceed shift_ms"));
        }
        if self.n_filters == 0 {
            return Err(Error::config("lfcc.n_filters", "must be positive"));
        }
        if self.n_ceps == 0 || self.n_ceps > self.n_filters {
            return Err(Error::config("lfcc.n_ceps", "must be in 1..=n_filters"));
        }
        if !self.fft_size.is_power_of_two() {
            return Err(Error::config("lfcc.fft_size", "must be a power of two"));
        }
        if self.delta_width == 0 {
            return Err(Error::config("lfcc.delta_width", "must be positive"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("lfcc.log_floor", "must be positive"));
        }
        Ok(())
    }

    /// Window and hop lengths in samples at `sample_rate`.
    pub fn frame_geometry(&self, sample_rate: u32) -> Result<(usize, usize)> {
        self.validate()?;
        let sr = f64::from(sample_rate);
        let win = (sr * self.window_ms / 1000.0).round() as usize;
        let hop = (sr * self.shift_ms / 1000.0).round() as usize;
        if hop == 0 {
            return Err(Error::config("lfcc.shift_ms", "hop rounds to zero samples"));
        }
        if win > self.fft_size {
            return Err(Error::config(
                "lfcc.fft_size",
                format!("{} is shorter than the {win}-sample window", self.fft_size),
            ));
        }
        Ok((win, hop))
    }
}

/// `floor((n - win) / hop) + 1`, or `None` when the signal is shorter than
/// one window.
pub fn frame_count(n: usize, win: usize, hop: usize) -> Option<usize> {
    n.checked_sub(win).map(|d| d / hop + 1)
}

/// Triangular filters with edges evenly spaced in Hz from 0 to Nyquist,
/// evaluated on the `fft_size / 2 + 1` non-negative frequency bins.
pub fn linear_filterbank(n_filters: usize, fft_size: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let nyquist = f64::from(sample_rate) / 2.0;
    let bins = fft_size / 2 + 1;
    let spacing = nyquist / (n_filters + 1) as f64;
    let bin_hz = f64::from(sample_rate) / fft_size as f64;
    (0..n_filters)
        .map(|m| {
            let (lo, mid, hi) = (m as f64 * spacing, (m + 1) as f64 * spacing, (m + 2) as f64 * spacing);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f < lo || f > hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal type-II DCT of `input`, keeping the first `keep` outputs.
pub fn dct2_orthonormal(input: &[f64], keep: usize) -> Vec<f64> {
    let m = input.len() as f64;
    (0..keep)
        .map(|k| {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            scale
                * input
                    .iter()
                    .enumerate()
                    .map(|(n, x)| x * (PI * k as f64 * (2 * n + 1) as f64 / (2.0 * m)).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Precomputed window, filterbank, DCT basis and FFT plan for one sample
/// rate. Reuse it across utterances.
pub struct LfccExtractor {
    cfg: LfccConfig,
    sample_rate: u32,
    win: usize,
    hop: usize,
    window: Vec<f64>,
    filters: Vec<(usize, Vec<f64>)>,
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl LfccExtractor {
    pub fn new(cfg: &LfccConfig, sample_rate: u32) -> Result<Self> {
        let (win, hop) = cfg.frame_geometry(sample_rate)?;
        let window = (0..win)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (win as f64 - 1.0).max(1.0)).cos())
            .collect();
        // Store each filter as (first nonzero bin, weights) to skip zeros.
        let filters = linear_filterbank(cfg.n_filters, cfg.fft_size, sample_rate)
            .into_iter()
            .map(|f| {
                let start = f.iter().position(|&w| w > 0.0).unwrap_or(0);
                let end = f.iter().rposition(|&w| w > 0.0).map_or(start, |e| e + 1);
                (start, f[start..end].to_vec())
            })
            .collect();
        let m = cfg.n_filters as f64;
        let dct = (0..cfg.n_ceps)
            .map(|k| {
                let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
                (0..cfg.n_filters)
                    .map(|n| scale * (PI * k as f64 * (2 * n + 1) as f64 / (2.0 * m)).cos())
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            win,
            hop,
            window,
            filters,
            dct,
            fft,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Static coefficients, `n_ceps` rows by one column per frame.
    pub fn static_coefficients(&self, w: &Waveform) -> Result<FeatureMatrix> {
        if w.sample_rate() != self.sample_rate {
            return Err(Error::Contract(format!(
                "extractor built for {} Hz, waveform is {} Hz",
                self.sample_rate,
                w.sample_rate()
            )));
        }
        let frames = frame_count(w.len(), self.win, self.hop).ok_or_else(|| {
            Error::EmptyInput(format!(
                "{} samples is shorter than one {}-sample window",
                w.len(),
                self.win
            ))
        })?;
        let n_ceps = self.cfg.n_ceps;
        let mut out = vec![0.0; n_ceps * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let bins = self.cfg.fft_size / 2 + 1;
        let mut power = vec![0.0; bins];
        let mut log_energy = vec![0.0; self.cfg.n_filters];
        for t in 0..frames {
            let frame = &w.samples()[t * self.hop..t * self.hop + self.win];
            for (i, c) in buf.iter_mut().enumerate() {
                let v = if i < self.win { frame[i] * self.window[i] } else { 0.0 };
                *c = Complex::new(v, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf[..bins]) {
                *p = c.norm_sqr();
            }
            for (e, (start, weights)) in log_energy.iter_mut().zip(&self.filters) {
                let energy: f64 = weights.iter().zip(&power[*start..]).map(|(w, p)| w * p).sum();
                *e = energy.max(self.cfg.log_floor).ln();
            }
            for (k, basis) in self.dct.iter().enumerate() {
                out[k * frames + t] = basis.iter().zip(&log_energy).map(|(b, e)| b * e).sum();
            }
        }
        FeatureMatrix::new(String::new(), n_ceps, frames, out)
    }
}

/// Static LFCCs of `w`: Hamming-windowed power spectrum, linear triangular
/// filterbank, floored log, orthonormal DCT-II.
pub fn lfcc(w: &Waveform, cfg: &LfccConfig) -> Result<FeatureMatrix> {
    LfccExtractor::new(cfg, w.sample_rate())?.static_coefficients(w)
}

/// Regression deltas along time with edge replication.
fn delta_rows(values: &[f64], rows: usize, cols: usize, width: usize) -> Vec<f64> {
    let denom = 2.0 * (1..=width).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &values[r * cols..(r + 1) * cols];
        let at = |t: isize| row[t.clamp(0, cols as isize - 1) as usize];
        for t in 0..cols {
            let ti = t as isize;
            let num: f64 = (1..=width)
                .map(|n| n as f64 * (at(ti + n as isize) - at(ti - n as isize)))
                .sum();
            out[r * cols + t] = num / denom;
        }
    }
    out
}

/// Stacks `[static; delta; double-delta]` into a map with three times the
/// rows of `stat`.
pub fn deltas(stat: &FeatureMatrix, width: usize) -> Result<FeatureMatrix> {
    if width == 0 {
        return Err(Error::Contract("delta width must be positive".into()));
    }
    let (rows, cols) = (stat.rows(), stat.frames());
    let d1 = delta_rows(stat.values(), rows, cols, width);
    let d2 = delta_rows(&d1, rows, cols, width);
    let mut values = Vec::with_capacity(3 * rows * cols);
    values.extend_from_slice(stat.values());
    values.extend(d1);
    values.extend(d2);
    FeatureMatrix::new(stat.utt_id().to_string(), 3 * rows, cols, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(n: usize, freq: f64, amp: f64) -> Waveform {
        let s = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin())
            .collect();
        Waveform::new(s, 16000).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = lfcc(&tone(16000, 440.0, 0.3), &LfccConfig::default()).unwrap();
        assert_eq!((f.rows(), f.frames()), (20, 98));
        assert_eq!(frame_count(16000, 400, 160), Some(98));
    }

    #[test]
    fn short_audio_is_empty_input() {
        let r = lfcc(&tone(399, 440.0, 0.3), &LfccConfig::default());
        assert!(matches!(r, Err(Error::EmptyInput(_))));
        assert_eq!(lfcc(&tone(400, 440.0, 0.3), &LfccConfig::default()).unwrap().frames(), 1);
    }

    #[test]
    fn silence_gives_identical_finite_frames() {
        let w = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        let f = lfcc(&w, &LfccConfig::default()).unwrap();
        let expect0 = 1e-10f64.ln() * 70f64.sqrt();
        for t in 0..f.frames() {
            assert!((f.get(0, t) - expect0).abs() < 1e-9);
            for r in 1..20 {
                assert!(f.get(r, t).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dct_of_constant_is_dc_only() {
        let c = dct2_orthonormal(&[-3.5; 70], 20);
        assert!((c[0] - (-3.5 * 70f64.sqrt())).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn filterbank_covers_band() {
        let fb = linear_filterbank(70, 512, 16000);
        assert_eq!(fb.len(), 70);
        assert!(fb.iter().all(|f| f.len() == 257));
        // Every filter reaches close to unit peak and overlapping triangles
        // sum to one between the first and last centre.
        assert!(fb.iter().all(|f| f.iter().cloned().fold(0.0, f64::max) > 0.85));
        for k in 10..240 {
            let s: f64 = fb.iter().map(|f| f[k]).sum();
            assert!((s - 1.0).abs() < 1e-9, "bin {k}: {s}");
        }
    }

    #[test]
    fn delta_examples() {
        let ramp = FeatureMatrix::new("r".into(), 1, 8, (0..8).map(|t| t as f64).collect()).unwrap();
        let d = deltas(&ramp, 2).unwrap();
        assert_eq!(d.rows(), 3);
        for t in 2..6 {
            assert!((d.get(1, t) - 1.0).abs() < 1e-12);
        }
        let flat = FeatureMatrix::new("c".into(), 2, 5, vec![4.0; 10]).unwrap();
        let d = deltas(&flat, 2).unwrap();
        assert!(d.values()[10..].iter().all(|&v| v == 0.0));
        let one = FeatureMatrix::new("o".into(), 2, 1, vec![1.0, 2.0]).unwrap();
        let d = deltas(&one, 2).unwrap();
        assert_eq!(d.values(), &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = LfccConfig::default();
        c.n_ceps = 80;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "lfcc.n_ceps"));
        let mut c = LfccConfig::default();
        c.fft_size = 256;
        assert!(c.frame_geometry(16000).is_err());
        let mut c = LfccConfig::default();
        c.window_ms = 10.0;
        assert!(c.validate().is_err());
    }
}
