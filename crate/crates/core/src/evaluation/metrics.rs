use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::scores::ScoreSet;
use crate::error::{Error, Result};

/// Error rates when accepting every trial scoring at least `threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    /// Spoof trials accepted.
    pub far: f64,
    /// Bona fide trials rejected.
    pub frr: f64,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn check_classes(bona: &[f64], spoof: &[f64]) -> Result<()> {
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::Metric(format!(
            "need both classes, got {} bona fide and {} spoof scores",
            bona.len(),
            spoof.len()
        )));
    }
    if bona.iter().chain(spoof).any(|s| !s.is_finite()) {
        return Err(Error::Metric("scores must be finite".into()));
    }
    Ok(())
}

/// One operating point per distinct observed score, thresholds ascending.
/// With `reject_all`, a final point above the largest score (FAR 0, FRR 1)
/// is appended.
pub fn operating_points(bona: &[f64], spoof: &[f64], reject_all: bool) -> Result<Vec<OperatingPoint>> {
    check_classes(bona, spoof)?;
    let (b, s) = (sorted(bona), sorted(spoof));
    let mut thresholds: Vec<f64> = b.iter().chain(&s).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    if reject_all {
        thresholds.push(thresholds[thresholds.len() - 1].next_up());
    }
    let (nb, ns) = (b.len() as f64, s.len() as f64);
    let (mut ib, mut is) = (0, 0);
    Ok(thresholds
        .into_iter()
        .map(|t| {
            while ib < b.len() && b[ib] < t {
                ib += 1;
            }
            while is < s.len() && s[is] < t {
                is += 1;
            }
            OperatingPoint {
                threshold: t,
                far: (s.len() - is) as f64 / ns,
                frr: ib as f64 / nb,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate on raw class score lists.
///
/// Walks the operating points upwards in threshold until FAR - FRR first
/// drops to zero or below. An exact tie is returned as is (the lowest such
/// threshold); otherwise rates and threshold are interpolated linearly
/// between that point and its predecessor.
pub fn eer_from_scores(bona: &[f64], spoof: &[f64]) -> Result<Eer> {
    let pts = operating_points(bona, spoof, true)?;
    // The first point accepts everything (FAR 1, FRR 0), so a predecessor
    // always exists for the crossing.
    let i = pts
        .iter()
        .position(|p| p.far - p.frr <= 0.0)
        .expect("reject-all point has FAR - FRR = -1");
    let cur = pts[i];
    let d_cur = cur.far - cur.frr;
    if d_cur == 0.0 {
        return Ok(Eer {
            eer: cur.far,
            threshold: cur.threshold,
        });
    }
    let prev = pts[i - 1];
    let d_prev = prev.far - prev.frr;
    let t = d_prev / (d_prev - d_cur);
    Ok(Eer {
        eer: prev.frr + t * (cur.frr - prev.frr),
        threshold: prev.threshold + t * (cur.threshold - prev.threshold),
    })
}

pub fn compute_eer(set: &ScoreSet) -> Result<Eer> {
    let (b, s) = set.split()?;
    eer_from_scores(&b, &s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdcfVersion {
    /// ASVspoof 2019 form, normalized by `min(C1, C2)`.
    Asvspoof2019,
    /// Revised form with the ASV-only cost term `C0`, normalized by
    /// `C0 + min(C1, C2)`. Uses `c_fa_cm` as the cost of accepting a spoof.
    Revised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdcfParams {
    pub version: TdcfVersion,
    pub pi_tar: f64,
    pub pi_non: f64,
    pub pi_spoof: f64,
    pub c_miss_asv: f64,
    pub c_fa_asv: f64,
    pub c_miss_cm: f64,
    pub c_fa_cm: f64,
    pub p_miss_asv: f64,
    pub p_fa_asv: f64,
    pub p_miss_spoof_asv: f64,
}

impl Default for TdcfParams {
    /// Challenge evaluation-plan priors and costs. The ASV rates are zero
    /// placeholders for an error-free ASV; supply real ones (or an ASV
    /// score file) when they are known.
    fn default() -> Self {
        Self {
            version: TdcfVersion::Asvspoof2019,
            pi_tar: 0.9405,
            pi_non: 0.0095,
            pi_spoof: 0.05,
            c_miss_asv: 1.0,
            c_fa_asv: 10.0,
            c_miss_cm: 1.0,
            c_fa_cm: 10.0,
            p_miss_asv: 0.0,
            p_fa_asv: 0.0,
            p_miss_spoof_asv: 0.0,
        }
    }
}

impl TdcfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pi_tar", self.pi_tar), ("pi_non", self.pi_non), ("pi_spoof", self.pi_spoof)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("tdcf.{name}"), "prior must be positive"));
            }
        }
        if (self.pi_tar + self.pi_non + self.pi_spoof - 1.0).abs() > 1e-9 {
            return Err(Error::config("tdcf.pi_tar", "priors must sum to 1"));
        }
        for (name, v) in [
            ("c_miss_asv", self.c_miss_asv),
            ("c_fa_asv", self.c_fa_asv),
            ("c_miss_cm", self.c_miss_cm),
            ("c_fa_cm", self.c_fa_cm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("tdcf.{name}"), "cost must be positive"));
            }
        }
        for (name, v) in [
            ("p_miss_asv", self.p_miss_asv),
            ("p_fa_asv", self.p_fa_asv),
            ("p_miss_spoof_asv", self.p_miss_spoof_asv),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("tdcf.{name}"), "rate must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// `(C0, C1, C2)` with `t-DCF(s) = C0 + C1 Pmiss_cm(s) + C2 Pfa_cm(s)`;
    /// `C0` is zero for the 2019 form.
    pub fn constants(&self) -> Result<(f64, f64, f64)> {
        self.validate()?;
        let (c0, c1, c2) = match self.version {
            TdcfVersion::Asvspoof2019 => (
                0.0,
                self.pi_tar * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv)
                    - self.pi_non * self.c_fa_asv * self.p_fa_asv,
                self.c_fa_cm * self.pi_spoof * (1.0 - self.p_miss_spoof_asv),
            ),
            TdcfVersion::Revised => {
                let c0 = self.pi_tar * self.c_miss_asv * self.p_miss_asv + self.pi_non * self.c_fa_asv * self.p_fa_asv;
                (
                    c0,
                    self.pi_tar * self.c_miss_asv - c0,
                    self.pi_spoof * self.c_fa_cm * (1.0 - self.p_miss_spoof_asv),
                )
            }
        };
        if !(c1 > 0.0) || !(c2 > 0.0) {
            return Err(Error::config(
                "tdcf",
                format!("degenerate parameters give C1 = {c1}, C2 = {c2}; both must be positive"),
            ));
        }
        Ok((c0, c1, c2))
    }

    /// Replaces the ASV rates with those measured on an ASV score list at
    /// its own EER threshold.
    pub fn with_asv_scores(mut self, asv: &AsvScores) -> Result<Self> {
        let (miss, fa, miss_spoof) = asv.rates()?;
        self.p_miss_asv = miss;
        self.p_fa_asv = fa;
        self.p_miss_spoof_asv = miss_spoof;
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinTdcf {
    pub min_tdcf: f64,
    pub threshold: f64,
}

/// Normalized t-DCF at every operating point (including reject-all).
pub fn tdcf_curve(bona: &[f64], spoof: &[f64], p: &TdcfParams) -> Result<Vec<(f64, f64)>> {
    let (c0, c1, c2) = p.constants()?;
    let norm = c0 + c1.min(c2);
    Ok(operating_points(bona, spoof, true)?
        .into_iter()
        .map(|op| (op.threshold, (c0 + c1 * op.frr + c2 * op.far) / norm))
        .collect())
}

/// Minimum normalized t-DCF over CM thresholds; ties go to the lowest
/// threshold.
pub fn min_tdcf_from_scores(bona: &[f64], spoof: &[f64], p: &TdcfParams) -> Result<MinTdcf> {
    let curve = tdcf_curve(bona, spoof, p)?;
    let (threshold, min_tdcf) = curve
        .into_iter()
        .fold((f64::NAN, f64::INFINITY), |best, (t, v)| if v < best.1 { (t, v) } else { best });
    Ok(MinTdcf { min_tdcf, threshold })
}

pub fn compute_min_tdcf(set: &ScoreSet, p: &TdcfParams) -> Result<MinTdcf> {
    let (b, s) = set.split()?;
    min_tdcf_from_scores(&b, &s, p)
}

/// ASV scores grouped by trial type.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AsvScores {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
    pub spoof: Vec<f64>,
}

impl AsvScores {
    /// `(P_miss_asv, P_fa_asv, P_miss_spoof_asv)` at the target/nontarget
    /// EER threshold.
    pub fn rates(&self) -> Result<(f64, f64, f64)> {
        if self.spoof.is_empty() {
            return Err(Error::Metric("ASV scores contain no spoof trials".into()));
        }
        let thr = eer_from_scores(&self.target, &self.nontarget)?.threshold;
        let frac = |v: &[f64], f: &dyn Fn(f64) -> bool| v.iter().filter(|&&x| f(x)).count() as f64 / v.len() as f64;
        Ok((
            frac(&self.target, &|x| x < thr),
            frac(&self.nontarget, &|x| x >= thr),
            frac(&self.spoof, &|x| x < thr),
        ))
    }
}

/// Parses an organizer ASV score file: `SOURCE KEY SCORE` per line with
/// `KEY` one of `target`, `nontarget`, `spoof`. Lines with a leading
/// speaker column (4 fields) are accepted too.
pub fn parse_asv_scores_str(text: &str, path: &Path) -> Result<AsvScores> {
    let mut out = AsvScores::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 && f.len() != 4 {
            return Err(err(format!("expected 3 or 4 fields, found {}", f.len())));
        }
        let (key, score) = (f[f.len() - 2], f[f.len() - 1]);
        let score: f64 = score
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| err(format!("invalid score {score:?}")))?;
        match key {
            "target" => out.target.push(score),
            "nontarget" => out.nontarget.push(score),
            "spoof" => out.spoof.push(score),
            other => return Err(err(format!("unknown ASV trial key {other:?}"))),
        }
    }
    Ok(out)
}

pub fn read_asv_scores(path: &Path) -> Result<AsvScores> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_asv_scores_str(&text, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub probit_far: f64,
    pub probit_frr: f64,
}

const PROBIT_CLAMP: f64 = 1e-6;

/// Inverse standard normal CDF, with `p` clamped to `[1e-6, 1 - 1e-6]` so
/// zero and one rates stay plottable.
pub fn probit(p: f64) -> f64 {
    let n = Normal::standard();
    n.inverse_cdf(p.clamp(PROBIT_CLAMP, 1.0 - PROBIT_CLAMP))
}

/// DET curve: one point per distinct observed score.
pub fn det_points(set: &ScoreSet) -> Result<Vec<DetPoint>> {
    let (b, s) = set.split()?;
    det_from_scores(&b, &s)
}

pub fn det_from_scores(bona: &[f64], spoof: &[f64]) -> Result<Vec<DetPoint>> {
    Ok(operating_points(bona, spoof, false)?
        .into_iter()
        .map(|p| DetPoint {
            threshold: p.threshold,
            far: p.far,
            frr: p.frr,
            probit_far: probit(p.far),
            probit_frr: probit(p.frr),
        })
        .collect())
}

pub fn det_csv(points: &[DetPoint]) -> String {
    let mut out = String::from("threshold,far,frr,probit_far,probit_frr\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{},{}", p.threshold, p.far, p.frr, p.probit_far, p.probit_frr);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_tdcf: f64,
    pub tdcf_threshold: f64,
    pub n_bonafide: usize,
    pub n_spoof: usize,
}

pub fn evaluate(set: &ScoreSet, p: &TdcfParams) -> Result<MetricReport> {
    let (b, s) = set.split()?;
    let eer = eer_from_scores(&b, &s)?;
    let t = min_tdcf_from_scores(&b, &s, p)?;
    Ok(MetricReport {
        eer: eer.eer,
        eer_threshold: eer.threshold,
        min_tdcf: t.min_tdcf,
        tdcf_threshold: t.threshold,
        n_bonafide: b.len(),
        n_spoof: s.len(),
    })
}
