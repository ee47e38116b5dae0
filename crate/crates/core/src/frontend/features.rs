use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const FEATURE_EXT: &str = "lfcc";
const MAGIC: &[u8; 4] = b"LFCC";

/// Row-major `rows x frames` feature map for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    utt_id: String,
    rows: usize,
    frames: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(utt_id: String, rows: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || frames == 0 {
            return Err(Error::Shape(format!("feature map must be nonempty, got {rows}x{frames}")));
        }
        if values.len() != rows * frames {
            return Err(Error::Shape(format!(
                "{rows}x{frames} feature map needs {} values, got {}",
                rows * frames,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite feature at row {}, frame {}",
                i / frames,
                i % frames
            )));
        }
        Ok(Self {
            utt_id,
            rows,
            frames,
            values,
        })
    }

    pub fn with_utt_id(mut self, utt_id: impl Into<String>) -> Self {
        self.utt_id = utt_id.into();
        self
    }

    pub fn utt_id(&self) -> &str {
        &self.utt_id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.frames..(r + 1) * self.frames]
    }

    pub fn get(&self, r: usize, t: usize) -> f64 {
        self.values[r * self.frames + t]
    }
}

/// `<dir>/<utt_id>.lfcc`
pub fn feature_path(dir: &Path, utt_id: &str) -> PathBuf {
    dir.join(format!("{utt_id}.{FEATURE_EXT}"))
}

/// Writes the map as `"LFCC"`, u32 rows, u32 cols, then f32 values, all
/// little-endian.
pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * m.values.len());
    buf.extend_from_slice(MAGIC);
    for dim in [m.rows, m.frames] {
        let d = u32::try_from(dim).map_err(|_| Error::Shape(format!("dimension {dim} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in &m.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a feature file; the utterance id is the file stem.
pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing LFCC header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (word(4), word(8));
    let expect = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| bad(format!("header dimensions {rows}x{cols} overflow")))?;
    if bytes.len() != expect {
        return Err(bad(format!(
            "{rows}x{cols} map needs {expect} bytes, file has {}",
            bytes.len()
        )));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let utt = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureMatrix::new(utt, rows, cols, values).map_err(|e| bad(e.to_string()))
}
