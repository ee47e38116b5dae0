//! Audio to LFCC feature maps: WAV decoding, static cepstra, regression
//! deltas and the on-disk feature format.

mod features;
mod lfcc;
mod wav;

pub use features::{feature_path, read_features, write_features, FeatureMatrix, FEATURE_EXT};
pub use lfcc::{dct2_orthonormal, deltas, frame_count, lfcc, linear_filterbank, LfccConfig, LfccExtractor};
pub use wav::{read_wav, write_wav, Waveform};

use std::path::Path;

use crate::error::Result;

/// Reads a WAV file and returns its full `3 * n_ceps` row feature map, named
/// after the file stem.
pub fn extract_file(path: &Path, cfg: &LfccConfig) -> Result<FeatureMatrix> {
    let wav = read_wav(path)?;
    let stat = lfcc(&wav, cfg)?;
    let utt = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(deltas(&stat, cfg.delta_width)?.with_utt_id(utt))
}
