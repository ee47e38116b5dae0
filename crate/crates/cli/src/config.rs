//! Run configuration: one JSON document with a section per pipeline stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spoofnet::evaluation::TdcfParams;
use spoofnet::frontend::LfccConfig;
use spoofnet::model::ModelConfig;
use spoofnet::training::TrainConfig;
use spoofnet::{Error, Result};

use crate::synth::SynthConfig;

/// Optional default locations; command-line paths take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub protocol: Option<PathBuf>,
    pub audio_dir: Option<PathBuf>,
    pub feature_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub lfcc: LfccConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tdcf: TdcfParams,
    pub synth: SynthConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Parses a JSON document; type errors and unknown keys report the
    /// offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(field, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    /// Validates every section, and that every input path named in `paths`
    /// exists. The output directory is created on demand and not checked.
    pub fn validate(&self) -> Result<()> {
        self.lfcc.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.tdcf.validate()?;
        self.synth.validate()?;
        for (field, p) in [
            ("paths.protocol", &self.paths.protocol),
            ("paths.audio_dir", &self.paths.audio_dir),
            ("paths.feature_dir", &self.paths.feature_dir),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::config(field, format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Applies a command-line seed; the training seed always follows the
    /// run seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self
    }
}

/// Loads `path` (or the defaults), applies the seed and validates.
pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a bare t-DCF parameter file.
pub fn load_tdcf(path: &Path) -> Result<TdcfParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let p: TdcfParams = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::config(format!("tdcf.{}", e.path()), e.into_inner().to_string()))?;
    p.validate()?;
    Ok(p)
}
