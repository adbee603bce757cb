//! Run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use talkstyle::container::read_json;
use talkstyle::face_model::{generate_synthetic_basis, load_basis, FaceBasis};
use talkstyle::lsf::{LsfConfig, LsfTrainSettings};
use talkstyle::render::{PerceptualExtractor, RenderConfig, RenderTrainSettings};
use talkstyle::{Error, Result};

/// Vertex count of the built-in synthetic basis used when no basis is given.
pub const DEFAULT_BASIS_VERTICES: usize = 2500;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Face basis container; the synthetic basis is used when absent.
    pub basis: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Default LSF checkpoint for synthesize and interpolate.
    pub lsf_checkpoint: Option<PathBuf>,
    /// Default render checkpoint for render.
    pub render_checkpoint: Option<PathBuf>,
    /// Pretrained perceptual feature weights; seeded weights when absent.
    pub perceptual: Option<PathBuf>,
    pub outputs: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub lsf: LsfConfig,
    pub lsf_train: LsfTrainSettings,
    pub render: RenderConfig,
    pub render_train: RenderTrainSettings,
    pub seed: u64,
}

impl RunConfig {
    /// Reads `path` (JSON) or falls back to defaults; `seed` overrides the
    /// file's seed. Module seeds are derived from the global seed.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.lsf.seed = cfg.seed;
        cfg.lsf_train.seed = cfg.seed.wrapping_add(1);
        cfg.render.seed = cfg.seed.wrapping_add(2);
        cfg.render_train.seed = cfg.seed.wrapping_add(3);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.lsf.validate()?;
        self.render.validate()?;
        let p = &self.paths;
        for (name, path) in [
            ("basis", &p.basis),
            ("corpus", &p.corpus),
            ("lsf_checkpoint", &p.lsf_checkpoint),
            ("render_checkpoint", &p.render_checkpoint),
            ("perceptual", &p.perceptual),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(Error::Io {
                        path: path.clone(),
                        source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("configured {name} path does not exist")),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn basis(&self) -> Result<FaceBasis> {
        match &self.paths.basis {
            Some(p) => load_basis(p),
            None => generate_synthetic_basis(0, DEFAULT_BASIS_VERTICES),
        }
    }

    pub fn perceptual(&self, dtype: candle_core::DType) -> Result<PerceptualExtractor> {
        match &self.paths.perceptual {
            Some(p) => PerceptualExtractor::load(p, dtype),
            None => PerceptualExtractor::seeded(self.seed.wrapping_add(4), dtype),
        }
    }
}
