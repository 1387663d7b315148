use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::AlignOptions;
use crate::error::{Error, Result};
use crate::geometry::MeshOptions;
use crate::photometric::{IntegrationBackend, SolverOptions};
use crate::refine::RefineOptions;
use crate::synth::SceneSpec;

/// Where the frames and sparse tracks come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputSpec {
    /// Scene file rendered on the fly; error_3d is reported against its surface.
    Scene {
        scene: PathBuf,
    },
    /// Sparse-point file plus one grayscale image per frame. Empty `images` means the
    /// frame labels of the sparse file are the image names, relative to that file.
    Files {
        sparse: PathBuf,
        #[serde(default)]
        images: Vec<String>,
    },
    InlineScene(SceneSpec),
}

/// Pipeline configuration, read from TOML. Every field has a default except `input`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub input: InputSpec,
    /// Frame used for triangulation and for the refined surface grid; middle frame if unset.
    pub reference_view: Option<usize>,
    pub enlargement: f64,
    pub tau_dark: f64,
    pub tau_sat: f64,
    /// Template nodes per patch; the enlarged reference-view area in pixels if unset.
    pub template_pixels: Option<usize>,
    pub max_template_side: usize,
    pub bilinear: bool,
    /// Initialise every patch from one lighting estimate shared across patches.
    pub shared_lighting: bool,
    /// How many of the best-observed stacks enter the shared lighting estimate.
    pub lighting_patches: usize,
    /// Columns sampled from each of those stacks.
    pub lighting_columns: usize,
    pub mesh: MeshOptions,
    pub solver: SolverOptions,
    pub integration: IntegrationBackend,
    pub align: AlignOptions,
    pub refine: RefineOptions,
    pub workers: usize,
    pub seed: u64,
    pub output: PathBuf,
    /// Write stage results to `output`.
    pub cache: bool,
    /// Reuse the photometric stage from `output` when present.
    pub resume: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: InputSpec::InlineScene(SceneSpec::default()),
            reference_view: None,
            enlargement: 1.3,
            tau_dark: 0.02,
            tau_sat: 0.98,
            template_pixels: None,
            max_template_side: 64,
            bilinear: true,
            shared_lighting: true,
            lighting_patches: 24,
            lighting_columns: 150,
            mesh: MeshOptions::default(),
            solver: SolverOptions::default(),
            integration: IntegrationBackend::default(),
            align: AlignOptions::default(),
            refine: RefineOptions::default(),
            workers: 1,
            seed: 1,
            output: PathBuf::from("out"),
            cache: false,
            resume: false,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers < 1 {
            return Err(bad("workers must be at least 1"));
        }
        if !(self.enlargement >= 1.0 && self.enlargement < 3.0) {
            return Err(bad(format!("enlargement {} outside [1, 3)", self.enlargement)));
        }
        if !(0.0 <= self.tau_dark && self.tau_dark < self.tau_sat && self.tau_sat <= 1.0) {
            return Err(bad(format!(
                "need 0 <= tau_dark < tau_sat <= 1, got {} and {}",
                self.tau_dark, self.tau_sat
            )));
        }
        if self.max_template_side < 2 {
            return Err(bad("max_template_side must be at least 2"));
        }
        if self.template_pixels == Some(0) {
            return Err(bad("template_pixels must be positive"));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iters == 0 {
            return Err(bad("solver needs a positive tolerance and iteration cap"));
        }
        if !(self.refine.lambda >= 0.0 && self.refine.lambda.is_finite()) {
            return Err(bad(format!(
                "lambda {} must be finite and non-negative",
                self.refine.lambda
            )));
        }
        if !(self.align.r_pair_factor > 0.0) {
            return Err(bad("r_pair_factor must be positive"));
        }
        if self.lighting_patches == 0 {
            return Err(bad("lighting_patches must be positive"));
        }
        if self.resume && !self.cache {
            return Err(bad("resume needs cache = true"));
        }
        Ok(())
    }
}
