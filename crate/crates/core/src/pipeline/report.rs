use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSummary {
    pub triangle_id: usize,
    pub columns: usize,
    pub observed: usize,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedPatch {
    pub triangle_id: usize,
    pub reason: String,
}

/// Counts, per-patch solver statistics, timings and (with a known surface) the 3D error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub workers: usize,
    pub mesh_points: usize,
    pub triangles: usize,
    pub frames: usize,
    /// Template pixels over all solved patches.
    pub pixels: usize,
    /// Unobserved share of all stack entries, in percent.
    pub missing_percent: f64,
    /// Sorted by triangle id.
    pub patches: Vec<PatchSummary>,
    pub failed: Vec<FailedPatch>,
    pub gap_before: f64,
    pub gap_after: f64,
    pub refine_energy: f64,
    pub refine_iterations: usize,
    pub surface_points: usize,
    pub error_percent: Option<f64>,
    pub stage_seconds: BTreeMap<String, f64>,
    pub total_seconds: f64,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// The report with timings and the worker count cleared, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        Self {
            workers: 0,
            stage_seconds: BTreeMap::new(),
            total_seconds: 0.0,
            ..self.clone()
        }
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mesh points      {}", self.mesh_points)?;
        writeln!(f, "triangles        {}", self.triangles)?;
        writeln!(f, "frames           {}", self.frames)?;
        writeln!(f, "solved patches   {}", self.patches.len())?;
        writeln!(f, "failed patches   {}", self.failed.len())?;
        writeln!(f, "template pixels  {}", self.pixels)?;
        writeln!(f, "missing pixels   {:.2}%", self.missing_percent)?;
        writeln!(f, "seam gap         {:.3e} -> {:.3e}", self.gap_before, self.gap_after)?;
        writeln!(f, "surface points   {}", self.surface_points)?;
        writeln!(
            f,
            "refine energy    {:.6e} ({} iterations)",
            self.refine_energy, self.refine_iterations
        )?;
        if let Some(e) = self.error_percent {
            writeln!(f, "3D error         {e:.2}%")?;
        }
        for (stage, s) in &self.stage_seconds {
            writeln!(f, "time {stage:<12}{s:.2} s")?;
        }
        write!(f, "time total       {:.2} s", self.total_seconds)
    }
}
