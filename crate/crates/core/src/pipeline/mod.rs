//! End-to-end reconstruction: mesh, per-patch photometric solves, integration, stitching
//! and refinement, with stage caching and a run report.

mod bench;
mod config;
mod report;

pub use bench::{benchmark_piecewise_vs_global, BenchReport, BenchRow};
pub use config::{InputSpec, PipelineConfig};
pub use report::{FailedPatch, PatchSummary, RunReport};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{DMatrix, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{lift_to_facet, patch_curvature, solve_corrections, FacetPointSet, PatchCorrection};
use crate::decompose::{decompose_frame, PatchMask};
use crate::error::{Error, Result};
use crate::geometry::{area2d, build_mesh, enlarge_triangle, CoarseMesh};
use crate::image::ImageFrame;
use crate::io::{grid_faces, read_sparse, write_heatmap, write_obj, write_ply};
use crate::photometric::{
    anchor_lorentz, apply_gauge, integrate_patch, solve_masked, solve_patch, update_surface_given_lighting,
    HeightField, PhotometricFactors,
};
use crate::refine::{refine, superpose, DenseSurface};
use crate::register::{
    assemble_stack, missing_fraction, register_patch, PatchStack, RegisteredRow, TemplateRaster, MIN_OBSERVATIONS,
};
use crate::synth::{error_3d, render, HeightSurface, SceneSpec};

/// Frames, sparse tracks and (for synthetic scenes) the true surface.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub frames: Vec<ImageFrame<f64>>,
    pub points3d: Vec<nalgebra::Point3<f64>>,
    pub projections: Vec<Vec<Option<nalgebra::Point2<f64>>>>,
    pub truth: Option<HeightSurface>,
}

impl Inputs {
    pub fn from_scene(spec: &SceneSpec) -> Result<Self> {
        let data = render::<f64>(spec)?;
        Ok(Self {
            frames: data.frames,
            points3d: data.points3d,
            projections: data.projections,
            truth: Some(spec.surface.clone()),
        })
    }

    pub fn load(cfg: &PipelineConfig, base: &Path) -> Result<Self> {
        match &cfg.input {
            InputSpec::Scene { scene } => {
                let path = base.join(scene);
                Self::from_scene(&SceneSpec::from_toml(&fs::read_to_string(path)?)?)
            }
            InputSpec::InlineScene(spec) => Self::from_scene(spec),
            InputSpec::Files { sparse, images } => {
                let path = base.join(sparse);
                let sparse_in = read_sparse::<f64>(&path)?;
                let dir = path.parent().unwrap_or(base);
                let names: Vec<String> = if images.is_empty() {
                    sparse_in.labels.clone()
                } else {
                    images.clone()
                };
                if names.len() != sparse_in.projections.len() {
                    return Err(Error::Config(format!(
                        "{} images for {} frames of projections",
                        names.len(),
                        sparse_in.projections.len()
                    )));
                }
                let frames = names
                    .iter()
                    .enumerate()
                    .map(|(g, n)| ImageFrame::load(&dir.join(n), g))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self {
                    frames,
                    points3d: sparse_in.points3d,
                    projections: sparse_in.projections,
                    truth: None,
                })
            }
        }
    }
}

/// Everything a patch contributes after the photometric stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchResult {
    pub raster: TemplateRaster<f64>,
    pub factors: PhotometricFactors<f64>,
    pub heights: HeightField<f64>,
    pub frames: usize,
    pub columns: usize,
    pub observed: usize,
    /// Columns observed in fewer than four frames.
    pub weak: Vec<usize>,
    /// Observed energy `‖D ⊙ J‖²` of the stack.
    pub energy: f64,
}

/// Result of a pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub mesh: CoarseMesh<f64>,
    pub patches: Vec<PatchResult>,
    pub point_sets: Vec<FacetPointSet<f64>>,
    pub corrections: Vec<PatchCorrection<f64>>,
    pub surface: DenseSurface<f64>,
    pub report: RunReport,
}

struct Timer {
    times: BTreeMap<String, f64>,
    last: Instant,
}

impl Timer {
    fn new() -> Self {
        Self {
            times: BTreeMap::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.times.insert(stage.to_string(), (now - self.last).as_secs_f64());
        self.last = now;
    }
}

/// Builds one stack per triangle by registering every frame onto the triangle's template.
pub fn build_stacks(
    mesh: &CoarseMesh<f64>,
    frames: &[ImageFrame<f64>],
    cfg: &PipelineConfig,
) -> Result<Vec<(TemplateRaster<f64>, PatchStack<f64>)>> {
    let masks: Vec<Vec<PatchMask>> = frames
        .par_iter()
        .map(|f| decompose_frame(mesh, f, cfg.enlargement))
        .collect::<Result<_>>()?;
    let reference = mesh.reference_view;
    (0..mesh.triangle_count())
        .into_par_iter()
        .map(|t| {
            let target = match cfg.template_pixels {
                Some(n) => n,
                None => {
                    let proj = mesh.projected(reference, t).ok_or(Error::UntrackedInReference(t))?;
                    area2d(&enlarge_triangle(&proj, cfg.enlargement)?).round() as usize
                }
            };
            let raster = TemplateRaster::new(&mesh.facet(t), t, cfg.enlargement, target, cfg.max_template_side)?;
            let rows = frames
                .iter()
                .map(|frame| {
                    let g = frame.frame_id;
                    match mesh.projected(g, t) {
                        Some(tri) if !masks[g][t].is_empty() => {
                            let src = enlarge_triangle(&tri, cfg.enlargement)?;
                            register_patch(frame, &masks[g][t], &src, &raster, cfg.bilinear)
                        }
                        _ => Ok(RegisteredRow {
                            frame_id: g,
                            values: vec![0.0; raster.len()],
                            mapped: vec![false; raster.len()],
                        }),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let stack = assemble_stack(&rows, &raster, cfg.tau_dark, cfg.tau_sat)?;
            Ok((raster, stack))
        })
        .collect()
}

fn mean_column(n: &DMatrix<f64>, stack: &PatchStack<f64>) -> Option<(Vector4<f64>, f64)> {
    let mut acc = Vector4::zeros();
    let mut count = 0usize;
    for i in 0..stack.columns() {
        if stack.column_observations(i) >= MIN_OBSERVATIONS {
            acc += Vector4::new(n[(0, i)], n[(1, i)], n[(2, i)], n[(3, i)]);
            count += 1;
        }
    }
    (count > 0).then(|| (acc / count as f64, count as f64))
}

/// Well-observed patches whose facet normals are spread as far apart as possible, so that
/// together they see every lighting direction.
fn spread_patches(stacks: &[(TemplateRaster<f64>, PatchStack<f64>)], usable: &[usize], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = usable.to_vec();
    order.sort_by_key(|&k| (std::cmp::Reverse(stacks[k].1.observed_count()), k));
    // the better observed half competes for the spread
    order.truncate(order.len().div_ceil(2).max(count.min(order.len())));
    let normal = |k: usize| stacks[k].0.frame.facet_normal;
    let mut pick = vec![order[0]];
    let mut nearest: Vec<f64> = order.iter().map(|&k| normal(k).dot(&normal(order[0]))).collect();
    while pick.len() < count.min(order.len()) {
        let (best, _) = nearest
            .iter()
            .enumerate()
            .filter(|(i, _)| !pick.contains(&order[*i]))
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("candidates left");
        let k = order[best];
        pick.push(k);
        for (i, &o) in order.iter().enumerate() {
            nearest[i] = nearest[i].max(normal(o).dot(&normal(k)));
        }
    }
    pick
}

/// Lighting shared by all patches, estimated jointly on the largest stacks and anchored so
/// that each patch's mean normal points along its facet normal.
pub fn shared_lighting(
    stacks: &[(TemplateRaster<f64>, PatchStack<f64>)],
    usable: &[usize],
    cfg: &PipelineConfig,
) -> Result<DMatrix<f64>> {
    let pick = spread_patches(stacks, usable, cfg.lighting_patches.max(1));
    let f = stacks[pick[0]].1.frames();
    let mut cols: Vec<(usize, usize)> = Vec::new();
    for &k in &pick {
        let s = &stacks[k].1;
        let strong: Vec<usize> = (0..s.columns())
            .filter(|&i| s.column_observations(i) >= MIN_OBSERVATIONS)
            .collect();
        let stride = strong.len().div_ceil(cfg.lighting_columns.max(1)).max(1);
        cols.extend(strong.iter().step_by(stride).map(|&i| (k, i)));
    }
    let j = DMatrix::from_fn(f, cols.len(), |g, c| stacks[cols[c].0].1.intensities[(g, cols[c].1)]);
    let d = DMatrix::from_fn(f, cols.len(), |g, c| stacks[cols[c].0].1.observed[(g, cols[c].1)]);
    let joint = solve_masked(&j, &d, None, &cfg.solver)?;
    let mut l = joint.lighting;
    let mut pairs = Vec::new();
    for &k in usable {
        let s = &stacks[k].1;
        let n = update_surface_given_lighting(&s.intensities, &s.observed, &l, &cfg.solver);
        if let Some((c, w)) = mean_column(&n, s) {
            let target: Vector3<f64> = stacks[k].0.frame.facet_normal;
            pairs.push((c, target, w));
        }
    }
    match anchor_lorentz(&pairs) {
        Some(g) => {
            let mut dummy = DMatrix::zeros(4, 0);
            apply_gauge(&mut l, &mut dummy, &g);
        }
        None => warn!("too few patches to anchor the lighting; keeping the solver's basis"),
    }
    Ok(l)
}

/// Runs the photometric stage for every triangle; failed patches are reported, not fatal.
pub fn photometric_stage(
    mesh: &CoarseMesh<f64>,
    frames: &[ImageFrame<f64>],
    cfg: &PipelineConfig,
) -> Result<(Vec<PatchResult>, Vec<FailedPatch>, f64)> {
    let started = Instant::now();
    let stacks = build_stacks(mesh, frames, cfg)?;
    debug!("stacks built in {:.2} s", started.elapsed().as_secs_f64());
    let mut failed = Vec::new();
    let mut usable = Vec::new();
    for (k, (_, s)) in stacks.iter().enumerate() {
        let strong = (0..s.columns())
            .filter(|&i| s.column_observations(i) >= MIN_OBSERVATIONS)
            .count();
        if strong == 0 || s.frames() < 4 {
            failed.push(FailedPatch {
                triangle_id: s.triangle_id,
                reason: "no column observed in four frames".into(),
            });
        } else {
            usable.push(k);
        }
    }
    let (missing_num, missing_den) = stacks.iter().fold((0.0, 0.0), |(a, b), (_, s)| {
        let n = (s.frames() * s.columns()) as f64;
        (a + missing_fraction(s) * n, b + n)
    });
    let missing = if missing_den > 0.0 {
        missing_num / missing_den
    } else {
        1.0
    };
    if usable.is_empty() {
        return Err(Error::NoUsablePatches);
    }
    let lighting = if cfg.shared_lighting {
        Some(shared_lighting(&stacks, &usable, cfg)?)
    } else {
        None
    };
    debug!("shared lighting ready at {:.2} s", started.elapsed().as_secs_f64());
    // largest stacks first so the pool stays busy at the end of the queue
    let mut order = usable.clone();
    order.sort_by_key(|&k| (std::cmp::Reverse(stacks[k].1.observed_count()), k));
    let solved: Vec<(usize, Result<PatchResult>)> = order
        .par_iter()
        .map(|&k| {
            let (raster, stack) = &stacks[k];
            let init = lighting.as_ref().map(|l| {
                let n = update_surface_given_lighting(&stack.intensities, &stack.observed, l, &cfg.solver);
                PhotometricFactors {
                    lighting: l.clone(),
                    surface: n,
                    residual: 0.0,
                    iterations: 0,
                    trace: Vec::new(),
                    degenerate: Vec::new(),
                }
            });
            let res = solve_patch(stack, init.as_ref(), &cfg.solver).and_then(|factors| {
                let heights = integrate_patch(&factors, stack, raster, cfg.integration)?;
                Ok(PatchResult {
                    raster: raster.clone(),
                    factors,
                    heights,
                    frames: stack.frames(),
                    columns: stack.columns(),
                    observed: stack.observed_count(),
                    weak: stack.weak_columns.clone(),
                    energy: stack
                        .intensities
                        .zip_map(&stack.observed, |v, o| if o { v * v } else { 0.0 })
                        .sum(),
                })
            });
            (k, res)
        })
        .collect();
    let mut by_index: BTreeMap<usize, PatchResult> = BTreeMap::new();
    for (k, res) in solved {
        match res {
            Ok(p) => {
                by_index.insert(k, p);
            }
            Err(e) => failed.push(FailedPatch {
                triangle_id: stacks[k].1.triangle_id,
                reason: e.to_string(),
            }),
        }
    }
    failed.sort_by_key(|f| f.triangle_id);
    Ok((by_index.into_values().collect(), failed, missing))
}

fn write_json<S: Serialize>(dir: &Path, name: &str, value: &S) -> Result<()> {
    fs::write(dir.join(name), serde_json::to_vec(value)?)?;
    Ok(())
}

fn read_json<S: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Option<S> {
    let bytes = fs::read(dir.join(name)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

#[derive(Serialize, Deserialize)]
struct PhotometricCache {
    patches: Vec<PatchResult>,
    failed: Vec<FailedPatch>,
    missing: f64,
}

/// Runs every stage on already loaded inputs.
pub fn run_on_inputs(inputs: &Inputs, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| run_stages(inputs, cfg))
}

fn run_stages(inputs: &Inputs, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let started = Instant::now();
    let mut timer = Timer::new();
    let cache = cfg.cache.then_some(cfg.output.as_path());
    if let Some(dir) = cache {
        fs::create_dir_all(dir)?;
    }
    let reference = cfg.reference_view.unwrap_or(inputs.frames.len() / 2);
    let mesh = build_mesh(&inputs.points3d, &inputs.projections, reference, &cfg.mesh)?;
    info!(
        "mesh: {} points, {} triangles",
        mesh.point_count(),
        mesh.triangle_count()
    );
    timer.lap("mesh");

    let cached: Option<PhotometricCache> = if cfg.resume {
        cache.and_then(|d| read_json(d, "photometric.json"))
    } else {
        None
    };
    let PhotometricCache {
        patches,
        failed,
        missing,
    } = match cached {
        Some(c) => c,
        None => {
            let (patches, failed, missing) = photometric_stage(&mesh, &inputs.frames, cfg)?;
            let c = PhotometricCache {
                patches,
                failed,
                missing,
            };
            if let Some(dir) = cache {
                write_json(dir, "mesh.json", &mesh)?;
                write_json(dir, "photometric.json", &c)?;
            }
            c
        }
    };
    if patches.is_empty() {
        return Err(Error::NoUsablePatches);
    }
    for f in &failed {
        warn!("patch {} excluded: {}", f.triangle_id, f.reason);
    }
    timer.lap("photometric");

    let sets: Vec<FacetPointSet<f64>> = patches
        .par_iter()
        .map(|p| lift_to_facet(&p.heights, &p.raster))
        .collect::<Result<_>>()?;
    let curvatures: Vec<f64> = patches.iter().map(|p| patch_curvature(&p.heights).value).collect();
    let (corrections, alignment) = solve_corrections(&sets, &mesh, &curvatures, &cfg.align)?;
    if let Some(dir) = cache {
        write_json(dir, "corrections.json", &corrections)?;
    }
    timer.lap("align");

    let raw = superpose(&sets, &corrections, &alignment.overlaps, &mesh)?;
    let surface = refine(&raw, &cfg.refine)?;
    timer.lap("refine");

    let error = match &inputs.truth {
        Some(truth) => Some(error_3d(&surface.points, truth)?),
        None => None,
    };
    if let Some(dir) = cache {
        write_ply(&dir.join("surface.ply"), &surface.points)?;
        write_obj(&dir.join("surface.obj"), &surface.points, &grid_faces(&surface))?;
        if let Some(e) = &error {
            write_heatmap(&dir.join("error_heatmap.png"), &surface, &e.distances)?;
        }
    }
    timer.lap("export");

    let report = RunReport {
        seed: cfg.seed,
        workers: cfg.workers,
        mesh_points: mesh.point_count(),
        triangles: mesh.triangle_count(),
        frames: inputs.frames.len(),
        pixels: patches.iter().map(|p| p.columns).sum(),
        missing_percent: 100.0 * missing,
        patches: patches
            .iter()
            .map(|p| PatchSummary {
                triangle_id: p.raster.triangle_id,
                columns: p.columns,
                observed: p.observed,
                residual: p.factors.residual,
                iterations: p.factors.iterations,
            })
            .collect(),
        failed,
        gap_before: alignment.gap_before,
        gap_after: alignment.gap_after,
        refine_energy: surface.energy,
        refine_iterations: surface.iterations,
        surface_points: surface.len(),
        error_percent: error.as_ref().map(|e| e.mean_percent),
        stage_seconds: timer.times.clone(),
        total_seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = cache {
        report.save(&dir.join("report.json"))?;
    }
    Ok(PipelineOutput {
        mesh,
        patches,
        point_sets: sets,
        corrections,
        surface,
        report,
    })
}

/// Loads the inputs named by `cfg` (relative to `base`) and runs every stage.
pub fn run_pipeline(cfg: &PipelineConfig, base: &Path) -> Result<PipelineOutput> {
    let inputs = Inputs::load(cfg, base)?;
    run_on_inputs(&inputs, cfg)
}
