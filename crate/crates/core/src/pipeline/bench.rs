use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, Point3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::{photometric_stage, PipelineConfig};
use crate::decompose::decompose_frame;
use crate::error::{Error, Result};
use crate::geometry::build_mesh;
use crate::photometric::{anchor_lorentz, apply_gauge, masked_residual, solve_masked, PhotometricFactors};
use crate::synth::oracle::elevation_along;
use crate::synth::{render, HeightSurface, PinholeCamera, SceneSpec};

/// Timing and accuracy of one way of solving the static-view stack.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub seconds: f64,
    /// Columns in the factorization(s).
    pub columns: usize,
    /// Mean angle between recovered and true normals, degrees.
    pub mean_angle_deg: f64,
    /// Masked residual over the observed energy.
    pub relative_residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub patches: usize,
    pub frames: usize,
    pub global: BenchRow,
    pub piecewise: BenchRow,
    /// Global over piecewise wall time.
    pub speedup: f64,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} patches, {} frames", self.patches, self.frames)?;
        writeln!(
            f,
            "{:<10} {:>10} {:>9} {:>11} {:>12}",
            "method", "seconds", "columns", "angle deg", "rel resid"
        )?;
        for r in [&self.global, &self.piecewise] {
            writeln!(
                f,
                "{:<10} {:>10.3} {:>9} {:>11.3} {:>12.3e}",
                r.method, r.seconds, r.columns, r.mean_angle_deg, r.relative_residual
            )?;
        }
        write!(f, "speedup    {:.2}x", self.speedup)
    }
}

/// First crossing of the ray with the height surface, by marching and bisection.
fn ray_hit(surface: &HeightSurface, cam: &PinholeCamera, u: f64, v: f64, reach: f64) -> Option<Point3<f64>> {
    let dir = cam.ray(u, v);
    let above = |t: f64| {
        let p = cam.center + dir * t;
        p.z - surface.height(p.x.clamp(-1.0, 1.0), p.y.clamp(-1.0, 1.0))
    };
    let steps = 400;
    let dt = reach / steps as f64;
    let mut lo = 0.0;
    for s in 1..=steps {
        let t = s as f64 * dt;
        if above(t) < 0.0 {
            let mut hi = t;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if above(mid) < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let p = cam.center + dir * hi;
            return (p.x.abs() <= 1.0 && p.y.abs() <= 1.0).then_some(p);
        }
        lo = t;
    }
    None
}

fn angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
}

fn mean_column(n: &DMatrix<f64>, cols: &[usize]) -> Option<Vector4<f64>> {
    if cols.is_empty() {
        return None;
    }
    let mut acc = Vector4::zeros();
    for &i in cols {
        acc += Vector4::new(n[(0, i)], n[(1, i)], n[(2, i)], n[(3, i)]);
    }
    Some(acc / cols.len() as f64)
}

/// Solves a static-view scene once as a single masked factorization over every surface pixel
/// and once patch by patch, and compares wall time and normal accuracy.
///
/// Both results are brought into the world frame the same way: one Lorentz change of basis
/// that maps each triangle's mean surface column onto its facet normal.
pub fn benchmark_piecewise_vs_global(scene: &SceneSpec, cfg: &PipelineConfig) -> Result<BenchReport> {
    let mut spec = scene.clone();
    spec.static_view = true;
    let data = render::<f64>(&spec)?;
    let mesh = build_mesh(&data.points3d, &data.projections, 0, &cfg.mesh)?;
    let m = mesh.triangle_count();
    if m < 4 {
        return Err(Error::InvalidParameter {
            name: "scene",
            reason: format!("{m} triangles; at least 4 are needed to split the problem"),
        });
    }
    let cam = &data.cameras[0];
    let reach = 2.0 * spec.distance + 4.0;

    // global: one column per surface pixel inside the (un-enlarged) mesh
    let started = Instant::now();
    let frame0 = &data.frames[0];
    let masks = decompose_frame(&mesh, frame0, 1.0)?;
    let mut owner = vec![usize::MAX; frame0.width * frame0.height];
    for (t, mask) in masks.iter().enumerate() {
        for &p in &mask.indices {
            if owner[p] == usize::MAX {
                owner[p] = t;
            }
        }
    }
    let pixels: Vec<usize> = (0..owner.len()).filter(|&p| owner[p] != usize::MAX).collect();
    let f = data.frames.len();
    let j = DMatrix::from_fn(f, pixels.len(), |g, i| data.frames[g].pixels[pixels[i]]);
    let d = j.map(|v| v >= cfg.tau_dark && v <= cfg.tau_sat);
    let mut global = solve_masked(&j, &d, None, &cfg.solver)?;
    let global_seconds = started.elapsed().as_secs_f64();
    let energy: f64 = j.zip_map(&d, |v, o| if o { v * v } else { 0.0 }).sum();
    let global_resid = masked_residual(&j, &d, &global.lighting, &global.surface) / energy;

    let mut by_triangle = vec![Vec::new(); m];
    for (i, &p) in pixels.iter().enumerate() {
        if d.column(i).iter().filter(|o| **o).count() >= 4 {
            by_triangle[owner[p]].push(i);
        }
    }
    let pairs: Vec<_> = (0..m)
        .filter_map(|t| {
            let c = mean_column(&global.surface, &by_triangle[t])?;
            Some((
                c,
                crate::geometry::facet_normal(&mesh.facet(t)).ok()?,
                by_triangle[t].len() as f64,
            ))
        })
        .collect();
    anchor(&mut global, &pairs);
    let mut angles = Vec::new();
    for cols in &by_triangle {
        for &i in cols {
            let p = pixels[i];
            let (u, v) = ((p % frame0.width) as f64, (p / frame0.width) as f64);
            let (Some(hit), Some(n)) = (ray_hit(&spec.surface, cam, u, v, reach), global.normal(i)) else {
                continue;
            };
            angles.push(angle_deg(&n, &spec.surface.normal(hit.x, hit.y)));
        }
    }
    let global_angle = mean(&angles);

    // piecewise: the photometric stage of the pipeline on the same frames
    let started = Instant::now();
    let (patches, _failed, _missing) = photometric_stage(&mesh, &data.frames, cfg)?;
    let piecewise_seconds = started.elapsed().as_secs_f64();
    let (mut resid, mut pw_energy) = (0.0, 0.0);
    let mut pw_pairs = Vec::new();
    let mut strong: Vec<Vec<usize>> = Vec::new();
    for p in &patches {
        let fac = &p.factors;
        resid += fac.residual;
        let cols: Vec<usize> = (0..p.columns).filter(|i| !p.weak.contains(i)).collect();
        pw_energy += p.energy;
        if let Some(c) = mean_column(&fac.surface, &cols) {
            pw_pairs.push((c, p.raster.frame.facet_normal, cols.len() as f64));
        }
        strong.push(cols);
    }
    let g = anchor_lorentz(&pw_pairs);
    let mut angles = Vec::new();
    for (p, cols) in patches.iter().zip(&strong) {
        let mut fac = p.factors.clone();
        if let Some(g) = &g {
            apply_gauge(&mut fac.lighting, &mut fac.surface, g);
        }
        let n_f = p.raster.frame.facet_normal;
        for &i in cols {
            let Some(n) = fac.normal(i) else { continue };
            let base = p.raster.frame.from_template(&p.raster.pixel_position(i), 0.0);
            let e = elevation_along(&spec.surface, &base, &n_f);
            let hit = base + n_f * e;
            if hit.x.abs() > 1.0 || hit.y.abs() > 1.0 {
                continue;
            }
            angles.push(angle_deg(&n, &spec.surface.normal(hit.x, hit.y)));
        }
    }
    let piecewise_angle = mean(&angles);

    Ok(BenchReport {
        patches: patches.len(),
        frames: f,
        global: BenchRow {
            method: "global".into(),
            seconds: global_seconds,
            columns: pixels.len(),
            mean_angle_deg: global_angle,
            relative_residual: global_resid,
        },
        piecewise: BenchRow {
            method: "piecewise".into(),
            seconds: piecewise_seconds,
            columns: patches.iter().map(|p| p.columns).sum(),
            mean_angle_deg: piecewise_angle,
            relative_residual: if pw_energy > 0.0 { resid / pw_energy } else { 0.0 },
        },
        speedup: global_seconds / piecewise_seconds.max(1e-12),
    })
}

fn anchor(fac: &mut PhotometricFactors<f64>, pairs: &[(Vector4<f64>, Vector3<f64>, f64)]) {
    if let Some(g) = anchor_lorentz(pairs) {
        apply_gauge(&mut fac.lighting, &mut fac.surface, &g);
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
