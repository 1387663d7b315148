//! Exact per-patch inputs derived from an analytic surface, for checking the stitching stages
//! without the photometric solve in the loop.

use nalgebra::{Point2, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HeightSurface;
use crate::error::Result;
use crate::geometry::{build_mesh, CoarseMesh, MeshOptions};
use crate::photometric::{GridSpec, HeightField};
use crate::register::TemplateRaster;

/// Single-view mesh over a jittered `n × n` lattice seen from straight above
/// (image x = world x, image y = −world y, 100 pixels per unit).
pub fn frontal_mesh(surface: &HeightSurface, n: usize, jitter: f64, seed: u64) -> Result<CoarseMesh<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1.8 / (n.max(2) - 1) as f64;
    let mut points = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let mut x = -0.9 + c as f64 * step;
            let mut y = -0.9 + r as f64 * step;
            if r > 0 && r + 1 < n {
                y += rng.gen_range(-1.0..1.0) * jitter * step;
            }
            if c > 0 && c + 1 < n {
                x += rng.gen_range(-1.0..1.0) * jitter * step;
            }
            points.push(surface.point(x, y));
        }
    }
    let proj = vec![points
        .iter()
        .map(|p| Some(Point2::new(100.0 * p.x, -100.0 * p.y)))
        .collect()];
    build_mesh(&points, &proj, 0, &MeshOptions::default())
}

/// Elevation of the surface above the point `base` along the unit `normal`.
pub fn elevation_along(surface: &HeightSurface, base: &Point3<f64>, normal: &Vector3<f64>) -> f64 {
    let mut e = 0.0;
    for _ in 0..50 {
        let p = base + normal * e;
        let (hx, hy) = surface.gradient(p.x, p.y);
        let f = p.z - surface.height(p.x, p.y);
        let df = normal.z - hx * normal.x - hy * normal.y;
        if df.abs() < 1e-12 {
            break;
        }
        let step = f / df;
        e -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    e
}

/// Exact elevations of the surface over every node of the raster's bounding grid.
pub fn true_height_field(surface: &HeightSurface, raster: &TemplateRaster<f64>) -> HeightField<f64> {
    let grid = GridSpec::from_raster(raster);
    let n = raster.frame.facet_normal;
    let heights = (0..grid.rows * grid.cols)
        .map(|flat| {
            let base = raster.frame.from_template(&grid.node(flat), 0.0);
            elevation_along(surface, &base, &n)
        })
        .collect();
    HeightField {
        triangle_id: raster.triangle_id,
        valid: vec![true; grid.pixels.len()],
        grid,
        heights,
        clamped: 0,
    }
}

/// Template rasters and exact height fields for every triangle of `mesh`.
pub fn true_patches(
    mesh: &CoarseMesh<f64>,
    surface: &HeightSurface,
    enlargement: f64,
    target_pixels: usize,
) -> Result<(Vec<TemplateRaster<f64>>, Vec<HeightField<f64>>)> {
    let mut rasters = Vec::new();
    let mut fields = Vec::new();
    for t in 0..mesh.triangle_count() {
        let r = TemplateRaster::new(&mesh.facet(t), t, enlargement, target_pixels, 64)?;
        fields.push(true_height_field(surface, &r));
        rasters.push(r);
    }
    Ok((rasters, fields))
}
