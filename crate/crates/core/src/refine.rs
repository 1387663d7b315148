//! Merging corrected patches and smoothing the seams on the reference-view grid.

use std::collections::BTreeMap;

use nalgebra::{Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::align::{FacetPointSet, Overlap, PatchCorrection};
use crate::error::{Error, Result};
use crate::geometry::{Barycentric, CoarseMesh, Triangle3};
use crate::linalg::conjugate_gradient_observed;
use crate::scalar::{from_usize, lit, to_f64, Real};

/// `½ √(|α−β| + |α−γ| + |γ−β|)`: zero at the centroid, `√2/2` at a vertex.
pub fn weight_from_barycentric<T: Real>(b: &Barycentric<T>) -> T {
    let s = (b.alpha - b.beta).abs() + (b.alpha - b.gamma).abs() + (b.gamma - b.beta).abs();
    s.sqrt() * lit(0.5)
}

/// Smoothing weight of a point attributed to `facet`, from its barycentric coordinates
/// after projection onto the facet plane.
pub fn weight_of<T: Real>(point: &Point3<T>, facet: &Triangle3<T>) -> Result<T> {
    let e1 = facet[1] - facet[0];
    let e2 = facet[2] - facet[0];
    let d = point - facet[0];
    let (a, b, c) = (e1.dot(&e1), e1.dot(&e2), e2.dot(&e2));
    let det = a * c - b * b;
    if !(det.abs() > lit::<T>(1e-24) * a * c) {
        return Err(Error::DegenerateTriangle);
    }
    let (p, q) = (d.dot(&e1), d.dot(&e2));
    let beta = (c * p - b * q) / det;
    let gamma = (a * q - b * p) / det;
    Ok(weight_from_barycentric(&Barycentric::new(
        T::one() - beta - gamma,
        beta,
        gamma,
    )))
}

/// One point of the merged surface with its origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint<T: Real> {
    pub position: Point3<T>,
    pub triangle_id: usize,
    pub template_index: usize,
    /// Barycentric coordinates w.r.t. the un-enlarged facet.
    pub barycentric: Barycentric<T>,
    /// Position in the reference view, by barycentric transfer of the projected facet.
    pub pixel: Point2<T>,
}

impl<T: Real> SurfacePoint<T> {
    pub fn weight(&self) -> T {
        weight_from_barycentric(&self.barycentric)
    }
}

/// Union of all corrected patches.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RawSurface<T: Real> {
    pub points: Vec<SurfacePoint<T>>,
    /// Pairs of overlap points merged into one.
    pub merged: usize,
}

/// How central a barycentric point is: its smallest coordinate.
fn depth<T: Real>(b: &Barycentric<T>) -> T {
    b.alpha.min(b.beta).min(b.gamma)
}

/// Concatenates the corrected patches; each overlap pair collapses to its midpoint, attributed
/// to whichever of the two patches holds it more centrally.
pub fn superpose<T: Real>(
    sets: &[FacetPointSet<T>],
    corrections: &[PatchCorrection<T>],
    overlaps: &[Overlap],
    mesh: &CoarseMesh<T>,
) -> Result<RawSurface<T>> {
    if sets.is_empty() {
        return Err(Error::Empty("corrected patches"));
    }
    if sets.len() != corrections.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} point sets, {} corrections",
            sets.len(),
            corrections.len()
        )));
    }
    let mut slot = BTreeMap::new();
    for (k, (s, c)) in sets.iter().zip(corrections).enumerate() {
        if s.triangle_id != c.triangle_id {
            return Err(Error::TriangleMismatch {
                expected: s.triangle_id,
                got: c.triangle_id,
            });
        }
        slot.insert(s.triangle_id, k);
    }
    let corrected: Vec<Vec<Point3<T>>> = sets
        .iter()
        .zip(corrections)
        .map(|(s, c)| s.corrected_points(c))
        .collect();
    let reference = mesh.reference_view;
    let point = |k: usize, i: usize, position: Point3<T>| -> Result<SurfacePoint<T>> {
        let s = &sets[k];
        let tri = mesh
            .projected(reference, s.triangle_id)
            .ok_or(Error::UntrackedInReference(s.triangle_id))?;
        let b = s.barycentrics[i];
        Ok(SurfacePoint {
            position,
            triangle_id: s.triangle_id,
            template_index: i,
            barycentric: b,
            pixel: b.point2(&tri),
        })
    };
    let mut consumed: Vec<Vec<bool>> = sets.iter().map(|s| vec![false; s.len()]).collect();
    let mut points = Vec::new();
    let mut merged = 0;
    for ov in overlaps {
        let (Some(&ka), Some(&kb)) = (slot.get(&ov.a), slot.get(&ov.b)) else {
            continue;
        };
        for &(i, j) in &ov.pairs {
            if consumed[ka][i] || consumed[kb][j] {
                continue;
            }
            consumed[ka][i] = true;
            consumed[kb][j] = true;
            let mid = Point3::from((corrected[ka][i].coords + corrected[kb][j].coords) * lit::<T>(0.5));
            let (k, idx) = if depth(&sets[ka].barycentrics[i]) >= depth(&sets[kb].barycentrics[j]) {
                (ka, i)
            } else {
                (kb, j)
            };
            points.push(point(k, idx, mid)?);
            merged += 1;
        }
    }
    for (k, pts) in corrected.iter().enumerate() {
        for (i, p) in pts.iter().enumerate() {
            if !consumed[k][i] {
                points.push(point(k, i, *p)?);
            }
        }
    }
    Ok(RawSurface { points, merged })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineOptions {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

/// Refined surface: one point per occupied reference-view pixel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseSurface<T: Real> {
    pub points: Vec<Point3<T>>,
    /// Reference-view pixel `(x, y)` of each point.
    pub pixels: Vec<(i64, i64)>,
    /// Data term target (mean of the splatted raw points) per pixel.
    pub raw: Vec<Point3<T>>,
    /// Mean smoothing weight per pixel.
    pub weights: Vec<T>,
    /// Most central contributing `(triangle, template index)` per pixel.
    pub sources: Vec<(usize, usize)>,
    pub energy: f64,
    /// Energy after every solver iteration, starting with the raw surface.
    pub energy_trace: Vec<f64>,
    pub iterations: usize,
}

impl<T: Real> DenseSurface<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the point at a reference pixel.
    pub fn lookup(&self) -> BTreeMap<(i64, i64), usize> {
        self.pixels.iter().enumerate().map(|(k, p)| (*p, k)).collect()
    }
}

/// Splatted grid: per occupied pixel the data target, weight, source and neighbours.
struct Grid<T: Real> {
    pixels: Vec<(i64, i64)>,
    raw: Vec<Vector3<T>>,
    weights: Vec<T>,
    sources: Vec<(usize, usize)>,
    /// Forward-difference pairs `(s, s + x)` and `(s, s + y)`.
    links: Vec<(usize, usize)>,
}

fn splat<T: Real>(raw: &RawSurface<T>) -> Grid<T> {
    struct Cell<T: Real> {
        sum: Vector3<T>,
        weight: T,
        count: usize,
        best: (T, usize, usize),
    }
    let mut cells: BTreeMap<(i64, i64), Cell<T>> = BTreeMap::new();
    for p in &raw.points {
        let key = (to_f64(p.pixel.x).round() as i64, to_f64(p.pixel.y).round() as i64);
        let g = p.weight();
        let cell = cells.entry(key).or_insert(Cell {
            sum: Vector3::zeros(),
            weight: T::zero(),
            count: 0,
            best: (lit(f64::INFINITY), p.triangle_id, p.template_index),
        });
        cell.sum += p.position.coords;
        cell.weight += g;
        cell.count += 1;
        if g < cell.best.0 {
            cell.best = (g, p.triangle_id, p.template_index);
        }
    }
    let index: BTreeMap<(i64, i64), usize> = cells.keys().enumerate().map(|(k, p)| (*p, k)).collect();
    let mut grid = Grid {
        pixels: Vec::with_capacity(cells.len()),
        raw: Vec::with_capacity(cells.len()),
        weights: Vec::with_capacity(cells.len()),
        sources: Vec::with_capacity(cells.len()),
        links: Vec::new(),
    };
    for (key, c) in &cells {
        let n = from_usize::<T>(c.count);
        grid.pixels.push(*key);
        grid.raw.push(c.sum / n);
        grid.weights.push(c.weight / n);
        grid.sources.push((c.best.1, c.best.2));
        let s = index[key];
        for next in [(key.0 + 1, key.1), (key.0, key.1 + 1)] {
            if let Some(&t) = index.get(&next) {
                grid.links.push((s, t));
            }
        }
    }
    grid
}

/// Energy `Σ λ(1−G)‖Ŝ − S‖² + G ‖∇Ŝ‖²` of a flattened `3 × n` iterate.
fn energy<T: Real>(grid: &Grid<T>, lambda: T, x: &[T]) -> f64 {
    let n = grid.pixels.len();
    let mut e = T::zero();
    for s in 0..n {
        let w = lambda * (T::one() - grid.weights[s]);
        for c in 0..3 {
            e += w * (x[c * n + s] - grid.raw[s][c]).powi(2);
        }
    }
    for &(s, t) in &grid.links {
        let g = grid.weights[s];
        for c in 0..3 {
            e += g * (x[c * n + t] - x[c * n + s]).powi(2);
        }
    }
    to_f64(e)
}

/// Minimises the seam-smoothing energy over the reference-view pixels covered by `raw`.
///
/// The three coordinates are solved jointly by conjugate gradients started from the raw
/// surface; the energy is checked after every iteration.
pub fn refine<T: Real>(raw: &RawSurface<T>, opts: &RefineOptions) -> Result<DenseSurface<T>> {
    if raw.points.is_empty() {
        return Err(Error::Empty("raw surface"));
    }
    if !(opts.lambda > 0.0) || !opts.lambda.is_finite() {
        return Err(Error::InvalidParameter {
            name: "lambda",
            reason: format!("must be positive, got {}", opts.lambda),
        });
    }
    let grid = splat(raw);
    let n = grid.pixels.len();
    let lambda: T = lit(opts.lambda);
    let data: Vec<T> = grid.weights.iter().map(|g| lambda * (T::one() - *g)).collect();
    let mut b = vec![T::zero(); 3 * n];
    let mut x0 = vec![T::zero(); 3 * n];
    for s in 0..n {
        for c in 0..3 {
            b[c * n + s] = data[s] * grid.raw[s][c];
            x0[c * n + s] = grid.raw[s][c];
        }
    }
    let apply = |x: &[T], out: &mut [T]| {
        for c in 0..3 {
            for s in 0..n {
                out[c * n + s] = data[s] * x[c * n + s];
            }
        }
        for &(s, t) in &grid.links {
            let g = grid.weights[s];
            for c in 0..3 {
                let d = g * (x[c * n + t] - x[c * n + s]);
                out[c * n + t] += d;
                out[c * n + s] -= d;
            }
        }
    };
    let start = energy(&grid, lambda, &x0);
    let mut trace = vec![start];
    let mut diverged = None;
    let (x, iterations, _) = conjugate_gradient_observed(apply, &b, &x0, lit(opts.tol), opts.max_iter, |x, _| {
        let e = energy(&grid, lambda, x);
        let last = *trace.last().unwrap();
        if e > last + 1e-12 * last.abs().max(1e-300) && diverged.is_none() {
            diverged = Some((last, e));
        }
        trace.push(e);
    });
    if let Some((before, after)) = diverged {
        return Err(Error::Diverged { before, after });
    }
    let points = (0..n).map(|s| Point3::new(x[s], x[n + s], x[2 * n + s])).collect();
    Ok(DenseSurface {
        points,
        pixels: grid.pixels,
        raw: grid.raw.into_iter().map(Point3::from).collect(),
        weights: grid.weights,
        sources: grid.sources,
        energy: *trace.last().unwrap(),
        energy_trace: trace,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_spot_values() {
        let third = 1.0 / 3.0;
        assert_eq!(weight_from_barycentric(&Barycentric::new(third, third, third)), 0.0);
        assert_eq!(
            weight_from_barycentric(&Barycentric::new(1.0, 0.0, 0.0)),
            2f64.sqrt() / 2.0
        );
        assert_eq!(weight_from_barycentric(&Barycentric::new(0.0, 0.5, 0.5)), 0.5);
        let facet = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        assert!((weight_of(&Point3::new(0.0, 0.0, 0.3), &facet).unwrap() - 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert!(weight_of(&Point3::new(0.0, 0.0, 0.0), &[facet[0], facet[0], facet[1]]).is_err());
    }

    fn point(position: Point3<f64>, triangle_id: usize, b: Barycentric<f64>, pixel: (f64, f64)) -> SurfacePoint<f64> {
        SurfacePoint {
            position,
            triangle_id,
            template_index: 0,
            barycentric: b,
            pixel: Point2::new(pixel.0, pixel.1),
        }
    }

    #[test]
    fn centroid_weights_keep_the_raw_surface() {
        let b = Barycentric::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0);
        let raw = RawSurface {
            points: (0..25)
                .map(|k| {
                    let (x, y) = ((k % 5) as f64, (k / 5) as f64);
                    point(Point3::new(x, y, (x * y).sin()), 0, b, (x, y))
                })
                .collect(),
            merged: 0,
        };
        let out = refine(&raw, &RefineOptions::default()).unwrap();
        for (p, r) in out.points.iter().zip(&out.raw) {
            assert!((p - r).norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let raw = RawSurface::<f64>::default();
        assert!(matches!(refine(&raw, &RefineOptions::default()), Err(Error::Empty(_))));
        let b = Barycentric::new(1.0, 0.0, 0.0);
        let raw = RawSurface {
            points: vec![point(Point3::origin(), 0, b, (0.0, 0.0))],
            merged: 0,
        };
        let opts = RefineOptions {
            lambda: 0.0,
            ..Default::default()
        };
        assert!(refine(&raw, &opts).is_err());
    }
}

#[cfg(test)]
mod superpose_tests {
    use super::*;
    use crate::align::{lift_to_facet, overlap_correspondences};
    use crate::synth::oracle::{frontal_mesh, true_patches};
    use crate::synth::HeightSurface;

    fn plane_sets() -> (CoarseMesh<f64>, Vec<FacetPointSet<f64>>, Vec<PatchCorrection<f64>>) {
        let plane = HeightSurface::Plane {
            a: 0.1,
            b: -0.2,
            c: 0.3,
        };
        let mesh = frontal_mesh(&plane, 3, 0.0, 1).unwrap();
        let (rasters, fields) = true_patches(&mesh, &plane, 1.3, 300).unwrap();
        let sets: Vec<_> = fields
            .iter()
            .zip(&rasters)
            .map(|(f, r)| lift_to_facet(f, r).unwrap())
            .collect();
        let corr = sets
            .iter()
            .map(|s| PatchCorrection::identity(s.triangle_id, 0.0))
            .collect();
        (mesh, sets, corr)
    }

    #[test]
    fn single_patch_is_unchanged() {
        let (mesh, sets, corr) = plane_sets();
        let raw = superpose(&sets[..1], &corr[..1], &[], &mesh).unwrap();
        assert_eq!(raw.points.len(), sets[0].len());
        for (p, q) in raw.points.iter().zip(sets[0].corrected_points(&corr[0])) {
            assert_eq!(p.position, q);
        }
    }

    #[test]
    fn disjoint_patches_concatenate() {
        let (mesh, sets, corr) = plane_sets();
        let raw = superpose(&sets, &corr, &[], &mesh).unwrap();
        assert_eq!(raw.points.len(), sets.iter().map(|s| s.len()).sum::<usize>());
        assert!(superpose::<f64>(&[], &[], &[], &mesh).is_err());
    }

    #[test]
    fn coplanar_duplicates_collapse_onto_the_plane() {
        let (mesh, sets, corr) = plane_sets();
        let (a, b) = mesh.adjacent_pairs()[0];
        let ov = overlap_correspondences(&mesh, &sets[a], &sets[b], 1.5 * sets[a].pitch.max(sets[b].pitch)).unwrap();
        let pick = [sets[a].clone(), sets[b].clone()];
        let c = [corr[a].clone(), corr[b].clone()];
        let raw = superpose(&pick, &c, std::slice::from_ref(&ov), &mesh).unwrap();
        assert_eq!(raw.merged, ov.pairs.len());
        assert_eq!(raw.points.len(), sets[a].len() + sets[b].len() - ov.pairs.len());
        for p in &raw.points {
            let z = 0.1 * p.position.x - 0.2 * p.position.y + 0.3;
            assert!((p.position.z - z).abs() < 1e-12);
        }
    }
}

#[cfg(test)]
mod step_tests {
    use super::*;

    /// Square of side `size` pixels split along its diagonal; the lower-left triangle is
    /// raised by `step`.
    pub(crate) fn step_surface(size: usize, step: f64) -> RawSurface<f64> {
        let s = size as f64;
        let a = [Point2::new(0.0, 0.0), Point2::new(s, 0.0), Point2::new(s, s)];
        let b = [Point2::new(0.0, 0.0), Point2::new(s, s), Point2::new(0.0, s)];
        let mut points = Vec::new();
        for y in 0..size {
            for x in 0..size {
                let p = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                let (tri, id, z) = if x > y { (&a, 0, 0.0) } else { (&b, 1, step) };
                let bc = crate::geometry::barycentric_unchecked(&p, tri);
                points.push(SurfacePoint {
                    position: Point3::new(p.x * 0.01, p.y * 0.01, z),
                    triangle_id: id,
                    template_index: y * size + x,
                    barycentric: bc,
                    pixel: Point2::new(x as f64, y as f64),
                });
            }
        }
        RawSurface { points, merged: 0 }
    }

    pub(crate) fn seam_and_center(out: &DenseSurface<f64>, size: usize) -> (f64, f64, f64) {
        let at = out.lookup();
        let z = |x: usize, y: usize| out.points[at[&(x as i64, y as i64)]].z;
        let r = |x: usize, y: usize| out.raw[at[&(x as i64, y as i64)]].z;
        let mut seam = 0.0;
        for d in 1..size - 1 {
            seam += (z(d + 1, d) - z(d, d)).abs();
        }
        seam /= (size - 2) as f64;
        let s = size as f64;
        let ca = ((2.0 * s / 3.0) as usize, (s / 3.0) as usize);
        let cb = ((s / 3.0) as usize, (2.0 * s / 3.0) as usize);
        (
            seam,
            (z(ca.0, ca.1) - r(ca.0, ca.1)).abs(),
            (z(cb.0, cb.1) - r(cb.0, cb.1)).abs(),
        )
    }

    #[test]
    fn seam_step_is_smoothed() {
        let size = 160;
        let raw = step_surface(size, 1.0);
        let out = refine(&raw, &RefineOptions::default()).unwrap();
        let (seam, ca, cb) = seam_and_center(&out, size);
        assert!(seam <= 0.1, "seam {seam}");
        assert!(ca < 0.02 && cb < 0.02, "{ca} {cb}");
        for w in out.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0]);
        }
    }

    #[test]
    fn large_lambda_keeps_centres() {
        let size = 60;
        let mut raw = step_surface(size, 0.0);
        for p in &mut raw.points {
            p.position.z = (p.position.x * 2.0).sin() * 0.1;
        }
        let opts = RefineOptions {
            lambda: 1e7,
            ..Default::default()
        };
        let out = refine(&raw, &opts).unwrap();
        let (_, ca, cb) = seam_and_center(&out, size);
        assert!(ca < 1e-6 && cb < 1e-6);
    }

    #[test]
    fn constant_surface_is_a_fixed_point() {
        let size = 40;
        let mut raw = step_surface(size, 0.0);
        for p in &mut raw.points {
            p.position = Point3::new(0.3, -0.2, 1.0);
        }
        let once = refine(&raw, &RefineOptions::default()).unwrap();
        let mut again = raw.clone();
        let at = once.lookup();
        for p in &mut again.points {
            let k = at[&(p.pixel.x as i64, p.pixel.y as i64)];
            p.position = once.points[k];
        }
        let twice = refine(&again, &RefineOptions::default()).unwrap();
        for (a, b) in once.points.iter().zip(&twice.points) {
            assert!((a - b).norm() < 1e-8);
            assert!((a - Point3::new(0.3, -0.2, 1.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn rigid_motion_commutes() {
        let size = 50;
        let raw = step_surface(size, 0.3);
        let rot = nalgebra::Rotation3::from_euler_angles(0.2, 0.9, -0.4).into_inner();
        let t = Vector3::new(1.0, -0.5, 2.0);
        let mut moved = raw.clone();
        for p in &mut moved.points {
            p.position = Point3::from(rot * p.position.coords + t);
        }
        let opts = RefineOptions {
            tol: 1e-14,
            max_iter: 5000,
            ..Default::default()
        };
        let a = refine(&raw, &opts).unwrap();
        let b = refine(&moved, &opts).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            assert!((rot * p.coords + t - q.coords).norm() < 1e-8);
        }
    }
}
