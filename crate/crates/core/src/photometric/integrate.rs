//! Normal-field integration on a template grid.
//!
//! Gradients come from normals as `p = −n_x/n_z`, `q = −n_y/n_z`. Nodes without a usable
//! normal get gradients by harmonic (diffusion) fill. The least-squares height field for
//! forward differences is then the solution of a Neumann Poisson problem on the bounding grid,
//! which the orthonormal DCT-II diagonalizes exactly.

use nalgebra::{DMatrix, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::PhotometricFactors;
use crate::error::{Error, Result};
use crate::register::{PatchStack, TemplateRaster, MIN_OBSERVATIONS};
use crate::scalar::{from_usize, lit, Real};

/// Lower bound applied to `n_z` before forming gradients.
pub const NZ_CLAMP: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationBackend {
    /// DCT Poisson solve on the full bounding grid.
    #[default]
    Frequency,
    /// Conjugate-gradient Poisson solve restricted to the template pixels.
    MaskedPoisson,
}

/// Rectangular grid and the subset of its nodes that belong to the patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec<T: Real> {
    pub rows: usize,
    pub cols: usize,
    pub origin: Point2<T>,
    pub pitch: T,
    /// Sorted flat indices `row * cols + col`.
    pub pixels: Vec<usize>,
}

impl<T: Real> GridSpec<T> {
    pub fn full(rows: usize, cols: usize, origin: Point2<T>, pitch: T) -> Self {
        Self {
            rows,
            cols,
            origin,
            pitch,
            pixels: (0..rows * cols).collect(),
        }
    }

    pub fn from_raster(r: &TemplateRaster<T>) -> Self {
        Self {
            rows: r.rows,
            cols: r.cols,
            origin: r.origin,
            pitch: r.pitch,
            pixels: r.pixels.clone(),
        }
    }

    pub fn node(&self, flat: usize) -> Point2<T> {
        let (r, c) = (flat / self.cols, flat % self.cols);
        Point2::new(
            self.origin.x + from_usize::<T>(c) * self.pitch,
            self.origin.y + from_usize::<T>(r) * self.pitch,
        )
    }
}

/// Integrated elevations of one patch in template coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeightField<T: Real> {
    pub triangle_id: usize,
    pub grid: GridSpec<T>,
    /// Elevation at every node of the bounding grid, zero mean over the patch pixels.
    pub heights: Vec<T>,
    /// Per patch pixel: the gradient came from a solved normal rather than the fill.
    pub valid: Vec<bool>,
    /// Patch pixels whose `n_z` was clamped.
    pub clamped: usize,
}

impl<T: Real> HeightField<T> {
    pub fn len(&self) -> usize {
        self.grid.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.pixels.is_empty()
    }

    /// `(x, y, z)` of patch pixel `k`.
    pub fn point(&self, k: usize) -> Point3<T> {
        let flat = self.grid.pixels[k];
        let p = self.grid.node(flat);
        Point3::new(p.x, p.y, self.heights[flat])
    }

    pub fn points(&self) -> Vec<Point3<T>> {
        (0..self.len()).map(|k| self.point(k)).collect()
    }

    /// Bilinear elevation at template position `(x, y)`; `None` outside the bounding grid.
    pub fn sample(&self, x: T, y: T) -> Option<T> {
        let g = &self.grid;
        let u = (x - g.origin.x) / g.pitch;
        let v = (y - g.origin.y) / g.pitch;
        let umax = from_usize::<T>(g.cols - 1);
        let vmax = from_usize::<T>(g.rows - 1);
        let slack: T = lit(1e-9);
        if !(u >= -slack && v >= -slack && u <= umax + slack && v <= vmax + slack) {
            return None;
        }
        let u = u.max(T::zero()).min(umax);
        let v = v.max(T::zero()).min(vmax);
        let c0 = crate::scalar::to_f64(u.floor()) as usize;
        let r0 = crate::scalar::to_f64(v.floor()) as usize;
        let c1 = (c0 + 1).min(g.cols - 1);
        let r1 = (r0 + 1).min(g.rows - 1);
        let fu = u - u.floor();
        let fv = v - v.floor();
        let h = |r: usize, c: usize| self.heights[r * g.cols + c];
        let top = h(r0, c0) * (T::one() - fu) + h(r0, c1) * fu;
        let bot = h(r1, c0) * (T::one() - fu) + h(r1, c1) * fu;
        Some(top * (T::one() - fv) + bot * fv)
    }
}

/// Orthonormal DCT-II matrix: row `k` is the `k`-th basis vector.
fn dct_matrix<T: Real>(n: usize) -> DMatrix<T> {
    let pi = T::pi();
    let nn = from_usize::<T>(n);
    DMatrix::from_fn(n, n, |k, j| {
        let s = if k == 0 {
            (T::one() / nn).sqrt()
        } else {
            (lit::<T>(2.0) / nn).sqrt()
        };
        s * (pi * (from_usize::<T>(j) + lit(0.5)) * from_usize::<T>(k) / nn).cos()
    })
}

/// Solves `(Dxᵀ Dx + Dyᵀ Dy) z = b` with Neumann boundaries; the constant mode is set to zero.
fn poisson_dct<T: Real>(b: &DMatrix<T>) -> DMatrix<T> {
    let (rows, cols) = b.shape();
    let cr = dct_matrix::<T>(rows);
    let cc = dct_matrix::<T>(cols);
    let mut hat = &cr * b * cc.transpose();
    let pi = T::pi();
    let two: T = lit(2.0);
    for r in 0..rows {
        let lr = two - two * (pi * from_usize::<T>(r) / from_usize::<T>(rows)).cos();
        for c in 0..cols {
            let lc = two - two * (pi * from_usize::<T>(c) / from_usize::<T>(cols)).cos();
            let den = lr + lc;
            hat[(r, c)] = if r == 0 && c == 0 { T::zero() } else { hat[(r, c)] / den };
        }
    }
    cr.transpose() * hat * cc
}

/// Gauss-Seidel harmonic fill of `values` at nodes where `known` is false.
fn diffuse_fill<T: Real>(values: &mut [T], known: &[bool], rows: usize, cols: usize) {
    let nk = known.iter().filter(|k| **k).count();
    if nk == 0 || nk == values.len() {
        return;
    }
    let mean = values
        .iter()
        .zip(known)
        .filter(|(_, k)| **k)
        .fold(T::zero(), |a, (v, _)| a + *v)
        / from_usize::<T>(nk);
    for (v, k) in values.iter_mut().zip(known) {
        if !*k {
            *v = mean;
        }
    }
    let omega: T = lit(1.8);
    let scale = values.iter().fold(T::zero(), |a, v| a.max(v.abs())) + lit(1e-300);
    for _ in 0..(4 * (rows + cols)).max(200) {
        let mut change = T::zero();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if known[i] {
                    continue;
                }
                let mut s = T::zero();
                let mut n = 0usize;
                if r > 0 {
                    s += values[i - cols];
                    n += 1;
                }
                if r + 1 < rows {
                    s += values[i + cols];
                    n += 1;
                }
                if c > 0 {
                    s += values[i - 1];
                    n += 1;
                }
                if c + 1 < cols {
                    s += values[i + 1];
                    n += 1;
                }
                if n == 0 {
                    continue;
                }
                let target = s / from_usize::<T>(n);
                let next = values[i] + (target - values[i]) * omega;
                change = change.max((next - values[i]).abs());
                values[i] = next;
            }
        }
        if change <= scale * lit(1e-12) {
            break;
        }
    }
}

/// Height differences along +x (`cols-1` per row) and +y (`rows-1` per column) from
/// node gradients, averaged at edge midpoints.
fn edge_differences<T: Real>(p: &[T], q: &[T], rows: usize, cols: usize, pitch: T) -> (DMatrix<T>, DMatrix<T>) {
    let half: T = lit(0.5);
    let gx = DMatrix::from_fn(rows, cols.saturating_sub(1), |r, c| {
        (p[r * cols + c] + p[r * cols + c + 1]) * half * pitch
    });
    let gy = DMatrix::from_fn(rows.saturating_sub(1), cols, |r, c| {
        (q[r * cols + c] + q[(r + 1) * cols + c]) * half * pitch
    });
    (gx, gy)
}

/// Right-hand side `Dxᵀ gx + Dyᵀ gy`.
fn divergence<T: Real>(gx: &DMatrix<T>, gy: &DMatrix<T>, rows: usize, cols: usize) -> DMatrix<T> {
    let mut b = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols.saturating_sub(1) {
            b[(r, c)] -= gx[(r, c)];
            b[(r, c + 1)] += gx[(r, c)];
        }
    }
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols {
            b[(r, c)] -= gy[(r, c)];
            b[(r + 1, c)] += gy[(r, c)];
        }
    }
    b
}

/// Conjugate gradients on the graph Laplacian restricted to `inside` nodes.
fn poisson_masked<T: Real>(gx: &DMatrix<T>, gy: &DMatrix<T>, inside: &[bool], rows: usize, cols: usize) -> Vec<T> {
    let n = rows * cols;
    let mut b = vec![T::zero(); n];
    let mut edges: Vec<(usize, usize, T)> = Vec::new();
    for r in 0..rows {
        for c in 0..cols.saturating_sub(1) {
            let (i, j) = (r * cols + c, r * cols + c + 1);
            if inside[i] && inside[j] {
                edges.push((i, j, gx[(r, c)]));
            }
        }
    }
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols {
            let (i, j) = (r * cols + c, (r + 1) * cols + c);
            if inside[i] && inside[j] {
                edges.push((i, j, gy[(r, c)]));
            }
        }
    }
    for &(i, j, g) in &edges {
        b[i] -= g;
        b[j] += g;
    }
    let apply = |x: &[T], out: &mut [T]| {
        out.iter_mut().for_each(|v| *v = T::zero());
        for &(i, j, _) in &edges {
            let d = x[j] - x[i];
            out[i] -= d;
            out[j] += d;
        }
    };
    let count = inside.iter().filter(|v| **v).count().max(1);
    // remove the constant mode from the right-hand side
    let mean = b
        .iter()
        .zip(inside)
        .filter(|(_, k)| **k)
        .fold(T::zero(), |a, (v, _)| a + *v)
        / from_usize::<T>(count);
    for (v, k) in b.iter_mut().zip(inside) {
        if *k {
            *v -= mean;
        }
    }
    crate::linalg::conjugate_gradient(apply, &b, &vec![T::zero(); n], lit(1e-12), 4 * n).0
}

/// Integrates per-pixel normals (template frame, `None` = unknown) into a height field.
pub fn integrate_normal_field<T: Real>(
    normals: &[Option<Vector3<T>>],
    grid: &GridSpec<T>,
    backend: IntegrationBackend,
    triangle_id: usize,
) -> Result<HeightField<T>> {
    if normals.len() != grid.pixels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} normals for {} pixels",
            normals.len(),
            grid.pixels.len()
        )));
    }
    if normals.iter().all(|n| n.is_none()) {
        return Err(Error::EmptyNormalField);
    }
    let (rows, cols) = (grid.rows, grid.cols);
    let size = rows * cols;
    let mut p = vec![T::zero(); size];
    let mut q = vec![T::zero(); size];
    let mut known = vec![false; size];
    let mut inside = vec![false; size];
    let mut clamped = 0;
    let clamp: T = lit(NZ_CLAMP);
    for (k, n) in normals.iter().enumerate() {
        let flat = grid.pixels[k];
        inside[flat] = true;
        if let Some(n) = n {
            let mut nz = n.z;
            if nz < clamp {
                nz = clamp;
                clamped += 1;
            }
            p[flat] = -n.x / nz;
            q[flat] = -n.y / nz;
            known[flat] = true;
        }
    }
    diffuse_fill(&mut p, &known, rows, cols);
    diffuse_fill(&mut q, &known, rows, cols);
    let (gx, gy) = edge_differences(&p, &q, rows, cols, grid.pitch);
    let mut heights: Vec<T> = match backend {
        IntegrationBackend::Frequency => {
            let b = divergence(&gx, &gy, rows, cols);
            let z = poisson_dct(&b);
            (0..size).map(|i| z[(i / cols, i % cols)]).collect()
        }
        IntegrationBackend::MaskedPoisson => {
            let mut z = poisson_masked(&gx, &gy, &inside, rows, cols);
            diffuse_fill(&mut z, &inside, rows, cols);
            z
        }
    };
    let mean = grid.pixels.iter().fold(T::zero(), |a, &i| a + heights[i]) / from_usize::<T>(grid.pixels.len());
    for h in &mut heights {
        *h -= mean;
    }
    Ok(HeightField {
        triangle_id,
        grid: grid.clone(),
        heights,
        valid: normals.iter().map(|n| n.is_some()).collect(),
        clamped,
    })
}

/// Rotates the solved normals into the template frame and integrates them.
/// Columns seen in fewer than four frames or with undefined normals are filled.
pub fn integrate_patch<T: Real>(
    factors: &PhotometricFactors<T>,
    stack: &PatchStack<T>,
    raster: &TemplateRaster<T>,
    backend: IntegrationBackend,
) -> Result<HeightField<T>> {
    if stack.triangle_id != raster.triangle_id {
        return Err(Error::TriangleMismatch {
            expected: raster.triangle_id,
            got: stack.triangle_id,
        });
    }
    let r = raster.frame.rotation;
    let normals: Vec<Option<Vector3<T>>> = (0..stack.columns())
        .map(|i| {
            if stack.column_observations(i) < MIN_OBSERVATIONS {
                return None;
            }
            factors.normal(i).map(|n| r * n)
        })
        .collect();
    integrate_normal_field(&normals, &GridSpec::from_raster(raster), backend, raster.triangle_id)
}

/// Mean absolute discrete Laplacian over interior patch pixels, in inverse length units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curvature<T> {
    pub value: T,
    /// No pixel had all four neighbours inside the patch; `value` is zero.
    pub too_small: bool,
}

pub fn patch_curvature<T: Real>(hf: &HeightField<T>) -> Curvature<T> {
    let g = &hf.grid;
    let mut inside = vec![false; g.rows * g.cols];
    for &i in &g.pixels {
        inside[i] = true;
    }
    let mut acc = T::zero();
    let mut n = 0usize;
    for &i in &g.pixels {
        let (r, c) = (i / g.cols, i % g.cols);
        if r == 0 || c == 0 || r + 1 >= g.rows || c + 1 >= g.cols {
            continue;
        }
        let nb = [i - g.cols, i + g.cols, i - 1, i + 1];
        if nb.iter().all(|&j| inside[j]) {
            let lap = nb.iter().fold(T::zero(), |a, &j| a + hf.heights[j]) - hf.heights[i] * lit(4.0);
            acc += lap.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Curvature {
            value: T::zero(),
            too_small: true,
        };
    }
    Curvature {
        value: acc / from_usize::<T>(n) / (g.pitch * g.pitch),
        too_small: false,
    }
}
