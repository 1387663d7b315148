use nalgebra::{Matrix2, Matrix3, Point3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::HeightSurface;
use crate::error::{Error, Result};

/// `x -> scale · rotation · x + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords * self.scale + self.translation)
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
        }
    }
}

/// Least-squares similarity taking `src` onto `dst`.
pub fn umeyama(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Option<Similarity> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return None;
    }
    let ms = src.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
    let md = dst.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let a = s.coords - ms;
        let b = d.coords - md;
        cov += b * a.transpose();
        var += a.norm_squared();
    }
    cov /= n as f64;
    var /= n as f64;
    if var <= 0.0 {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut dmat = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        dmat[(2, 2)] = -1.0;
    }
    let rotation = u * dmat * vt;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * dmat).trace() / var;
    Some(Similarity {
        scale,
        rotation,
        translation: md - rotation * ms * scale,
    })
}

/// Closest point on the surface (restricted to its `[-1, 1]²` domain) by Gauss-Newton.
pub fn closest_point(surface: &HeightSurface, p: &Point3<f64>) -> Point3<f64> {
    let mut x = p.x.clamp(-1.0, 1.0);
    let mut y = p.y.clamp(-1.0, 1.0);
    for _ in 0..30 {
        let h = surface.height(x, y);
        let (hx, hy) = surface.gradient(x, y);
        let r = Vector3::new(x - p.x, y - p.y, h - p.z);
        let jtj = Matrix2::new(1.0 + hx * hx, hx * hy, hx * hy, 1.0 + hy * hy);
        let jtr = Vector2::new(r.x + hx * r.z, r.y + hy * r.z);
        let Some(step) = jtj.try_inverse().map(|m| m * jtr) else {
            break;
        };
        let nx = (x - step.x).clamp(-1.0, 1.0);
        let ny = (y - step.y).clamp(-1.0, 1.0);
        let moved = (nx - x).abs() + (ny - y).abs();
        x = nx;
        y = ny;
        if moved < 1e-13 {
            break;
        }
    }
    surface.point(x, y)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Mean point-to-surface distance as a percentage of the truth bounding-box diagonal.
    pub mean_percent: f64,
    pub rms_percent: f64,
    pub diagonal: f64,
    /// Per-point distance after alignment, in world units.
    pub distances: Vec<f64>,
    pub alignment: Similarity,
}

/// Mean distance from `points` to the truth surface after a best-fit similarity (ICP with
/// closest-point correspondences), in percent of the truth bounding-box diagonal.
pub fn error_3d(points: &[Point3<f64>], truth: &HeightSurface) -> Result<ErrorReport> {
    let pts: Vec<Point3<f64>> = points
        .iter()
        .copied()
        .filter(|p| p.coords.iter().all(|v| v.is_finite()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Empty("reconstruction overlapping the truth"));
    }
    let (lo, hi) = truth.height_range();
    let diagonal = (8.0 + (hi - lo).powi(2)).sqrt();
    let mut sim = Similarity::identity();
    let mut prev = f64::INFINITY;
    for _ in 0..500 {
        let moved: Vec<Point3<f64>> = pts.iter().map(|p| sim.apply(p)).collect();
        let feet: Vec<Point3<f64>> = moved.iter().map(|p| closest_point(truth, p)).collect();
        let mean = moved.iter().zip(&feet).map(|(a, b)| (a - b).norm()).sum::<f64>() / pts.len() as f64;
        if prev - mean < 1e-14 * diagonal {
            break;
        }
        prev = mean;
        match umeyama(&pts, &feet) {
            Some(s) => sim = s,
            None => break,
        }
    }
    let distances: Vec<f64> = pts
        .iter()
        .map(|p| {
            let q = sim.apply(p);
            (q - closest_point(truth, &q)).norm()
        })
        .collect();
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let rms = (distances.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    Ok(ErrorReport {
        mean_percent: 100.0 * mean / diagonal,
        rms_percent: 100.0 * rms / diagonal,
        diagonal,
        distances,
        alignment: sim,
    })
}
