//! Text formats: sparse tracks in, point clouds, meshes and heatmaps out.
//!
//! Sparse-point file:
//!
//! ```text
//! # comments and blank lines are ignored
//! points 3
//! frames 2
//! 0.0 0.0 1.0          one `x y z` line per point
//! 1.0 0.0 1.0
//! 0.0 1.0 1.0
//! frame left.png       one block per frame: a label, then one `u v` line per point
//! 10.5 20.0
//! nan nan              untracked in this frame
//! 30.0 41.5
//! frame right.png
//! ...
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Point2, Point3};

use crate::error::{Error, Result};
use crate::image::save_rgb_png;
use crate::refine::DenseSurface;
use crate::scalar::{lit, to_f64, Real};

/// Sparse 3D points with their per-frame projections.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseInput<T: Real> {
    pub points3d: Vec<Point3<T>>,
    /// Frame labels, usually image file names.
    pub labels: Vec<String>,
    pub projections: Vec<Vec<Option<Point2<T>>>>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn numbers<const N: usize>(line: usize, text: &str) -> Result<[f64; N]> {
    let mut out = [0.0; N];
    let mut it = text.split_whitespace();
    for v in &mut out {
        let tok = it
            .next()
            .ok_or_else(|| parse_err(line, format!("expected {N} numbers")))?;
        *v = tok
            .parse()
            .map_err(|_| parse_err(line, format!("not a number: {tok}")))?;
    }
    if it.next().is_some() {
        return Err(parse_err(line, format!("expected {N} numbers")));
    }
    Ok(out)
}

fn header(line: usize, text: &str, key: &str) -> Result<usize> {
    let rest = text
        .strip_prefix(key)
        .ok_or_else(|| parse_err(line, format!("expected `{key} <count>`")))?;
    rest.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("bad count in `{text}`")))
}

pub fn parse_sparse<T: Real>(text: &str) -> Result<SparseInput<T>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| parse_err(0, format!("unexpected end of file, expected {what}")))
    };
    let (n, l) = next("points header")?;
    let p = header(n, l, "points")?;
    let (n, l) = next("frames header")?;
    let f = header(n, l, "frames")?;
    let mut points3d = Vec::with_capacity(p);
    for _ in 0..p {
        let (n, l) = next("a point")?;
        let [x, y, z] = numbers::<3>(n, l)?;
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(parse_err(n, "3D points must be finite"));
        }
        points3d.push(Point3::new(lit(x), lit(y), lit(z)));
    }
    let mut labels = Vec::with_capacity(f);
    let mut projections = Vec::with_capacity(f);
    for _ in 0..f {
        let (n, l) = next("a frame block")?;
        let label = l
            .strip_prefix("frame")
            .map(str::trim)
            .ok_or_else(|| parse_err(n, "expected `frame <label>`"))?;
        labels.push(label.to_string());
        let mut row = Vec::with_capacity(p);
        for _ in 0..p {
            let (n, l) = next("a projection")?;
            let [u, v] = numbers::<2>(n, l)?;
            row.push(if u.is_finite() && v.is_finite() {
                Some(Point2::new(lit(u), lit(v)))
            } else {
                None
            });
        }
        projections.push(row);
    }
    if let Some((n, _)) = lines.next() {
        return Err(parse_err(n, "trailing content"));
    }
    Ok(SparseInput {
        points3d,
        labels,
        projections,
    })
}

pub fn format_sparse<T: Real>(input: &SparseInput<T>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "points {}", input.points3d.len());
    let _ = writeln!(s, "frames {}", input.labels.len());
    for p in &input.points3d {
        let _ = writeln!(s, "{:?} {:?} {:?}", to_f64(p.x), to_f64(p.y), to_f64(p.z));
    }
    for (label, row) in input.labels.iter().zip(&input.projections) {
        let _ = writeln!(s, "frame {label}");
        for q in row {
            match q {
                Some(q) => {
                    let _ = writeln!(s, "{:?} {:?}", to_f64(q.x), to_f64(q.y));
                }
                None => s.push_str("nan nan\n"),
            }
        }
    }
    s
}

pub fn read_sparse<T: Real>(path: &Path) -> Result<SparseInput<T>> {
    parse_sparse(&fs::read_to_string(path)?)
}

pub fn write_sparse<T: Real>(path: &Path, input: &SparseInput<T>) -> Result<()> {
    fs::write(path, format_sparse(input))?;
    Ok(())
}

/// ASCII PLY point cloud.
pub fn write_ply<T: Real>(path: &Path, points: &[Point3<T>]) -> Result<()> {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    );
    for p in points {
        let _ = writeln!(s, "{} {} {}", to_f64(p.x), to_f64(p.y), to_f64(p.z));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Triangles over the reference-pixel grid of a dense surface (two per complete 2×2 block).
pub fn grid_faces<T: Real>(surface: &DenseSurface<T>) -> Vec<[usize; 3]> {
    let at = surface.lookup();
    let mut faces = Vec::new();
    for (k, &(x, y)) in surface.pixels.iter().enumerate() {
        let (Some(&r), Some(&d), Some(&rd)) = (at.get(&(x + 1, y)), at.get(&(x, y + 1)), at.get(&(x + 1, y + 1)))
        else {
            continue;
        };
        faces.push([k, d, r]);
        faces.push([r, d, rd]);
    }
    faces
}

/// Wavefront OBJ with 1-based face indices.
pub fn write_obj<T: Real>(path: &Path, vertices: &[Point3<T>], faces: &[[usize; 3]]) -> Result<()> {
    let mut s = String::new();
    for p in vertices {
        let _ = writeln!(s, "v {} {} {}", to_f64(p.x), to_f64(p.y), to_f64(p.z));
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    fs::write(path, s)?;
    Ok(())
}

/// Blue (0) to red (`max`) ramp.
fn ramp(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [t, 1.0 - (2.0 * t - 1.0).abs(), 1.0 - t]
}

/// Colours every reference pixel of the surface by `values` (black elsewhere).
pub fn write_heatmap<T: Real>(path: &Path, surface: &DenseSurface<T>, values: &[f64]) -> Result<()> {
    if values.len() != surface.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {} surface points",
            values.len(),
            surface.len()
        )));
    }
    if surface.is_empty() {
        return Err(Error::Empty("surface"));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for &(x, y) in &surface.pixels {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let (w, h) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
    let max = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
        .max(1e-300);
    let mut rgb = vec![[0.0; 3]; w * h];
    for (&(x, y), v) in surface.pixels.iter().zip(values) {
        rgb[(y - y0) as usize * w + (x - x0) as usize] = ramp(v / max);
    }
    save_rgb_png(path, w, h, &rgb)
}
