//! Registration of every view's patch onto a fronto-parallel template raster and assembly of
//! the multi-view intensity matrix with its observation mask.

use std::path::Path;

use nalgebra::{DMatrix, Point2};
use serde::{Deserialize, Serialize};

use crate::decompose::{PatchMask, MEMBERSHIP_EPS};
use crate::error::{Error, Result};
use crate::geometry::{
    area2d, enlarge_triangle, facet_frame, is_degenerate2, Barycentric, BarycentricMap, FacetFrame, Triangle2,
    Triangle3,
};
use crate::image::{save_rgb_png, ImageFrame};
use crate::scalar::{from_usize, lit, to_f64, Real};

/// Columns observed in fewer frames than this cannot pin down a 4-vector.
pub const MIN_OBSERVATIONS: usize = 4;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RegisterOptions {
    pub tau_dark: f64,
    pub tau_sat: f64,
    /// Upper bound on either side of the template bounding box, in template pixels.
    pub max_template_side: usize,
    pub bilinear: bool,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        Self {
            tau_dark: 0.02,
            tau_sat: 0.98,
            max_template_side: 64,
            bilinear: true,
        }
    }
}

/// Regular grid over the enlarged template triangle; `pixels` are the grid nodes inside it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemplateRaster<T: Real> {
    pub triangle_id: usize,
    pub frame: FacetFrame<T>,
    /// The facet's un-enlarged 3D vertices.
    pub facet: Triangle3<T>,
    pub enlargement: T,
    /// Enlarged template triangle in template coordinates.
    pub triangle: Triangle2<T>,
    pub origin: Point2<T>,
    pub pitch: T,
    pub cols: usize,
    pub rows: usize,
    /// Sorted flat indices `row * cols + col` of grid nodes inside `triangle`.
    pub pixels: Vec<usize>,
    /// Barycentric coordinates of each entry of `pixels` w.r.t. `triangle`.
    pub barycentrics: Vec<Barycentric<T>>,
}

impl<T: Real> TemplateRaster<T> {
    /// Lays a grid with roughly `target_pixels` nodes over the enlarged template of `facet`.
    pub fn new(
        facet: &Triangle3<T>,
        triangle_id: usize,
        enlargement: T,
        target_pixels: usize,
        max_side: usize,
    ) -> Result<Self> {
        if max_side < 2 {
            return Err(Error::InvalidParameter {
                name: "max_template_side",
                reason: "must be at least 2".into(),
            });
        }
        let frame = facet_frame(facet)?;
        let triangle = enlarge_triangle(&frame.template2d, enlargement)?;
        let area = area2d(&triangle);
        let target = from_usize::<T>(target_pixels.max(1));
        let (lo, hi) = bounds(&triangle);
        let side = (hi.x - lo.x).max(hi.y - lo.y);
        let min_pitch = side / from_usize::<T>(max_side - 1);
        let pitch = (area / target).sqrt().max(min_pitch);
        let cols = to_f64(((hi.x - lo.x) / pitch).floor()) as usize + 1;
        let rows = to_f64(((hi.y - lo.y) / pitch).floor()) as usize + 1;
        let map = BarycentricMap::new(&triangle)?;
        let eps: T = lit(MEMBERSHIP_EPS);
        let mut pixels = Vec::new();
        let mut barycentrics = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let p = Point2::new(lo.x + from_usize::<T>(c) * pitch, lo.y + from_usize::<T>(r) * pitch);
                let b = map.coords(&p);
                if b.is_inside(eps) {
                    pixels.push(r * cols + c);
                    barycentrics.push(b);
                }
            }
        }
        Ok(Self {
            triangle_id,
            frame,
            facet: *facet,
            enlargement,
            triangle,
            origin: lo,
            pitch,
            cols,
            rows,
            pixels,
            barycentrics,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Template-plane position of grid node `(col, row)`.
    pub fn node(&self, col: usize, row: usize) -> Point2<T> {
        Point2::new(
            self.origin.x + from_usize::<T>(col) * self.pitch,
            self.origin.y + from_usize::<T>(row) * self.pitch,
        )
    }

    pub fn pixel_position(&self, k: usize) -> Point2<T> {
        let f = self.pixels[k];
        self.node(f % self.cols, f / self.cols)
    }
}

fn bounds<T: Real>(tri: &Triangle2<T>) -> (Point2<T>, Point2<T>) {
    let mut lo = tri[0];
    let mut hi = tri[0];
    for p in &tri[1..] {
        lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    (lo, hi)
}

/// One frame's contribution to a patch stack.
#[derive(Clone, Debug, PartialEq)]
pub struct RegisteredRow<T: Real> {
    pub frame_id: usize,
    pub values: Vec<T>,
    /// The template pixel mapped inside the source image and mask.
    pub mapped: Vec<bool>,
}

/// Samples `frame` at the source-triangle positions of every template pixel.
///
/// `source` is the enlarged projection of the facet in `frame`; template barycentrics are
/// transferred to it and the intensity is read by bilinear (or nearest) interpolation.
pub fn register_patch<T: Real>(
    frame: &ImageFrame<T>,
    mask: &PatchMask,
    source: &Triangle2<T>,
    raster: &TemplateRaster<T>,
    bilinear: bool,
) -> Result<RegisteredRow<T>> {
    let b = raster.len();
    let mut row = RegisteredRow {
        frame_id: frame.frame_id,
        values: vec![T::zero(); b],
        mapped: vec![false; b],
    };
    if mask.is_empty() || mask.out_of_view {
        return Ok(row);
    }
    if is_degenerate2(source) {
        return Err(Error::DegenerateTriangle);
    }
    for (k, bc) in raster.barycentrics.iter().enumerate() {
        let p = bc.point2(source);
        let sample = if bilinear {
            frame.bilinear(p.x, p.y)
        } else {
            frame.nearest(p.x, p.y)
        };
        if let Some(v) = sample {
            let (xr, yr) = (to_f64(p.x.round()), to_f64(p.y.round()));
            if mask.contains(xr as usize, yr as usize) {
                row.values[k] = v;
                row.mapped[k] = true;
            }
        }
    }
    Ok(row)
}

/// Multi-view intensity matrix `J` (f×b) with observation mask `D`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchStack<T: Real> {
    pub triangle_id: usize,
    pub frame_ids: Vec<usize>,
    pub intensities: DMatrix<T>,
    pub observed: DMatrix<bool>,
    pub template_pixels: Vec<usize>,
    /// `(rows, cols)` of the template grid.
    pub template_shape: (usize, usize),
    /// Columns observed in fewer than [`MIN_OBSERVATIONS`] frames.
    pub weak_columns: Vec<usize>,
}

impl<T: Real> PatchStack<T> {
    pub fn frames(&self) -> usize {
        self.intensities.nrows()
    }

    pub fn columns(&self) -> usize {
        self.intensities.ncols()
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|b| **b).count()
    }

    pub fn column_observations(&self, i: usize) -> usize {
        self.observed.column(i).iter().filter(|b| **b).count()
    }

    pub fn mask_matrix(&self) -> DMatrix<T> {
        self.observed.map(|b| if b { T::one() } else { T::zero() })
    }
}

/// Stacks registered rows; entries outside `[tau_dark, tau_sat]` become unobserved.
pub fn assemble_stack<T: Real>(
    rows: &[RegisteredRow<T>],
    raster: &TemplateRaster<T>,
    tau_dark: f64,
    tau_sat: f64,
) -> Result<PatchStack<T>> {
    if rows.is_empty() {
        return Err(Error::Empty("registered rows"));
    }
    let b = raster.len();
    if let Some(r) = rows.iter().find(|r| r.values.len() != b || r.mapped.len() != b) {
        return Err(Error::ShapeMismatch(format!(
            "row for frame {} has {} entries, template has {}",
            r.frame_id,
            r.values.len(),
            b
        )));
    }
    let f = rows.len();
    let dark: T = lit(tau_dark);
    let sat: T = lit(tau_sat);
    let intensities = DMatrix::from_fn(f, b, |g, i| rows[g].values[i]);
    let observed = DMatrix::from_fn(f, b, |g, i| {
        let v = rows[g].values[i];
        rows[g].mapped[i] && v >= dark && v <= sat
    });
    let weak_columns = (0..b)
        .filter(|&i| observed.column(i).iter().filter(|x| **x).count() < MIN_OBSERVATIONS)
        .collect();
    Ok(PatchStack {
        triangle_id: raster.triangle_id,
        frame_ids: rows.iter().map(|r| r.frame_id).collect(),
        intensities,
        observed,
        template_pixels: raster.pixels.clone(),
        template_shape: (raster.rows, raster.cols),
        weak_columns,
    })
}

/// `1 - (observed entries) / (f * b)`.
pub fn missing_fraction<T: Real>(stack: &PatchStack<T>) -> f64 {
    let total = stack.frames() * stack.columns();
    if total == 0 {
        return 1.0;
    }
    1.0 - stack.observed_count() as f64 / total as f64
}

/// Writes every frame's registered template side by side; missing entries are green,
/// pixels outside the template triangle are black.
pub fn save_stack_png<T: Real>(stack: &PatchStack<T>, path: &Path) -> Result<()> {
    let (rows, cols) = stack.template_shape;
    let f = stack.frames();
    let width = cols * f;
    let mut rgb = vec![[0.0; 3]; rows * width];
    for g in 0..f {
        for (i, &flat) in stack.template_pixels.iter().enumerate() {
            let (r, c) = (flat / cols, flat % cols);
            // template y grows upward; flip so the image reads naturally
            let idx = (rows - 1 - r) * width + g * cols + c;
            rgb[idx] = if stack.observed[(g, i)] {
                let v = to_f64(stack.intensities[(g, i)]);
                [v, v, v]
            } else {
                [0.0, 1.0, 0.0]
            };
        }
    }
    save_rgb_png(path, width, rows, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;

    fn flat_facet(scale: f64) -> Triangle3<f64> {
        [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(scale, 0.0, 0.0),
            Point3::new(0.0, scale, 0.0),
        ]
    }

    #[test]
    fn raster_has_about_target_pixels() {
        let r = TemplateRaster::new(&flat_facet(1.0), 0, 1.3, 500, 64).unwrap();
        let n = r.len() as f64;
        assert!((n - 500.0).abs() < 0.15 * 500.0, "{n}");
        for (k, b) in r.barycentrics.iter().enumerate() {
            assert!((b.sum() - 1.0).abs() < 1e-12);
            let p = b.point2(&r.triangle);
            assert!((p - r.pixel_position(k)).norm() < 1e-12);
        }
    }

    #[test]
    fn raster_respects_side_cap() {
        let r = TemplateRaster::new(&flat_facet(1.0), 0, 1.3, 100_000, 64).unwrap();
        assert!(r.cols <= 64 && r.rows <= 64);
    }

    #[test]
    fn missing_fraction_values() {
        let raster = TemplateRaster::new(&flat_facet(1.0), 3, 1.0, 10, 64).unwrap();
        let b = raster.len();
        let full = RegisteredRow {
            frame_id: 0,
            values: vec![0.5; b],
            mapped: vec![true; b],
        };
        let none = RegisteredRow {
            frame_id: 1,
            values: vec![0.5; b],
            mapped: vec![false; b],
        };
        let s = assemble_stack(&[full.clone(), full.clone()], &raster, 0.02, 0.98).unwrap();
        assert_eq!(missing_fraction(&s), 0.0);
        let s = assemble_stack(&[none.clone(), none.clone()], &raster, 0.02, 0.98).unwrap();
        assert_eq!(missing_fraction(&s), 1.0);
        let s = assemble_stack(&[full, none], &raster, 0.02, 0.98).unwrap();
        assert_eq!(missing_fraction(&s), 0.5);
        assert_eq!(s.triangle_id, 3);
        assert_eq!(s.weak_columns.len(), b);
    }

    #[test]
    fn saturated_row_is_unobserved() {
        let raster = TemplateRaster::new(&flat_facet(1.0), 0, 1.0, 20, 64).unwrap();
        let b = raster.len();
        let rows: Vec<_> = (0..5)
            .map(|g| RegisteredRow {
                frame_id: g,
                values: vec![if g == 2 { 1.0 } else { 0.4 + 0.1 * g as f64 }; b],
                mapped: vec![true; b],
            })
            .collect();
        let s = assemble_stack(&rows, &raster, 0.02, 0.98).unwrap();
        assert!(s.observed.row(2).iter().all(|x| !x));
        assert!(s.observed.row(1).iter().all(|x| *x));
        assert!(s.weak_columns.is_empty());
    }

    #[test]
    fn inconsistent_rows_are_rejected() {
        let raster = TemplateRaster::new(&flat_facet(1.0), 0, 1.0, 20, 64).unwrap();
        let row = RegisteredRow {
            frame_id: 0,
            values: vec![0.5; 3],
            mapped: vec![true; 3],
        };
        assert!(assemble_stack(&[row], &raster, 0.02, 0.98).is_err());
    }
}
