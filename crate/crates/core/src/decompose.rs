//! Per-triangle binary masks and masked image patches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{enlarge_triangle, BarycentricMap, CoarseMesh, Triangle2};
use crate::image::ImageFrame;
use crate::scalar::{lit, to_f64, Real};

/// Pixel-center membership slack on barycentric coordinates.
pub const MEMBERSHIP_EPS: f64 = 1e-12;

/// Pixels of one frame covered by one (enlarged) triangle, stored as sorted flat indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMask {
    pub width: usize,
    pub height: usize,
    pub indices: Vec<usize>,
    pub triangle_id: usize,
    pub frame_id: usize,
    /// Set when the triangle is outside the image, back-facing, or untracked in this frame.
    pub out_of_view: bool,
}

impl PatchMask {
    pub fn empty(width: usize, height: usize, triangle_id: usize, frame_id: usize) -> Self {
        Self {
            width,
            height,
            indices: Vec::new(),
            triangle_id,
            frame_id,
            out_of_view: true,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.indices.binary_search(&(y * self.width + x)).is_ok()
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut m = vec![false; self.width * self.height];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }
}

/// Pixels whose integer centers have all barycentric coordinates `>= -eps` w.r.t. `tri`.
pub fn rasterize_mask<T: Real>(
    tri: &Triangle2<T>,
    width: usize,
    height: usize,
    triangle_id: usize,
    frame_id: usize,
) -> Result<PatchMask> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidParameter {
            name: "image_size",
            reason: format!("{width}x{height}"),
        });
    }
    let map = BarycentricMap::new(tri)?;
    let eps: T = lit(MEMBERSHIP_EPS);
    let lo_x = tri.iter().map(|p| p.x).fold(tri[0].x, |a, b| a.min(b));
    let hi_x = tri.iter().map(|p| p.x).fold(tri[0].x, |a, b| a.max(b));
    let lo_y = tri.iter().map(|p| p.y).fold(tri[0].y, |a, b| a.min(b));
    let hi_y = tri.iter().map(|p| p.y).fold(tri[0].y, |a, b| a.max(b));
    let x0 = to_f64(lo_x.floor()).max(0.0);
    let y0 = to_f64(lo_y.floor()).max(0.0);
    let x1 = to_f64(hi_x.ceil()).min(width as f64 - 1.0);
    let y1 = to_f64(hi_y.ceil()).min(height as f64 - 1.0);
    let mut indices = Vec::new();
    if x0 <= x1 && y0 <= y1 {
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let p = nalgebra::Point2::new(lit::<T>(x as f64), lit::<T>(y as f64));
                if map.coords(&p).is_inside(eps) {
                    indices.push(y * width + x);
                }
            }
        }
    }
    Ok(PatchMask {
        width,
        height,
        out_of_view: indices.is_empty(),
        indices,
        triangle_id,
        frame_id,
    })
}

/// Masks of every mesh triangle (enlarged by `factor`) in one frame.
pub fn decompose_frame<T: Real>(mesh: &CoarseMesh<T>, frame: &ImageFrame<T>, factor: T) -> Result<Vec<PatchMask>> {
    let g = frame.frame_id;
    (0..mesh.triangle_count())
        .map(|t| {
            let Some(proj) = mesh.projected(g, t) else {
                return Ok(PatchMask::empty(frame.width, frame.height, t, g));
            };
            if !mesh.is_front_facing(g, t) {
                return Ok(PatchMask::empty(frame.width, frame.height, t, g));
            }
            let enlarged = enlarge_triangle(&proj, factor)?;
            rasterize_mask(&enlarged, frame.width, frame.height, t, g)
        })
        .collect()
}

/// `mask ⊙ frame` as a dense row-major array.
pub fn extract_patch<T: Real>(frame: &ImageFrame<T>, mask: &PatchMask) -> Result<Vec<T>> {
    if frame.width != mask.width || frame.height != mask.height {
        return Err(Error::ShapeMismatch(format!(
            "frame {}x{} vs mask {}x{}",
            frame.width, frame.height, mask.width, mask.height
        )));
    }
    let mut out = vec![T::zero(); frame.pixels.len()];
    for &i in &mask.indices {
        out[i] = frame.pixels[i];
    }
    Ok(out)
}
