use std::collections::{BTreeMap, HashMap};

use log::warn;
use nalgebra::{Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::{delaunay_triangulation, facet_normal, orient2d, Triangle2, Triangle3};
use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Filters applied to the reference-view triangulation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshOptions {
    /// Longest edge squared over twice the area; larger triangles are dropped.
    pub max_aspect: f64,
    /// Minimum reference-view area in square pixels.
    pub min_area: f64,
}

impl Default for MeshOptions {
    fn default() -> Self {
        Self {
            max_aspect: 20.0,
            min_area: 4.0,
        }
    }
}

/// Sparse 3D points, their per-frame projections, and the reference-view triangulation.
///
/// Triangles are wound so that the right-hand facet normal faces the reference camera,
/// i.e. they have negative [`orient2d`] in y-down pixel coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoarseMesh<T: Real> {
    pub vertices: Vec<Point3<T>>,
    pub triangles: Vec<[usize; 3]>,
    /// `projections[g][i]` is the pixel position of point `i` in frame `g`, `None` if untracked.
    pub projections: Vec<Vec<Option<Point2<T>>>>,
    pub reference_view: usize,
    /// Triangles removed by the aspect/area filter.
    pub dropped: Vec<[usize; 3]>,
}

/// Triangulates the reference-view projections and applies the index triples to the 3D points.
pub fn build_mesh<T: Real>(
    points3d: &[Point3<T>],
    projections: &[Vec<Option<Point2<T>>>],
    reference_view: usize,
    opts: &MeshOptions,
) -> Result<CoarseMesh<T>> {
    let p = points3d.len();
    if p < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: p });
    }
    if reference_view >= projections.len() {
        return Err(Error::InvalidParameter {
            name: "reference_view",
            reason: format!("{} frames available, got index {}", projections.len(), reference_view),
        });
    }
    for (g, row) in projections.iter().enumerate() {
        if row.len() != p {
            return Err(Error::ShapeMismatch(format!(
                "frame {} has {} projections for {} points",
                g,
                row.len(),
                p
            )));
        }
    }
    let reference: Vec<Point2<T>> = projections[reference_view]
        .iter()
        .enumerate()
        .map(|(i, q)| q.ok_or(Error::UntrackedInReference(i)))
        .collect::<Result<_>>()?;

    let raw = delaunay_triangulation(&reference)?;
    let max_aspect: T = lit(opts.max_aspect);
    let min_area: T = lit(opts.min_area);
    let mut triangles = Vec::with_capacity(raw.len());
    let mut dropped = Vec::new();
    for [a, b, c] in raw {
        let tri2 = [reference[a], reference[b], reference[c]];
        let area2 = orient2d(&tri2[0], &tri2[1], &tri2[2]).abs();
        let longest = (0..3)
            .map(|k| (tri2[(k + 1) % 3] - tri2[k]).norm_squared())
            .fold(T::zero(), |m, x| m.max(x));
        let aspect = longest / area2;
        let tri3 = [points3d[a], points3d[b], points3d[c]];
        if area2 * lit(0.5) < min_area || aspect > max_aspect || facet_normal(&tri3).is_err() {
            warn!("dropping sliver triangle ({a}, {b}, {c})");
            dropped.push([a, c, b]);
            continue;
        }
        // counter-clockwise in the numeric sense becomes clockwise after the swap
        triangles.push([a, c, b]);
    }

    Ok(CoarseMesh {
        vertices: points3d.to_vec(),
        triangles,
        projections: projections.to_vec(),
        reference_view,
        dropped,
    })
}

impl<T: Real> CoarseMesh<T> {
    pub fn frame_count(&self) -> usize {
        self.projections.len()
    }

    pub fn point_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn facet(&self, tri: usize) -> Triangle3<T> {
        self.triangles[tri].map(|i| self.vertices[i])
    }

    /// Projection of triangle `tri` in frame `g`; `None` when a vertex is untracked.
    pub fn projected(&self, g: usize, tri: usize) -> Option<Triangle2<T>> {
        let t = self.triangles[tri];
        Some([
            self.projections[g][t[0]]?,
            self.projections[g][t[1]]?,
            self.projections[g][t[2]]?,
        ])
    }

    /// The facet faces the camera of frame `g` when its winding matches the reference view.
    pub fn is_front_facing(&self, g: usize, tri: usize) -> bool {
        let (Some(w), Some(r)) = (self.projected(g, tri), self.projected(self.reference_view, tri)) else {
            return false;
        };
        let sg = orient2d(&w[0], &w[1], &w[2]);
        let sr = orient2d(&r[0], &r[1], &r[2]);
        sg * sr > T::zero()
    }

    /// Map from undirected edge to the (one or two) triangles using it.
    pub fn edge_map(&self) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                map.entry((a.min(b), a.max(b))).or_default().push(t);
            }
        }
        map
    }

    /// Pairs of triangles sharing an edge, ordered `(lower, higher)` and sorted.
    pub fn adjacent_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = self
            .edge_map()
            .values()
            .filter(|ts| ts.len() == 2)
            .map(|ts| (ts[0].min(ts[1]), ts[0].max(ts[1])))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }

    pub fn shared_edge(&self, a: usize, b: usize) -> Option<(usize, usize)> {
        let ta = self.triangles[a];
        let tb = self.triangles[b];
        let common: Vec<usize> = ta.iter().copied().filter(|v| tb.contains(v)).collect();
        (a != b && common.len() == 2).then(|| (common[0], common[1]))
    }

    /// Connected components of the triangle adjacency graph restricted to `active` triangles.
    pub fn components(&self, active: &[bool]) -> Vec<Vec<usize>> {
        let n = self.triangles.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            let mut y = x;
            while p[y] != r {
                let next = p[y];
                p[y] = r;
                y = next;
            }
            r
        }
        for (a, b) in self.adjacent_pairs() {
            if active[a] && active[b] {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for t in (0..n).filter(|&t| active[t]) {
            let r = find(&mut parent, t);
            groups.entry(r).or_default().push(t);
        }
        groups.into_values().collect()
    }

    /// Area-weighted vertex normals from the facet normals.
    pub fn vertex_normals(&self) -> Vec<Vector3<T>> {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for tri in &self.triangles {
            let [a, b, c] = *tri;
            let n = (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a]));
            for v in [a, b, c] {
                acc[v] += n;
            }
        }
        acc.into_iter()
            .map(|n| {
                let len = n.norm();
                if len > T::zero() {
                    n / len
                } else {
                    Vector3::z()
                }
            })
            .collect()
    }

    /// Applies `x -> r x + t` to every vertex.
    pub fn transformed(&self, r: &nalgebra::Matrix3<T>, t: &Vector3<T>) -> Self {
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v = Point3::from(r * v.coords + t);
        }
        out
    }

    pub fn vertex_lookup(&self) -> HashMap<usize, Vec<usize>> {
        let mut map: HashMap<usize, Vec<usize>> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            for &v in tri {
                map.entry(v).or_default().push(t);
            }
        }
        map
    }
}
