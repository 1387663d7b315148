//! Stitching integrated height fields back onto the mesh: every patch gets a small correction
//! of its elevations so that neighbouring patches agree in their overlap bands.

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix3, Point2, Point3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{enlarge_triangle3, Barycentric, BarycentricMap, CoarseMesh, Triangle2, Triangle3};
use crate::photometric::HeightField;
use crate::register::TemplateRaster;
use crate::scalar::{from_usize, lit, to_f64, Real};

pub use crate::photometric::{patch_curvature, Curvature};

/// Template pixels of one patch placed on its facet plane, with the raw elevations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FacetPointSet<T: Real> {
    pub triangle_id: usize,
    /// Template pixels transferred onto the (enlarged) facet plane, world coordinates.
    pub base_points: Vec<Point3<T>>,
    /// Integrated elevation of each point along `normal`.
    pub elevations: Vec<T>,
    /// Template position of each point.
    pub template: Vec<Point2<T>>,
    /// Barycentric coordinates of each point w.r.t. the un-enlarged facet.
    pub barycentrics: Vec<Barycentric<T>>,
    /// Unit facet normal.
    pub normal: Vector3<T>,
    /// Rows: template x axis, template y axis, facet normal.
    pub axes: Matrix3<T>,
    /// World point with template coordinates `(0, 0)` on the facet plane.
    pub origin: Point3<T>,
    /// Template position of the facet centroid.
    pub center: Point2<T>,
    /// Enlarged facet in template coordinates.
    pub enlarged: Triangle2<T>,
    /// The un-enlarged facet.
    pub facet: Triangle3<T>,
    pub pitch: T,
    /// Pixels whose elevation came from a solved normal.
    pub observed: usize,
    pub heights: HeightField<T>,
}

impl<T: Real> FacetPointSet<T> {
    pub fn len(&self) -> usize {
        self.base_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base_points.is_empty()
    }

    /// Template coordinates of a world point.
    pub fn to_template(&self, p: &Point3<T>) -> Point2<T> {
        let v = self.axes * (p - self.origin);
        Point2::new(v.x, v.y)
    }

    /// Signed distance of a world point from the facet plane.
    pub fn elevation_of(&self, p: &Point3<T>) -> T {
        self.normal.dot(&(p - self.origin))
    }

    /// Regressor `(x - x_c, y - y_c, z, 1)` for a template position and raw elevation.
    fn regressor(&self, q: &Point2<T>, z: T) -> Vector4<T> {
        Vector4::new(q.x - self.center.x, q.y - self.center.y, z, T::one())
    }

    /// Raw elevation sampled at a template position.
    pub fn sample(&self, q: &Point2<T>) -> Option<T> {
        self.heights.sample(q.x, q.y)
    }

    /// Points after applying the correction.
    pub fn corrected_points(&self, c: &PatchCorrection<T>) -> Vec<Point3<T>> {
        let h = c.vector();
        (0..self.len())
            .map(|k| {
                let e = h.dot(&self.regressor(&self.template[k], self.elevations[k]));
                self.base_points[k] + self.normal * e
            })
            .collect()
    }

    /// Same set after the rigid motion `x -> r x + t`; template coordinates are unchanged.
    pub fn transformed(&self, r: &Matrix3<T>, t: &Vector3<T>) -> Self {
        let mv = |p: &Point3<T>| Point3::from(r * p.coords + t);
        let mut out = self.clone();
        out.base_points = self.base_points.iter().map(mv).collect();
        out.normal = r * self.normal;
        out.axes = self.axes * r.transpose();
        out.origin = mv(&self.origin);
        out.facet = self.facet.map(|p| mv(&p));
        out
    }
}

/// Places every template pixel of `hf` on the enlarged facet by barycentric transfer.
pub fn lift_to_facet<T: Real>(hf: &HeightField<T>, raster: &TemplateRaster<T>) -> Result<FacetPointSet<T>> {
    if hf.triangle_id != raster.triangle_id {
        return Err(Error::TriangleMismatch {
            expected: raster.triangle_id,
            got: hf.triangle_id,
        });
    }
    if hf.grid.pixels != raster.pixels {
        return Err(Error::ShapeMismatch(
            "height field grid differs from the template raster".into(),
        ));
    }
    let map = BarycentricMap::new(&raster.triangle)?;
    let big = enlarge_triangle3(&raster.facet, raster.enlargement);
    let s = raster.enlargement;
    let third = (T::one() - s) / lit(3.0);
    let mut base_points = Vec::with_capacity(hf.len());
    let mut template = Vec::with_capacity(hf.len());
    let mut elevations = Vec::with_capacity(hf.len());
    let mut barycentrics = Vec::with_capacity(hf.len());
    for &flat in &hf.grid.pixels {
        let q = hf.grid.node(flat);
        let b = map.coords(&q);
        base_points.push(b.point3(&big));
        barycentrics.push(Barycentric::new(
            s * b.alpha + third,
            s * b.beta + third,
            s * b.gamma + third,
        ));
        template.push(q);
        elevations.push(hf.heights[flat]);
    }
    let frame = &raster.frame;
    let origin = Point3::from(frame.rotation.transpose() * Vector3::new(T::zero(), T::zero(), frame.plane_offset));
    let t2 = &frame.template2d;
    let center: Point2<T> = Point2::from((t2[0].coords + t2[1].coords + t2[2].coords) / lit::<T>(3.0));
    Ok(FacetPointSet {
        triangle_id: raster.triangle_id,
        base_points,
        elevations,
        template,
        barycentrics,
        normal: frame.facet_normal,
        axes: frame.rotation,
        origin,
        center,
        enlarged: raster.triangle,
        facet: raster.facet,
        pitch: raster.pitch,
        observed: hf.valid.iter().filter(|v| **v).count(),
        heights: hf.clone(),
    })
}

/// Mutual nearest-neighbour pairs between the overlap bands of two adjacent patches.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Overlap {
    pub a: usize,
    pub b: usize,
    /// `(index in a, index in b)`.
    pub pairs: Vec<(usize, usize)>,
}

impl Overlap {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Points of `from` lying strictly inside the enlarged facet of `into`.
fn band<T: Real>(from: &FacetPointSet<T>, into: &FacetPointSet<T>) -> Result<Vec<usize>> {
    let map = BarycentricMap::new(&into.enlarged)?;
    let margin: T = lit(1e-9);
    Ok((0..from.len())
        .filter(|&k| {
            let q = into.to_template(&from.base_points[k]);
            let b = map.coords(&q);
            // strict: shared-edge points do not form an overlap on their own
            b.alpha > margin && b.beta > margin && b.gamma > margin
        })
        .collect())
}

/// Pairs points of `a` and `b` that sit in both enlarged facets and are mutual nearest
/// neighbours within `r_pair`.
pub fn overlap_correspondences<T: Real>(
    mesh: &CoarseMesh<T>,
    a: &FacetPointSet<T>,
    b: &FacetPointSet<T>,
    r_pair: T,
) -> Result<Overlap> {
    if mesh.shared_edge(a.triangle_id, b.triangle_id).is_none() {
        return Err(Error::NotAdjacent(a.triangle_id, b.triangle_id));
    }
    let ia = band(a, b)?;
    let ib = band(b, a)?;
    let r2 = r_pair * r_pair;
    let nearest = |p: &Point3<T>, set: &FacetPointSet<T>, idx: &[usize]| -> Option<(usize, T)> {
        let mut best: Option<(usize, T)> = None;
        for &j in idx {
            let d = (set.base_points[j] - p).norm_squared();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        best
    };
    let mut pairs = Vec::new();
    for &i in &ia {
        let Some((j, d)) = nearest(&a.base_points[i], b, &ib) else {
            continue;
        };
        if d > r2 {
            continue;
        }
        if let Some((back, _)) = nearest(&b.base_points[j], a, &ia) {
            if back == i {
                pairs.push((i, j));
            }
        }
    }
    Ok(Overlap {
        a: a.triangle_id,
        b: b.triangle_id,
        pairs,
    })
}

/// How the anti-flattening constant `k = 1 / Σ (C_μ + C_μ')` enters the least squares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AntiFlattening {
    /// `k ‖h_μ − e_3‖²` for every free patch.
    #[default]
    Tikhonov,
    /// `k` added to every overlap residual.
    Additive,
}

/// What fixes the free similarity of the stitched surface.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AlignGauge {
    /// Per connected component, the patch with the most observed pixels keeps the identity.
    #[default]
    PinLargest,
    /// Every patch's corrected elevation is pulled to zero at its three mesh vertices.
    VertexAnchors { weight: f64 },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignOptions {
    /// Pairing radius as a multiple of the template pitch.
    pub r_pair_factor: f64,
    pub anti_flattening: AntiFlattening,
    pub gauge: AlignGauge,
    /// Number of linearisations of the overlap residual.
    pub passes: usize,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            r_pair_factor: 1.5,
            anti_flattening: AntiFlattening::Tikhonov,
            gauge: AlignGauge::PinLargest,
            passes: 3,
        }
    }
}

/// Correction of one patch: `z' = H[2] · (x − x_c, y − y_c, z) + offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchCorrection<T: Real> {
    pub triangle_id: usize,
    /// Identity except for the third row.
    pub transform: Matrix3<T>,
    pub offset: T,
    pub curvature: T,
}

impl<T: Real> PatchCorrection<T> {
    pub fn identity(triangle_id: usize, curvature: T) -> Self {
        Self {
            triangle_id,
            transform: Matrix3::identity(),
            offset: T::zero(),
            curvature,
        }
    }

    fn from_vector(triangle_id: usize, h: &Vector4<T>, curvature: T) -> Self {
        let mut transform = Matrix3::identity();
        transform[(2, 0)] = h[0];
        transform[(2, 1)] = h[1];
        transform[(2, 2)] = h[2];
        Self {
            triangle_id,
            transform,
            offset: h[3],
            curvature,
        }
    }

    pub fn vector(&self) -> Vector4<T> {
        Vector4::new(
            self.transform[(2, 0)],
            self.transform[(2, 1)],
            self.transform[(2, 2)],
            self.offset,
        )
    }

    /// `z` coefficient below zero: the patch was turned inside out.
    pub fn flips(&self) -> bool {
        self.transform[(2, 2)] < T::zero()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeGap {
    pub a: usize,
    pub b: usize,
    pub pairs: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub edges: Vec<EdgeGap>,
    /// Adjacent pairs without any overlap correspondence.
    pub empty_edges: Vec<(usize, usize)>,
    pub pinned: Vec<usize>,
    /// RMS of all overlap gaps before and after, world units.
    pub gap_before: f64,
    pub gap_after: f64,
    pub k: f64,
    /// Correspondences used, for merging duplicates downstream.
    #[serde(skip)]
    pub overlaps: Vec<Overlap>,
}

/// One linearised overlap equation `c_a · h_a − c_b · h_b = rhs`.
struct Row<T: Real> {
    a: usize,
    b: usize,
    ca: Vector4<T>,
    cb: Vector4<T>,
    rhs: T,
}

/// Gap of `from`'s corrected point `k` to the corrected surface of `into`, measured along
/// `into`'s normal, with its derivatives w.r.t. both corrections; `None` when the point
/// projects outside `into`'s grid.
fn gap_row<T: Real>(
    from: &FacetPointSet<T>,
    k: usize,
    h_from: &Vector4<T>,
    into: &FacetPointSet<T>,
    h_into: &Vector4<T>,
) -> Option<(Vector4<T>, Vector4<T>, T)> {
    let s_from = from.regressor(&from.template[k], from.elevations[k]);
    let e = h_from.dot(&s_from);
    let x = from.base_points[k] + from.normal * e;
    let q = into.to_template(&x);
    let z = into.sample(&q)?;
    let s_into = into.regressor(&q, z);
    let gap = into.elevation_of(&x) - h_into.dot(&s_into);
    // moving `x` along `from.normal` also slides its footprint on `into`
    let d = into.axes * from.normal;
    let half = into.pitch * lit(0.25);
    let slope = |dx: T, dy: T| -> T {
        match (
            into.sample(&Point2::new(q.x + dx, q.y + dy)),
            into.sample(&Point2::new(q.x - dx, q.y - dy)),
        ) {
            (Some(p), Some(m)) => (p - m) / (half + half),
            _ => T::zero(),
        }
    };
    let (zx, zy) = (slope(half, T::zero()), slope(T::zero(), half));
    let ds = Vector4::new(d.x, d.y, zx * d.x + zy * d.y, T::zero());
    let ca = s_from * (d.z - h_into.dot(&ds));
    Some((ca, s_into, gap))
}

fn edge_rows<T: Real>(
    sets: &[FacetPointSet<T>],
    ov: &Overlap,
    slot: &[Option<usize>],
    h: &[Vector4<T>],
    rows: &mut Vec<Row<T>>,
) -> Vec<T> {
    let (ia, ib) = (slot[ov.a].unwrap(), slot[ov.b].unwrap());
    let mut gaps = Vec::with_capacity(2 * ov.pairs.len());
    let mut push = |from: usize, k: usize, into: usize| {
        if let Some((ca, cb, gap)) = gap_row(&sets[from], k, &h[from], &sets[into], &h[into]) {
            let rhs = ca.dot(&h[from]) - cb.dot(&h[into]) - gap;
            rows.push(Row {
                a: from,
                b: into,
                ca,
                cb,
                rhs,
            });
            gaps.push(gap);
        }
    };
    for &(i, j) in &ov.pairs {
        push(ia, i, ib);
        push(ib, j, ia);
    }
    gaps
}

fn rms<T: Real>(v: &[T]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| to_f64(*x).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// The least-squares objective minimised by [`solve_corrections`].
#[allow(clippy::too_many_arguments)]
fn objective<T: Real>(
    sets: &[FacetPointSet<T>],
    overlaps: &[Overlap],
    slot: &[Option<usize>],
    h: &[Vector4<T>],
    unit: T,
    k: T,
    opts: &AlignOptions,
) -> T {
    let additive = if opts.anti_flattening == AntiFlattening::Additive {
        k
    } else {
        T::zero()
    };
    let mut total = T::zero();
    for ov in overlaps {
        for g in edge_rows(sets, ov, slot, h, &mut Vec::new()) {
            total += (g / unit + additive).powi(2);
        }
    }
    if opts.anti_flattening == AntiFlattening::Tikhonov {
        let e3 = Vector4::new(T::zero(), T::zero(), T::one(), T::zero());
        total += h.iter().fold(T::zero(), |a, v| a + (v - e3).norm_squared()) * k;
    }
    if let AlignGauge::VertexAnchors { weight } = opts.gauge {
        let w: T = lit(weight);
        for (s, hv) in sets.iter().zip(h) {
            for v in &s.facet {
                let q = s.to_template(v);
                if let Some(z) = s.sample(&q) {
                    total += ((hv.dot(&s.regressor(&q, z)) + s.elevation_of(v)) * w / unit).powi(2);
                }
            }
        }
    }
    total
}

/// Solves for all patch corrections from the overlap equations of every adjacent pair.
///
/// `sets` may cover a subset of the mesh triangles; `curvatures` is parallel to `sets`.
pub fn solve_corrections<T: Real>(
    sets: &[FacetPointSet<T>],
    mesh: &CoarseMesh<T>,
    curvatures: &[T],
    opts: &AlignOptions,
) -> Result<(Vec<PatchCorrection<T>>, AlignmentReport)> {
    if sets.len() != curvatures.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} point sets, {} curvatures",
            sets.len(),
            curvatures.len()
        )));
    }
    if sets.is_empty() {
        return Err(Error::Empty("point sets"));
    }
    if !(opts.r_pair_factor > 0.0) || opts.passes == 0 {
        return Err(Error::InvalidParameter {
            name: "align",
            reason: "pairing radius and pass count must be positive".into(),
        });
    }
    let mut slot = vec![None; mesh.triangle_count()];
    for (k, s) in sets.iter().enumerate() {
        if s.triangle_id >= slot.len() || slot[s.triangle_id].is_some() {
            return Err(Error::InvalidParameter {
                name: "sets",
                reason: format!("triangle {} missing from the mesh or repeated", s.triangle_id),
            });
        }
        slot[s.triangle_id] = Some(k);
    }
    let mut overlaps = Vec::new();
    let mut empty_edges = Vec::new();
    for (ta, tb) in mesh.adjacent_pairs() {
        let (Some(ia), Some(ib)) = (slot[ta], slot[tb]) else {
            continue;
        };
        let r_pair = lit::<T>(opts.r_pair_factor) * (sets[ia].pitch + sets[ib].pitch) * lit(0.5);
        let ov = overlap_correspondences(mesh, &sets[ia], &sets[ib], r_pair)?;
        if ov.is_empty() {
            empty_edges.push((ta, tb));
        } else {
            overlaps.push(ov);
        }
    }
    if !empty_edges.is_empty() {
        warn!("{} adjacent patch pairs have no overlap band", empty_edges.len());
    }

    let n = sets.len();
    let curv_sum = overlaps.iter().fold(T::zero(), |acc, ov| {
        acc + curvatures[slot[ov.a].unwrap()] + curvatures[slot[ov.b].unwrap()]
    });
    let k = if curv_sum > T::zero() {
        T::one() / curv_sum
    } else {
        T::one()
    };
    // residuals are measured in template pixels so their weight does not depend on scene size
    let unit = sets.iter().fold(T::zero(), |a, s| a + s.pitch) / from_usize::<T>(n);

    let mut active = vec![false; mesh.triangle_count()];
    for s in sets {
        active[s.triangle_id] = true;
    }
    let components = mesh.components(&active);
    let mut pinned = Vec::new();
    if opts.gauge == AlignGauge::PinLargest {
        for comp in &components {
            let best = comp
                .iter()
                .copied()
                .max_by_key(|&t| (sets[slot[t].unwrap()].observed, std::cmp::Reverse(t)))
                .unwrap();
            pinned.push(best);
        }
    }
    let is_pinned: Vec<bool> = sets.iter().map(|s| pinned.contains(&s.triangle_id)).collect();

    let e3 = Vector4::new(T::zero(), T::zero(), T::one(), T::zero());
    let mut h = vec![e3; n];
    let mut before = Vec::new();
    for ov in &overlaps {
        let mut scratch = Vec::new();
        before.push(edge_rows(sets, ov, &slot, &h, &mut scratch));
    }

    let mut current = objective(sets, &overlaps, &slot, &h, unit, k, opts);
    for pass in 0..opts.passes {
        let mut rows = Vec::new();
        for ov in &overlaps {
            edge_rows(sets, ov, &slot, &h, &mut rows);
        }
        let mut m = DMatrix::<T>::zeros(4 * n, 4 * n);
        let mut rhs = DVector::<T>::zeros(4 * n);
        let additive = if opts.anti_flattening == AntiFlattening::Additive {
            k
        } else {
            T::zero()
        };
        for r in &rows {
            let ca = r.ca / unit;
            let cb = -r.cb / unit;
            let target = (r.rhs - additive * unit) / unit;
            for (u, cu) in [(r.a, &ca), (r.b, &cb)] {
                for (v, cv) in [(r.a, &ca), (r.b, &cb)] {
                    for i in 0..4 {
                        for j in 0..4 {
                            m[(4 * u + i, 4 * v + j)] += cu[i] * cv[j];
                        }
                    }
                }
                for i in 0..4 {
                    rhs[4 * u + i] += cu[i] * target;
                }
            }
        }
        if let AlignGauge::VertexAnchors { weight } = opts.gauge {
            let w: T = lit(weight);
            for (u, s) in sets.iter().enumerate() {
                for v in &s.facet {
                    let q = s.to_template(v);
                    let Some(z) = s.sample(&q) else { continue };
                    let c = s.regressor(&q, z) * (w / unit);
                    let target = -s.elevation_of(v) * (w / unit);
                    for i in 0..4 {
                        for j in 0..4 {
                            m[(4 * u + i, 4 * u + j)] += c[i] * c[j];
                        }
                        rhs[4 * u + i] += c[i] * target;
                    }
                }
            }
        }
        let ridge: T = lit(1e-12);
        for u in 0..n {
            let reg = if opts.anti_flattening == AntiFlattening::Tikhonov {
                k
            } else {
                T::zero()
            };
            for i in 0..4 {
                m[(4 * u + i, 4 * u + i)] += reg + ridge;
                rhs[4 * u + i] += reg * e3[i];
            }
        }
        // pinned unknowns move to the right-hand side
        let mut fixed = DVector::<T>::zeros(4 * n);
        for (u, &p) in is_pinned.iter().enumerate() {
            if p {
                fixed.fixed_rows_mut::<4>(4 * u).copy_from(&e3);
            }
        }
        rhs -= &m * &fixed;
        for (u, &p) in is_pinned.iter().enumerate() {
            if !p {
                continue;
            }
            for i in 0..4 {
                let idx = 4 * u + i;
                m.row_mut(idx).fill(T::zero());
                m.column_mut(idx).fill(T::zero());
                m[(idx, idx)] = T::one();
                rhs[idx] = e3[i];
            }
        }
        let sol = match m.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                warn!("alignment normal equations are singular on pass {pass}; using a pseudo-inverse");
                m.svd(true, true)
                    .solve(&rhs, lit(1e-12))
                    .map_err(|e| Error::InvalidParameter {
                        name: "align",
                        reason: e.to_string(),
                    })?
            }
        };
        let next: Vec<Vector4<T>> = (0..n)
            .map(|u| Vector4::new(sol[4 * u], sol[4 * u + 1], sol[4 * u + 2], sol[4 * u + 3]))
            .collect();
        let value = objective(sets, &overlaps, &slot, &next, unit, k, opts);
        if !(value <= current) {
            break;
        }
        current = value;
        h = next;
    }

    let mut edges = Vec::new();
    let mut all_before = Vec::new();
    let mut all_after = Vec::new();
    for (ov, pre) in overlaps.iter().zip(&before) {
        let mut scratch = Vec::new();
        let post = edge_rows(sets, ov, &slot, &h, &mut scratch);
        edges.push(EdgeGap {
            a: ov.a,
            b: ov.b,
            pairs: ov.pairs.len(),
            before: rms(pre),
            after: rms(&post),
        });
        all_before.extend_from_slice(pre);
        all_after.extend(post);
    }
    let corrections = sets
        .iter()
        .zip(&h)
        .zip(curvatures)
        .map(|((s, hv), c)| PatchCorrection::from_vector(s.triangle_id, hv, *c))
        .collect();
    Ok((
        corrections,
        AlignmentReport {
            edges,
            empty_edges,
            pinned,
            gap_before: rms(&all_before),
            gap_after: rms(&all_after),
            k: to_f64(k),
            overlaps,
        },
    ))
}
