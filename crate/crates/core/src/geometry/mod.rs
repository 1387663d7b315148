//! Triangles, barycentric coordinates, facet frames and the coarse mesh.

mod delaunay;
mod mesh;

pub use delaunay::{delaunay_triangulation, in_circle, orient2d};
pub use mesh::{build_mesh, CoarseMesh, MeshOptions};

use nalgebra::{Matrix3, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

pub type Triangle2<T> = [Point2<T>; 3];
pub type Triangle3<T> = [Point3<T>; 3];

/// Barycentric coordinates of a point with respect to a triangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Barycentric<T> {
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
}

impl<T: Real> Barycentric<T> {
    pub fn new(alpha: T, beta: T, gamma: T) -> Self {
        Self { alpha, beta, gamma }
    }

    pub fn sum(&self) -> T {
        self.alpha + self.beta + self.gamma
    }

    pub fn as_array(&self) -> [T; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    /// All three coordinates are at least `-eps`.
    pub fn is_inside(&self, eps: T) -> bool {
        self.alpha >= -eps && self.beta >= -eps && self.gamma >= -eps
    }

    pub fn point2(&self, tri: &Triangle2<T>) -> Point2<T> {
        Point2::from(tri[0].coords * self.alpha + tri[1].coords * self.beta + tri[2].coords * self.gamma)
    }

    pub fn point3(&self, tri: &Triangle3<T>) -> Point3<T> {
        Point3::from(tri[0].coords * self.alpha + tri[1].coords * self.beta + tri[2].coords * self.gamma)
    }
}

/// Twice the signed area (positive for counter-clockwise in a y-up frame).
pub fn signed_area2<T: Real>(tri: &Triangle2<T>) -> T {
    orient2d(&tri[0], &tri[1], &tri[2])
}

pub fn area2d<T: Real>(tri: &Triangle2<T>) -> T {
    signed_area2(tri).abs() * lit(0.5)
}

fn max_edge_sq2<T: Real>(tri: &Triangle2<T>) -> T {
    let a = (tri[1] - tri[0]).norm_squared();
    let b = (tri[2] - tri[1]).norm_squared();
    let c = (tri[0] - tri[2]).norm_squared();
    a.max(b).max(c)
}

/// Degenerate when the doubled area is negligible relative to the longest edge.
pub fn is_degenerate2<T: Real>(tri: &Triangle2<T>) -> bool {
    let scale = max_edge_sq2(tri);
    let a = signed_area2(tri).abs();
    !(a.is_finite() && scale.is_finite()) || scale == T::zero() || a <= lit::<T>(1e-12) * scale
}

pub fn centroid2<T: Real>(tri: &Triangle2<T>) -> Point2<T> {
    Point2::from((tri[0].coords + tri[1].coords + tri[2].coords) / lit::<T>(3.0))
}

pub fn centroid3<T: Real>(tri: &Triangle3<T>) -> Point3<T> {
    Point3::from((tri[0].coords + tri[1].coords + tri[2].coords) / lit::<T>(3.0))
}

/// Scales a triangle about its centroid. Edges of the result stay parallel to the input.
pub fn enlarge_triangle<T: Real>(tri: &Triangle2<T>, factor: T) -> Result<Triangle2<T>> {
    if !(factor > T::zero()) || !factor.is_finite() {
        return Err(Error::InvalidParameter {
            name: "factor",
            reason: "enlargement factor must be positive and finite".into(),
        });
    }
    if is_degenerate2(tri) {
        return Err(Error::DegenerateTriangle);
    }
    let c = centroid2(tri);
    Ok(tri.map(|v| c + (v - c) * factor))
}

/// 3D counterpart of [`enlarge_triangle`].
pub fn enlarge_triangle3<T: Real>(tri: &Triangle3<T>, factor: T) -> Triangle3<T> {
    let c = centroid3(tri);
    tri.map(|v| c + (v - c) * factor)
}

/// Barycentric coordinates of `p` with respect to `tri`.
pub fn barycentric_of<T: Real>(p: &Point2<T>, tri: &Triangle2<T>) -> Result<Barycentric<T>> {
    if is_degenerate2(tri) {
        return Err(Error::DegenerateTriangle);
    }
    Ok(barycentric_unchecked(p, tri))
}

/// Barycentric coordinates without the degeneracy check; callers guarantee a valid triangle.
#[inline]
pub fn barycentric_unchecked<T: Real>(p: &Point2<T>, tri: &Triangle2<T>) -> Barycentric<T> {
    let d = signed_area2(tri);
    let alpha = orient2d(p, &tri[1], &tri[2]) / d;
    let beta = orient2d(&tri[0], p, &tri[2]) / d;
    Barycentric::new(alpha, beta, T::one() - alpha - beta)
}

/// Precomputed affine map from points to barycentric coordinates for one triangle.
#[derive(Clone, Copy, Debug)]
pub struct BarycentricMap<T: Real> {
    origin: Point2<T>,
    inv: nalgebra::Matrix2<T>,
}

impl<T: Real> BarycentricMap<T> {
    pub fn new(tri: &Triangle2<T>) -> Result<Self> {
        if is_degenerate2(tri) {
            return Err(Error::DegenerateTriangle);
        }
        let m = nalgebra::Matrix2::from_columns(&[tri[1] - tri[0], tri[2] - tri[0]]);
        let inv = m.try_inverse().ok_or(Error::DegenerateTriangle)?;
        Ok(Self { origin: tri[0], inv })
    }

    #[inline]
    pub fn coords(&self, p: &Point2<T>) -> Barycentric<T> {
        let bg = self.inv * (p - self.origin);
        Barycentric::new(T::one() - bg.x - bg.y, bg.x, bg.y)
    }
}

/// A facet rotated to face the image normal `[0 0 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacetFrame<T: Real> {
    pub rotation: Matrix3<T>,
    pub facet_normal: Vector3<T>,
    pub image_normal: Vector3<T>,
    /// Facet vertices in the rotated frame, dropping the constant depth.
    pub template2d: Triangle2<T>,
    /// Common depth of the rotated facet vertices.
    pub plane_offset: T,
}

impl<T: Real> FacetFrame<T> {
    /// Maps a world point into template coordinates (drops the depth).
    pub fn to_template(&self, p: &Point3<T>) -> Point2<T> {
        let r = self.rotation * p.coords;
        Point2::new(r.x, r.y)
    }

    /// Inverse of [`Self::to_template`] for a point elevated along the facet normal.
    pub fn from_template(&self, q: &Point2<T>, elevation: T) -> Point3<T> {
        let v = Vector3::new(q.x, q.y, self.plane_offset + elevation);
        Point3::from(self.rotation.transpose() * v)
    }
}

/// Unit right-hand normal of a 3D triangle.
pub fn facet_normal<T: Real>(tri: &Triangle3<T>) -> Result<Vector3<T>> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let n = e1.cross(&e2);
    let scale = e1.norm_squared().max(e2.norm_squared());
    let len = n.norm();
    if !(len.is_finite() && scale > T::zero()) || len <= lit::<T>(1e-12) * scale {
        return Err(Error::DegenerateTriangle);
    }
    Ok(n / len)
}

fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(T::zero(), -v.z, v.y, v.z, T::zero(), -v.x, -v.y, v.x, T::zero())
}

/// Smallest rotation taking unit `from` onto unit `to` (Rodrigues form). Requires `from != -to`.
fn rotation_between_unit<T: Real>(from: &Vector3<T>, to: &Vector3<T>) -> Matrix3<T> {
    let v = from.cross(to);
    let c = from.dot(to);
    let k = skew(&v);
    Matrix3::identity() + k + k * k * (T::one() / (T::one() + c))
}

/// Rotation aligning the facet normal with `[0 0 1]`, and the resulting template triangle.
pub fn facet_frame<T: Real>(vertices: &Triangle3<T>) -> Result<FacetFrame<T>> {
    let n = facet_normal(vertices)?;
    let e3 = Vector3::z();
    let rotation = if T::one() + n.dot(&e3) > lit(1e-6) {
        rotation_between_unit(&n, &e3)
    } else {
        // antiparallel: half turn about the first edge, then a small correction
        let u = (vertices[1] - vertices[0]).normalize();
        let half = Matrix3::identity() * lit::<T>(-1.0) + u * u.transpose() * lit::<T>(2.0);
        let n1 = (half * n).normalize();
        rotation_between_unit(&n1, &e3) * half
    };
    let rotated = vertices.map(|v| rotation * v.coords);
    let template2d = rotated.map(|r| Point2::new(r.x, r.y));
    let plane_offset = (rotated[0].z + rotated[1].z + rotated[2].z) / lit::<T>(3.0);
    Ok(FacetFrame {
        rotation,
        facet_normal: n,
        image_normal: e3,
        template2d,
        plane_offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tri(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Triangle2<f64> {
        [Point2::new(a.0, a.1), Point2::new(b.0, b.1), Point2::new(c.0, c.1)]
    }

    #[test]
    fn enlarge_identity_and_known_values() {
        let t = tri((0.0, 0.0), (1.0, 0.0), (0.0, 1.0));
        assert_eq!(enlarge_triangle(&t, 1.0).unwrap(), t);
        let e = enlarge_triangle(&t, 1.5).unwrap();
        let expect = tri(
            (-1.0 / 6.0, -1.0 / 6.0),
            (4.0 / 3.0, -1.0 / 6.0),
            (-1.0 / 6.0, 4.0 / 3.0),
        );
        for k in 0..3 {
            assert_relative_eq!(e[k], expect[k], epsilon = 1e-14);
        }
    }

    #[test]
    fn enlarge_keeps_edges_parallel() {
        let t = tri((0.3, -1.2), (2.7, 0.4), (-0.8, 1.9));
        let e = enlarge_triangle(&t, 2.0).unwrap();
        for k in 0..3 {
            let a = t[(k + 1) % 3] - t[k];
            let b = e[(k + 1) % 3] - e[k];
            assert!((a.x * b.y - a.y * b.x).abs() < 1e-12);
        }
    }

    #[test]
    fn enlarge_rejects_degenerate() {
        let t = tri((0.0, 0.0), (1.0, 1.0), (2.0, 2.0));
        assert!(matches!(enlarge_triangle(&t, 1.3), Err(Error::DegenerateTriangle)));
        let t = tri((0.0, 0.0), (1.0, 0.0), (0.0, 1.0));
        assert!(enlarge_triangle(&t, 0.0).is_err());
    }

    #[test]
    fn barycentric_spot_values() {
        let t = tri((0.0, 0.0), (4.0, 0.0), (1.0, 3.0));
        let b = barycentric_of(&t[0], &t).unwrap();
        assert_relative_eq!(b.alpha, 1.0);
        assert_relative_eq!(b.beta, 0.0);
        assert_relative_eq!(b.gamma, 0.0);
        let c = barycentric_of(&centroid2(&t), &t).unwrap();
        for x in c.as_array() {
            assert_relative_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
        let m = Point2::from((t[1].coords + t[2].coords) * 0.5);
        let b = barycentric_of(&m, &t).unwrap();
        assert_relative_eq!(b.alpha, 0.0, epsilon = 1e-15);
        assert_relative_eq!(b.beta, 0.5, epsilon = 1e-15);
        assert_relative_eq!(b.gamma, 0.5, epsilon = 1e-15);
        assert!(barycentric_of(&m, &tri((0.0, 0.0), (1.0, 0.0), (2.0, 0.0))).is_err());
    }

    #[test]
    fn barycentric_map_agrees() {
        let t = tri((0.5, 0.2), (3.0, 0.7), (1.1, 2.9));
        let map = BarycentricMap::new(&t).unwrap();
        let p = Point2::new(1.3, 1.1);
        let a = map.coords(&p);
        let b = barycentric_of(&p, &t).unwrap();
        for (x, y) in a.as_array().iter().zip(b.as_array()) {
            assert_relative_eq!(*x, y, epsilon = 1e-13);
        }
    }

    #[test]
    fn facet_frame_horizontal_is_identity() {
        let v = [
            Point3::new(0.0, 0.0, 2.0),
            Point3::new(1.0, 0.0, 2.0),
            Point3::new(0.0, 1.0, 2.0),
        ];
        let f = facet_frame(&v).unwrap();
        assert_relative_eq!(f.rotation, Matrix3::identity(), epsilon = 1e-15);
        for k in 0..3 {
            assert_relative_eq!(f.template2d[k], Point2::new(v[k].x, v[k].y), epsilon = 1e-15);
        }
        assert_relative_eq!(f.plane_offset, 2.0);
    }

    #[test]
    fn facet_frame_vertical_plane() {
        let v = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        ];
        let f = facet_frame(&v).unwrap();
        assert_relative_eq!(f.facet_normal, Vector3::x(), epsilon = 1e-15);
        assert_relative_eq!(f.rotation * Vector3::x(), Vector3::z(), epsilon = 1e-12);
        let d3 = (v[1] - v[0]).norm();
        let d2 = (f.template2d[1] - f.template2d[0]).norm();
        assert_relative_eq!(d2, d3, epsilon = 1e-12);
    }

    #[test]
    fn facet_frame_antiparallel_normal() {
        let v = [
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(0.0, 1.0, 1.0),
            Point3::new(1.0, 0.0, 1.0),
        ];
        let f = facet_frame(&v).unwrap();
        assert_relative_eq!(f.facet_normal, -Vector3::z(), epsilon = 1e-15);
        assert_relative_eq!(f.rotation * f.facet_normal, Vector3::z(), epsilon = 1e-12);
        assert_relative_eq!(f.rotation.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn facet_frame_round_trip() {
        let v = [
            Point3::new(0.2, -0.4, 1.0),
            Point3::new(1.5, 0.1, 0.3),
            Point3::new(-0.3, 1.2, 0.8),
        ];
        let f = facet_frame(&v).unwrap();
        for k in 0..3 {
            let back = f.from_template(&f.template2d[k], 0.0);
            assert_relative_eq!(back, v[k], epsilon = 1e-12);
        }
        let up = f.from_template(&f.template2d[0], 0.5);
        assert_relative_eq!(up - v[0], f.facet_normal * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn facet_frame_rejects_degenerate() {
        let v = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(2.0, 2.0, 2.0),
        ];
        assert!(facet_frame(&v).is_err());
    }
}
