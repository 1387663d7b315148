//! 2D Delaunay triangulation: lexicographic sweep hull followed by Lawson edge flips.
//!
//! Points are inserted in lexicographic (x, then y) order and cocircular configurations
//! are never flipped, so ties resolve deterministically from that order.

use std::collections::HashMap;

use nalgebra::Point2;

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Twice the signed area of `(a, b, c)`; positive when `c` lies left of `a -> b`.
#[inline]
pub fn orient2d<T: Real>(a: &Point2<T>, b: &Point2<T>, c: &Point2<T>) -> T {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Positive when `d` lies strictly inside the circumcircle of the counter-clockwise `(a, b, c)`.
#[inline]
pub fn in_circle<T: Real>(a: &Point2<T>, b: &Point2<T>, c: &Point2<T>, d: &Point2<T>) -> T {
    let (adx, ady) = (a.x - d.x, a.y - d.y);
    let (bdx, bdy) = (b.x - d.x, b.y - d.y);
    let (cdx, cdy) = (c.x - d.x, c.y - d.y);
    let ad = adx * adx + ady * ady;
    let bd = bdx * bdx + bdy * bdy;
    let cd = cdx * cdx + cdy * cdy;
    adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) + ad * (bdx * cdy - bdy * cdx)
}

fn in_circle_tol<T: Real>(a: &Point2<T>, b: &Point2<T>, c: &Point2<T>, d: &Point2<T>) -> T {
    let s = (a - d).norm_squared() + (b - d).norm_squared() + (c - d).norm_squared();
    lit::<T>(1e-12) * s * s
}

/// Delaunay triangulation of `points`; triangles are counter-clockwise (positive [`orient2d`]).
pub fn delaunay_triangulation<T: Real>(points: &[Point2<T>]) -> Result<Vec<[usize; 3]>> {
    let n = points.len();
    if n < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: n });
    }
    if let Some(i) = points.iter().position(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(Error::UntrackedInReference(i));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&points[i], &points[j]);
        a.x.partial_cmp(&b.x)
            .unwrap()
            .then(a.y.partial_cmp(&b.y).unwrap())
            .then(i.cmp(&j))
    });

    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let span = (hi.x - lo.x).max(hi.y - lo.y);
    let dup_tol = span * lit(1e-12);
    for w in order.windows(2) {
        let (a, b) = (&points[w[0]], &points[w[1]]);
        if (a.x - b.x).abs() <= dup_tol && (a.y - b.y).abs() <= dup_tol {
            return Err(Error::DuplicatePoint(w[0].min(w[1]), w[0].max(w[1])));
        }
    }
    let orient_tol = span * span * lit(1e-14);

    let p0 = order[0];
    let p1 = order[1];
    let k = (2..n)
        .find(|&k| orient2d(&points[p0], &points[p1], &points[order[k]]).abs() > orient_tol)
        .ok_or(Error::Collinear)?;
    // order[0..k] are collinear and sorted along their line; order[k] is off that line
    let apex = order[k];
    let left = orient2d(&points[p0], &points[p1], &points[apex]) > T::zero();
    let mut tris: Vec<[usize; 3]> = Vec::with_capacity(2 * n);
    for i in 0..k - 1 {
        let (a, b) = (order[i], order[i + 1]);
        tris.push(if left { [a, b, apex] } else { [b, a, apex] });
    }
    let mut hull: Vec<usize> = if left {
        let mut h: Vec<usize> = order[..k].to_vec();
        h.push(apex);
        h
    } else {
        let mut h = vec![order[0], apex];
        h.extend(order[1..k].iter().rev());
        h
    };

    for &q in &order[k + 1..] {
        let m = hull.len();
        let visible: Vec<bool> = (0..m)
            .map(|i| orient2d(&points[hull[i]], &points[hull[(i + 1) % m]], &points[q]) < -orient_tol)
            .collect();
        let Some(start_hidden) = visible.iter().position(|v| !v) else {
            return Err(Error::Collinear);
        };
        // rotate so the visible run is contiguous and does not wrap
        hull.rotate_left(start_hidden);
        let mut vis = visible;
        vis.rotate_left(start_hidden);
        let first = vis.iter().position(|&v| v);
        let Some(first) = first else {
            // numerically on the hull boundary; attach to the nearest edge fan is not needed
            // because lexicographic order guarantees strict visibility for distinct points
            return Err(Error::Collinear);
        };
        let mut last = first;
        while last + 1 < m && vis[last + 1] {
            last += 1;
        }
        for i in first..=last {
            let a = hull[i];
            let b = hull[(i + 1) % m];
            tris.push([b, a, q]);
        }
        // vertices strictly inside the visible chain leave the hull
        let mut next = Vec::with_capacity(m + 1);
        next.extend_from_slice(&hull[..=first]);
        next.push(q);
        if last + 1 < m {
            next.extend_from_slice(&hull[last + 1..]);
        }
        hull = next;
    }

    lawson_flips(points, &mut tris);
    Ok(tris)
}

fn lawson_flips<T: Real>(points: &[Point2<T>], tris: &mut [[usize; 3]]) {
    loop {
        let mut edges: HashMap<(usize, usize), (usize, usize)> = HashMap::with_capacity(tris.len() * 3);
        for (t, tri) in tris.iter().enumerate() {
            for k in 0..3 {
                edges.insert((tri[(k + 1) % 3], tri[(k + 2) % 3]), (t, k));
            }
        }
        let mut touched = vec![false; tris.len()];
        let mut flipped = false;
        let mut keys: Vec<(usize, usize)> = edges.keys().copied().filter(|(a, b)| a < b).collect();
        keys.sort_unstable();
        for (b, c) in keys {
            let (Some(&(t, kt)), Some(&(u, ku))) = (edges.get(&(b, c)), edges.get(&(c, b))) else {
                continue;
            };
            if touched[t] || touched[u] {
                continue;
            }
            let a = tris[t][kt];
            let d = tris[u][ku];
            // triangle t is (a, b, c) counter-clockwise up to rotation
            let (pa, pb, pc, pd) = (&points[a], &points[b], &points[c], &points[d]);
            let val = in_circle(pa, pb, pc, pd);
            if val <= in_circle_tol(pa, pb, pc, pd) {
                continue;
            }
            if orient2d(pa, pb, pd) <= T::zero() || orient2d(pa, pd, pc) <= T::zero() {
                continue;
            }
            tris[t] = [a, b, d];
            tris[u] = [a, d, c];
            touched[t] = true;
            touched[u] = true;
            flipped = true;
        }
        if !flipped {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[(f64, f64)]) -> Vec<Point2<f64>> {
        v.iter().map(|&(x, y)| Point2::new(x, y)).collect()
    }

    /// Brute-force empty-circumcircle check over every point.
    fn is_delaunay(points: &[Point2<f64>], tris: &[[usize; 3]]) -> bool {
        tris.iter().all(|t| {
            let (a, b, c) = (&points[t[0]], &points[t[1]], &points[t[2]]);
            points
                .iter()
                .enumerate()
                .all(|(i, d)| t.contains(&i) || in_circle(a, b, c, d) <= in_circle_tol(a, b, c, d))
        })
    }

    fn hull_size(points: &[Point2<f64>]) -> usize {
        // monotone chain, strict turns
        let mut p: Vec<_> = points.to_vec();
        p.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap().then(a.y.partial_cmp(&b.y).unwrap()));
        let mut h: Vec<Point2<f64>> = Vec::new();
        for pass in 0..2 {
            let start = h.len();
            let iter: Box<dyn Iterator<Item = &Point2<f64>>> = if pass == 0 {
                Box::new(p.iter())
            } else {
                Box::new(p.iter().rev())
            };
            for q in iter {
                while h.len() >= start + 2 && orient2d(&h[h.len() - 2], &h[h.len() - 1], q) <= 0.0 {
                    h.pop();
                }
                h.push(*q);
            }
            h.pop();
        }
        h.len()
    }

    #[test]
    fn unit_square_two_triangles() {
        let p = pts(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        let t = delaunay_triangulation(&p).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.iter().flatten().all(|&i| i < 4));
        for tri in &t {
            assert!(orient2d(&p[tri[0]], &p[tri[1]], &p[tri[2]]) > 0.0);
        }
    }

    #[test]
    fn three_points_one_triangle() {
        let p = pts(&[(0.0, 0.0), (2.0, 0.5), (0.3, 1.7)]);
        assert_eq!(delaunay_triangulation(&p).unwrap().len(), 1);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            delaunay_triangulation(&pts(&[(0.0, 0.0), (1.0, 0.0)])),
            Err(Error::TooFewPoints { .. })
        ));
        assert!(matches!(
            delaunay_triangulation(&pts(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)])),
            Err(Error::Collinear)
        ));
        assert!(matches!(
            delaunay_triangulation(&pts(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 0.0)])),
            Err(Error::DuplicatePoint(1, 3))
        ));
    }

    #[test]
    fn collinear_prefix_is_handled() {
        let p = pts(&[(0.0, 0.0), (0.0, 1.0), (0.0, 2.0), (0.0, 3.0), (1.0, 1.5), (2.0, 0.2)]);
        let t = delaunay_triangulation(&p).unwrap();
        assert!(is_delaunay(&p, &t));
        // five boundary vertices, two of them collinear on x = 0
        assert_eq!(t.len(), 2 * p.len() - 2 - 5);
    }

    #[test]
    fn random_points_euler_and_empty_circles() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p: Vec<Point2<f64>> = (0..100)
            .map(|_| Point2::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)))
            .collect();
        let t = delaunay_triangulation(&p).unwrap();
        let h = hull_size(&p);
        assert_eq!(t.len(), 2 * p.len() - 2 - h);
        assert!(is_delaunay(&p, &t));
    }

    #[test]
    fn grid_with_cocircular_ties_is_valid() {
        let mut p = Vec::new();
        for i in 0..6 {
            for j in 0..5 {
                p.push(Point2::new(i as f64, j as f64));
            }
        }
        let t = delaunay_triangulation(&p).unwrap();
        assert_eq!(t.len(), 2 * 5 * 4);
        assert!(is_delaunay(&p, &t));
        let again = delaunay_triangulation(&p).unwrap();
        assert_eq!(t, again);
    }
}
