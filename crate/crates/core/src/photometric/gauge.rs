//! Changes of basis `(L, N) -> (L G⁻¹, G N)` that leave `L·N` unchanged.

use nalgebra::{DMatrix, Matrix4, SMatrix, SVector, SymmetricEigen, Vector3, Vector4};

use crate::scalar::{lit, Real};

/// Symmetric 4x4 form from its 10 upper-triangle coefficients.
fn quadric<T: Real>(q: &SVector<T, 10>) -> Matrix4<T> {
    let mut m = Matrix4::zeros();
    let idx = [
        (0, 0),
        (1, 1),
        (2, 2),
        (3, 3),
        (0, 1),
        (0, 2),
        (0, 3),
        (1, 2),
        (1, 3),
        (2, 3),
    ];
    for (k, &(r, c)) in idx.iter().enumerate() {
        m[(r, c)] = q[k];
        m[(c, r)] = q[k];
    }
    m
}

fn monomials<T: Real>(c: &Vector4<T>) -> SVector<T, 10> {
    let two: T = lit(2.0);
    SVector::<T, 10>::from_column_slice(&[
        c[0] * c[0],
        c[1] * c[1],
        c[2] * c[2],
        c[3] * c[3],
        two * c[0] * c[1],
        two * c[0] * c[2],
        two * c[0] * c[3],
        two * c[1] * c[2],
        two * c[1] * c[3],
        two * c[2] * c[3],
    ])
}

/// Finds `G` such that the columns `G·nᵢ` lie (in least squares) on the cone
/// `x₀² = x₁² + x₂² + x₃²` with positive heads. `None` if the fitted quadric does not have
/// Lorentz signature, which happens when the columns do not span enough directions.
pub fn fit_null_cone<T: Real>(n: &DMatrix<T>, use_column: &[bool]) -> Option<Matrix4<T>> {
    let mut gram = SMatrix::<T, 10, 10>::zeros();
    let mut count = 0;
    for i in 0..n.ncols() {
        if !use_column.get(i).copied().unwrap_or(true) {
            continue;
        }
        let c = Vector4::new(n[(0, i)], n[(1, i)], n[(2, i)], n[(3, i)]);
        let len = c.norm();
        if !(len > T::zero()) {
            continue;
        }
        let m = monomials(&(c / len));
        gram += m * m.transpose();
        count += 1;
    }
    if count < 9 {
        return None;
    }
    let eig = SymmetricEigen::new(gram);
    let k = (0..10).min_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap())?;
    let q = quadric(&eig.eigenvectors.column(k).into_owned());
    let qe = SymmetricEigen::new(q);
    let positive = (0..4).filter(|&i| qe.eigenvalues[i] > T::zero()).count();
    let sign: T = match positive {
        1 => T::one(),
        3 => -T::one(),
        _ => return None,
    };
    let vals: Vec<T> = (0..4).map(|i| qe.eigenvalues[i] * sign).collect();
    let scale = vals.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    if vals.iter().any(|v| v.abs() <= scale * lit(1e-10)) {
        return None;
    }
    let head = (0..4).find(|&i| vals[i] > T::zero())?;
    let mut order = vec![head];
    order.extend((0..4).filter(|&i| i != head));
    let mut g = Matrix4::zeros();
    for (r, &i) in order.iter().enumerate() {
        let s = vals[i].abs().sqrt();
        for c in 0..4 {
            g[(r, c)] = qe.eigenvectors[(c, i)] * s;
        }
    }
    Some(orient_heads(g, n, use_column))
}

/// Negates `g` if most transformed columns would have a negative head.
fn orient_heads<T: Real>(g: Matrix4<T>, n: &DMatrix<T>, use_column: &[bool]) -> Matrix4<T> {
    let row = g.row(0);
    let mut score = T::zero();
    for i in 0..n.ncols() {
        if use_column.get(i).copied().unwrap_or(true) {
            let h = row[0] * n[(0, i)] + row[1] * n[(1, i)] + row[2] * n[(2, i)] + row[3] * n[(3, i)];
            score += h;
        }
    }
    if score < T::zero() {
        -g
    } else {
        g
    }
}

/// Linear change of basis taking each (unit-normalized) column `c` onto the ray of
/// `[1; target]`, weighted. Solved as the smallest eigenvector of the 16x16 normal matrix.
pub fn anchor_gauge<T: Real>(pairs: &[(Vector4<T>, Vector3<T>, T)]) -> Option<Matrix4<T>> {
    if pairs.len() < 5 {
        return None;
    }
    let mut ata = SMatrix::<T, 16, 16>::zeros();
    for (c, target, w) in pairs {
        let len = c.norm();
        if !(len > T::zero()) {
            continue;
        }
        let c = c / len;
        let u = Vector4::new(T::one(), target.x, target.y, target.z);
        let p = Matrix4::identity() - u * u.transpose() / u.norm_squared();
        // G c = (cᵀ ⊗ I) vec(G) with column-major vec
        let mut kron = SMatrix::<T, 4, 16>::zeros();
        for col in 0..4 {
            for r in 0..4 {
                kron[(r, col * 4 + r)] = c[col];
            }
        }
        let a = p * kron;
        ata += a.transpose() * a * *w;
    }
    let eig = SymmetricEigen::new(ata);
    let k = (0..16).min_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap())?;
    let v = eig.eigenvectors.column(k);
    let mut g = Matrix4::from_column_slice(v.as_slice());
    g *= lit::<T>(2.0) / g.norm();
    g.try_inverse()?;
    let score = pairs.iter().fold(T::zero(), |acc, (c, _, w)| acc + (g * c)[0] * *w);
    if score < T::zero() {
        g = -g;
    }
    Some(g)
}

/// Proper orthochronous Lorentz transform `R(ω) · B(φ)` from a rotation vector `ω` and a
/// rapidity vector `φ` (stacked as `θ = [ω; φ]`).
pub fn lorentz<T: Real>(theta: &SVector<T, 6>) -> Matrix4<T> {
    let omega = Vector3::new(theta[0], theta[1], theta[2]);
    let phi = Vector3::new(theta[3], theta[4], theta[5]);
    let eta = phi.norm();
    let mut boost = Matrix4::identity();
    if eta > T::zero() {
        let u = phi / eta;
        let (ch, sh) = (eta.cosh(), eta.sinh());
        boost[(0, 0)] = ch;
        for r in 0..3 {
            boost[(0, r + 1)] = sh * u[r];
            boost[(r + 1, 0)] = sh * u[r];
            for c in 0..3 {
                boost[(r + 1, c + 1)] += (ch - T::one()) * u[r] * u[c];
            }
        }
    }
    let rot = nalgebra::Rotation3::new(omega).into_inner();
    let mut spatial = Matrix4::identity();
    spatial.fixed_view_mut::<3, 3>(1, 1).copy_from(&rot);
    spatial * boost
}

fn direction_residuals<T: Real>(g: &Matrix4<T>, pairs: &[(Vector4<T>, Vector3<T>, T)]) -> Vec<T> {
    let mut r = Vec::with_capacity(3 * pairs.len());
    for (c, target, w) in pairs {
        let m = g * c;
        let tail = Vector3::new(m[1], m[2], m[3]);
        let len = tail.norm();
        let sw = w.sqrt();
        let dir = if len > T::zero() { tail / len } else { tail };
        let d = (dir - target) * sw;
        r.extend_from_slice(&[d.x, d.y, d.z]);
    }
    r
}

/// Lorentz change of basis whose transformed columns point, in their normal part, along the
/// paired target directions (weighted least squares, Levenberg-Marquardt with several starts).
/// The result may include a spatial reflection.
///
/// For columns already on the manifold this keeps them there; only directions are matched,
/// so the targets may be mean normals of curved regions.
pub fn anchor_lorentz<T: Real>(pairs: &[(Vector4<T>, Vector3<T>, T)]) -> Option<Matrix4<T>> {
    if pairs.len() < 3 {
        return None;
    }
    let mut best: Option<(T, Matrix4<T>)> = None;
    // improper transforms (a spatial reflection) also keep the manifold
    for parity in [
        Matrix4::identity(),
        Matrix4::from_diagonal(&Vector4::new(T::one(), -T::one(), -T::one(), -T::one())),
    ] {
        let cost = |th: &SVector<T, 6>| {
            direction_residuals(&(lorentz(th) * parity), pairs)
                .iter()
                .fold(T::zero(), |a, v| a + *v * *v)
        };
        let mut starts = vec![SVector::<T, 6>::zeros()];
        for axis in 3..6 {
            for sign in [-1.0, 1.0] {
                let mut th = SVector::<T, 6>::zeros();
                th[axis] = lit(1.5 * sign);
                starts.push(th);
            }
        }
        let h: T = lit(1e-7);
        for start in starts {
            let mut th = start;
            let mut c = cost(&th);
            let mut mu: T = lit(1e-3);
            for _ in 0..200 {
                let r0 = direction_residuals(&(lorentz(&th) * parity), pairs);
                let mut jac = DMatrix::<T>::zeros(r0.len(), 6);
                for k in 0..6 {
                    let mut tp = th;
                    tp[k] += h;
                    let rp = direction_residuals(&(lorentz(&tp) * parity), pairs);
                    for i in 0..r0.len() {
                        jac[(i, k)] = (rp[i] - r0[i]) / h;
                    }
                }
                let rv = DMatrix::from_column_slice(r0.len(), 1, &r0);
                let jtj = jac.transpose() * &jac;
                let jtr = jac.transpose() * rv;
                let mut improved = false;
                for _ in 0..20 {
                    let mut a = jtj.clone();
                    for k in 0..6 {
                        a[(k, k)] += mu * (T::one() + jtj[(k, k)]);
                    }
                    let Some(step) = a.lu().solve(&jtr) else { break };
                    let cand = th - SVector::<T, 6>::from_column_slice(step.as_slice());
                    let cc = cost(&cand);
                    if cc < c {
                        let gain = c - cc;
                        th = cand;
                        c = cc;
                        mu = (mu * lit(0.3)).max(lit(1e-12));
                        improved = gain > c * lit(1e-14);
                        break;
                    }
                    mu *= lit(10.0);
                }
                if !improved {
                    break;
                }
            }
            if best.as_ref().map_or(true, |(bc, _)| c < *bc) {
                best = Some((c, lorentz(&th) * parity));
            }
        }
    }
    best.map(|(_, g)| g)
}

/// Applies `N <- G N`, `L <- L G⁻¹`. A singular `g` leaves both unchanged.
pub fn apply_gauge<T: Real>(l: &mut DMatrix<T>, n: &mut DMatrix<T>, g: &Matrix4<T>) -> bool {
    let Some(inv) = g.try_inverse() else {
        return false;
    };
    let gd = DMatrix::from_column_slice(4, 4, g.as_slice());
    let invd = DMatrix::from_column_slice(4, 4, inv.as_slice());
    *n = &gd * &*n;
    *l = &*l * &invd;
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn on_cone(b: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = DMatrix::zeros(4, b);
        for i in 0..b {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.1..1.0),
            )
            .normalize();
            let rho = rng.gen_range(0.2..1.0);
            n[(0, i)] = rho;
            n[(1, i)] = rho * v.x;
            n[(2, i)] = rho * v.y;
            n[(3, i)] = rho * v.z;
        }
        n
    }

    #[test]
    fn cone_fit_undoes_a_random_basis_change() {
        let truth = on_cone(300, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Matrix4::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let hd = DMatrix::from_column_slice(4, 4, h.as_slice());
        let mixed = &hd * &truth;
        let g = fit_null_cone(&mixed, &vec![true; 300]).unwrap();
        let gd = DMatrix::from_column_slice(4, 4, g.as_slice());
        let back = &gd * &mixed;
        for i in 0..300 {
            let c = back.column(i);
            let t = (c[1] * c[1] + c[2] * c[2] + c[3] * c[3]).sqrt();
            assert!((t - c[0]).abs() < 1e-8 * c[0].abs().max(1.0), "{t} {}", c[0]);
            assert!(c[0] > 0.0);
        }
    }

    #[test]
    fn lorentz_preserves_the_cone() {
        let th = SVector::<f64, 6>::from_column_slice(&[0.3, -0.2, 0.9, 0.8, -0.4, 0.1]);
        let g = lorentz(&th);
        let eta = Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, -1.0, -1.0));
        assert!((g.transpose() * eta * g - eta).norm() < 1e-12);
    }

    #[test]
    fn lorentz_anchor_undoes_a_boost() {
        let n = on_cone(300, 4);
        let truth = SVector::<f64, 6>::from_column_slice(&[0.5, 0.1, -0.7, 1.2, 0.3, -0.6]);
        let g = lorentz(&truth);
        let moved = &DMatrix::from_column_slice(4, 4, g.as_slice()) * &n;
        // groups of ten columns, each paired with its own mean normal direction
        let pairs: Vec<_> = (0..30)
            .map(|k| {
                let mut c = Vector4::zeros();
                let mut t = Vector4::zeros();
                for i in 10 * k..10 * k + 10 {
                    c += Vector4::from_iterator(moved.column(i).iter().copied());
                    t += Vector4::from_iterator(n.column(i).iter().copied());
                }
                (c, Vector3::new(t[1], t[2], t[3]).normalize(), 1.0)
            })
            .collect();
        let back = anchor_lorentz(&pairs).unwrap();
        assert!((back * g - Matrix4::identity()).norm() < 1e-6, "{}", back * g);
    }

    #[test]
    fn anchor_recovers_identity() {
        let n = on_cone(50, 5);
        let pairs: Vec<_> = (0..50)
            .map(|i| {
                let c = Vector4::new(n[(0, i)], n[(1, i)], n[(2, i)], n[(3, i)]);
                (c, Vector3::new(c[1], c[2], c[3]) / c[0], 1.0)
            })
            .collect();
        let g = anchor_gauge(&pairs).unwrap();
        let g = g / g[(0, 0)];
        assert!((g - Matrix4::identity()).norm() < 1e-8, "{g}");
    }
}
