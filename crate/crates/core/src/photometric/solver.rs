//! Masked bilinear factorization `min ‖D ⊙ (J − L·N)‖²` with the columns of `N` on the
//! photometric manifold.
//!
//! Without an initial guess the solver first completes the matrix at rank 4 with damped
//! Wiberg iterations (surface eliminated, Levenberg-Marquardt on the lighting), then finds the linear change of basis that puts the columns on
//! the null cone of the Minkowski metric, and finally runs constrained alternation. Every
//! accepted update lowers its own block of the objective, so the outer objective is monotone.

use nalgebra::{DMatrix, Matrix3x4, Matrix4, SymmetricEigen, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::gauge::{apply_gauge, fit_null_cone};
use super::{project_manifold, PhotometricFactors};
use crate::error::{Error, Result};
use crate::register::{PatchStack, MIN_OBSERVATIONS};
use crate::scalar::{from_usize, lit, to_f64, Real};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Relative objective change that stops the constrained alternation.
    pub tol: f64,
    /// Residual, relative to the observed energy, below which the alternation stops.
    pub converged: f64,
    pub max_iters: usize,
    /// Iteration cap for the unconstrained rank-4 completion used as initialization.
    pub init_iters: usize,
    /// Gauss-Newton steps per column and outer iteration on (ρ, n).
    pub newton_steps: usize,
    /// Relative Tikhonov weight keeping the 4x4 normal equations invertible.
    pub ridge: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            converged: 1e-10,
            max_iters: 300,
            init_iters: 200,
            newton_steps: 3,
            ridge: 1e-12,
        }
    }
}

/// `Σ_{D=1} (J − L·N)²`.
pub fn masked_residual<T: Real>(j: &DMatrix<T>, d: &DMatrix<bool>, l: &DMatrix<T>, n: &DMatrix<T>) -> T {
    let mut acc = T::zero();
    for i in 0..j.ncols() {
        for g in 0..j.nrows() {
            if d[(g, i)] {
                let mut p = T::zero();
                for k in 0..4 {
                    p += l[(g, k)] * n[(k, i)];
                }
                let r = j[(g, i)] - p;
                acc += r * r;
            }
        }
    }
    acc
}

fn observed_energy<T: Real>(j: &DMatrix<T>, d: &DMatrix<bool>) -> T {
    j.iter()
        .zip(d.iter())
        .filter(|(_, o)| **o)
        .fold(T::zero(), |a, (v, _)| a + *v * *v)
}

#[inline]
fn row4<T: Real>(m: &DMatrix<T>, r: usize) -> Vector4<T> {
    Vector4::new(m[(r, 0)], m[(r, 1)], m[(r, 2)], m[(r, 3)])
}

#[inline]
fn col4<T: Real>(m: &DMatrix<T>, c: usize) -> Vector4<T> {
    Vector4::new(m[(0, c)], m[(1, c)], m[(2, c)], m[(3, c)])
}

fn set_row4<T: Real>(m: &mut DMatrix<T>, r: usize, v: &Vector4<T>) {
    for k in 0..4 {
        m[(r, k)] = v[k];
    }
}

fn set_col4<T: Real>(m: &mut DMatrix<T>, c: usize, v: &Vector4<T>) {
    for k in 0..4 {
        m[(k, c)] = v[k];
    }
}

/// Normal equations `(M, v, s)` of one block: objective `xᵀMx − 2vᵀx + s`.
struct Normal<T: Real> {
    m: Matrix4<T>,
    v: Vector4<T>,
    s: T,
    count: usize,
}

impl<T: Real> Normal<T> {
    fn zero() -> Self {
        Self {
            m: Matrix4::zeros(),
            v: Vector4::zeros(),
            s: T::zero(),
            count: 0,
        }
    }

    #[inline]
    fn add(&mut self, a: &Vector4<T>, y: T) {
        self.m += a * a.transpose();
        self.v += a * y;
        self.s += y * y;
        self.count += 1;
    }

    #[inline]
    fn eval(&self, x: &Vector4<T>) -> T {
        (x.transpose() * self.m * x)[0] - lit::<T>(2.0) * self.v.dot(x) + self.s
    }

    /// Minimizer of the objective plus `eps‖x − anchor‖²`, `eps` relative to the trace.
    fn solve_damped(&self, anchor: &Vector4<T>, ridge: T) -> Option<Vector4<T>> {
        let eps = ridge * (self.m.trace() + lit(1e-300)) + lit(1e-300);
        let a = self.m + Matrix4::identity() * eps;
        a.cholesky().map(|c| c.solve(&(self.v + anchor * eps)))
    }
}

fn column_normal<T: Real>(j: &DMatrix<T>, d: &DMatrix<bool>, l: &DMatrix<T>, i: usize) -> Normal<T> {
    let mut ne = Normal::zero();
    for g in 0..j.nrows() {
        if d[(g, i)] {
            ne.add(&row4(l, g), j[(g, i)]);
        }
    }
    ne
}

fn row_normal<T: Real>(j: &DMatrix<T>, d: &DMatrix<bool>, n: &DMatrix<T>, g: usize) -> Normal<T> {
    let mut ne = Normal::zero();
    for i in 0..j.ncols() {
        if d[(g, i)] {
            ne.add(&col4(n, i), j[(g, i)]);
        }
    }
    ne
}

fn lighting_step<T: Real>(j: &DMatrix<T>, d: &DMatrix<bool>, l: &mut DMatrix<T>, n: &DMatrix<T>, ridge: T) {
    for g in 0..j.nrows() {
        let ne = row_normal(j, d, n, g);
        if ne.count == 0 {
            continue;
        }
        let cur = row4(l, g);
        if let Some(x) = ne.solve_damped(&cur, ridge) {
            if ne.eval(&x) <= ne.eval(&cur) {
                set_row4(l, g, &x);
            }
        }
    }
}

/// Best `ρ ≥ 0` for a fixed unit normal.
fn best_albedo<T: Real>(ne: &Normal<T>, n: &Vector3<T>) -> Vector4<T> {
    let a = Vector4::new(T::one(), n.x, n.y, n.z);
    let den = (a.transpose() * ne.m * a)[0];
    let rho = if den > T::zero() {
        (ne.v.dot(&a) / den).max(T::zero())
    } else {
        T::zero()
    };
    a * rho
}

fn tangent_basis<T: Real>(n: &Vector3<T>) -> (Vector3<T>, Vector3<T>) {
    let helper = if n.x.abs() < lit(0.6) {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

/// Constrained update of one surface column; never increases the column objective.
fn update_column<T: Real>(ne: &Normal<T>, current: &Vector4<T>, ridge: T, steps: usize) -> Vector4<T> {
    let mut best = *current;
    let mut best_val = ne.eval(&best);
    if let Some(x) = ne.solve_damped(current, ridge) {
        let (p, _) = project_manifold(&x);
        let cand = match normal_of(&p) {
            Some(n) => best_albedo(ne, &n),
            None => p,
        };
        let v = ne.eval(&cand);
        if v < best_val {
            best = cand;
            best_val = v;
        }
    }
    for _ in 0..steps {
        let Some(n) = normal_of(&best) else { break };
        let rho = best[0];
        let (e1, e2) = tangent_basis(&n);
        // c(ρ, t) = ρ [1; normalize(n + t1 e1 + t2 e2)]
        let jac = Matrix3x4::from_rows(&[
            Vector4::new(T::one(), n.x, n.y, n.z).transpose(),
            Vector4::new(T::zero(), e1.x * rho, e1.y * rho, e1.z * rho).transpose(),
            Vector4::new(T::zero(), e2.x * rho, e2.y * rho, e2.z * rho).transpose(),
        ])
        .transpose();
        let h = jac.transpose() * ne.m * jac;
        let grad = jac.transpose() * (ne.v - ne.m * best);
        let damp = (h.trace() + lit(1e-300)) * lit(1e-10);
        let Some(delta) = (h + nalgebra::Matrix3::identity() * damp)
            .cholesky()
            .map(|c| c.solve(&grad))
        else {
            break;
        };
        let mut step = T::one();
        let mut improved = false;
        for _ in 0..12 {
            let nn = (n + e1 * (delta[1] * step) + e2 * (delta[2] * step)).normalize();
            let cand = best_albedo(ne, &nn);
            let v = ne.eval(&cand);
            if v < best_val {
                best = cand;
                best_val = v;
                improved = true;
                break;
            }
            step *= lit(0.5);
        }
        if !improved {
            break;
        }
    }
    best
}

fn normal_of<T: Real>(c: &Vector4<T>) -> Option<Vector3<T>> {
    let t = Vector3::new(c[1], c[2], c[3]);
    let len = t.norm();
    (len > T::zero() && len.is_finite()).then(|| t / len)
}

fn surface_step<T: Real>(
    j: &DMatrix<T>,
    d: &DMatrix<bool>,
    l: &DMatrix<T>,
    n: &mut DMatrix<T>,
    ridge: T,
    steps: usize,
) {
    for i in 0..j.ncols() {
        let ne = column_normal(j, d, l, i);
        if ne.count == 0 {
            continue;
        }
        let cur = col4(n, i);
        let next = update_column(&ne, &cur, ridge, steps);
        set_col4(n, i, &next);
    }
}

/// Best on-manifold surface for fixed lighting, starting from the unconstrained estimate.
pub fn update_surface_given_lighting<T: Real>(
    j: &DMatrix<T>,
    d: &DMatrix<bool>,
    l: &DMatrix<T>,
    opts: &SolverOptions,
) -> DMatrix<T> {
    let ridge: T = lit(opts.ridge.max(1e-9));
    let mut n = DMatrix::zeros(4, j.ncols());
    for i in 0..j.ncols() {
        let ne = column_normal(j, d, l, i);
        if ne.count == 0 {
            continue;
        }
        let x = ne.solve_damped(&Vector4::zeros(), ridge).unwrap_or_else(Vector4::zeros);
        let (p, _) = project_manifold(&x);
        let start = match normal_of(&p) {
            Some(nv) => best_albedo(&ne, &nv),
            None => p,
        };
        let next = update_column(&ne, &start, ridge, opts.newton_steps.max(1) * 3);
        set_col4(&mut n, i, &next);
    }
    n
}

/// Rank-4 start from column-mean filling and the top eigenvectors of the row Gram matrix.
fn spectral_init<T: Real>(j: &DMatrix<T>, d: &DMatrix<bool>) -> (DMatrix<T>, DMatrix<T>) {
    let (f, b) = j.shape();
    let total = d.iter().filter(|x| **x).count().max(1);
    let global = observed_energy(j, d).sqrt() / from_usize::<T>(total).sqrt();
    let mut filled = j.clone();
    for i in 0..b {
        let (mut s, mut c) = (T::zero(), 0usize);
        for g in 0..f {
            if d[(g, i)] {
                s += j[(g, i)];
                c += 1;
            }
        }
        let mean = if c > 0 { s / from_usize(c) } else { global };
        for g in 0..f {
            if !d[(g, i)] {
                filled[(g, i)] = mean;
            }
        }
    }
    let gram = &filled * filled.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut l = DMatrix::zeros(f, 4);
    let mut n = DMatrix::zeros(4, b);
    let top = eig.eigenvalues[order[0]].max(lit(1e-300));
    for k in 0..4.min(f) {
        let lam = eig.eigenvalues[order[k]].max(top * lit(1e-12));
        let u = eig.eigenvectors.column(order[k]);
        let s = lam.sqrt();
        for g in 0..f {
            l[(g, k)] = u[g] * s;
        }
        let proj = u.transpose() * &filled;
        for i in 0..b {
            n[(k, i)] = proj[i] / s;
        }
    }
    (l, n)
}

/// Observed frame indices of every column.
fn observed_rows(d: &DMatrix<bool>) -> Vec<Vec<usize>> {
    (0..d.ncols())
        .map(|i| (0..d.nrows()).filter(|&g| d[(g, i)]).collect())
        .collect()
}

/// Least-squares surface for fixed lighting, column by column, and the resulting cost.
fn eliminate_surface<T: Real>(j: &DMatrix<T>, rows: &[Vec<usize>], l: &DMatrix<T>, n: &mut DMatrix<T>, ridge: T) -> T {
    let mut cost = T::zero();
    for (i, obs) in rows.iter().enumerate() {
        if obs.is_empty() {
            continue;
        }
        let mut ne = Normal::zero();
        for &g in obs {
            ne.add(&row4(l, g), j[(g, i)]);
        }
        let x = ne.solve_damped(&Vector4::zeros(), ridge).unwrap_or_else(Vector4::zeros);
        set_col4(n, i, &x);
        cost += ne.eval(&x).max(T::zero());
    }
    cost
}

/// Unconstrained rank-4 completion by damped Wiberg iterations: the surface is eliminated in
/// closed form and Levenberg-Marquardt steps are taken on the lighting alone.
fn wiberg<T: Real>(
    j: &DMatrix<T>,
    d: &DMatrix<bool>,
    l: &mut DMatrix<T>,
    n: &mut DMatrix<T>,
    iters: usize,
    ridge: T,
    floor: T,
) {
    let f = j.nrows();
    let dim = 4 * f;
    let rows = observed_rows(d);
    let mut cost = eliminate_surface(j, &rows, l, n, ridge);
    let mut lambda = T::zero();
    for _ in 0..iters {
        if cost <= floor {
            break;
        }
        let mut h = DMatrix::<T>::zeros(dim, dim);
        let mut grad = nalgebra::DVector::<T>::zeros(dim);
        for (i, obs) in rows.iter().enumerate() {
            let k = obs.len();
            if k <= 4 {
                continue;
            }
            let nv = col4(n, i);
            let a = DMatrix::from_fn(k, 4, |r, c| l[(obs[r], c)]);
            let ata = a.transpose() * &a;
            let eps = ridge * (ata.trace() + lit(1e-300)) + lit(1e-300);
            let Some(inv) = (ata + DMatrix::identity(4, 4) * eps).try_inverse() else {
                continue;
            };
            let q = DMatrix::identity(k, k) - &a * inv * a.transpose();
            let nnt = nv * nv.transpose();
            for (ra, &ga) in obs.iter().enumerate() {
                let r = j[(ga, i)] - row4(l, ga).dot(&nv);
                for c in 0..4 {
                    grad[4 * ga + c] += r * nv[c];
                }
                for (rb, &gb) in obs.iter().enumerate() {
                    let w = q[(ra, rb)];
                    for c1 in 0..4 {
                        for c2 in 0..4 {
                            h[(4 * ga + c1, 4 * gb + c2)] += w * nnt[(c1, c2)];
                        }
                    }
                }
            }
        }
        let diag_mean = (0..dim).fold(T::zero(), |s, k| s + h[(k, k)]) / from_usize::<T>(dim);
        if !(diag_mean > T::zero()) {
            break;
        }
        if lambda == T::zero() {
            lambda = diag_mean * lit(1e-4);
        }
        let mut accepted = false;
        for _ in 0..20 {
            let damped = &h + DMatrix::identity(dim, dim) * lambda;
            let Some(chol) = damped.cholesky() else {
                lambda *= lit(4.0);
                continue;
            };
            let delta = chol.solve(&grad);
            let mut trial = l.clone();
            for g in 0..f {
                for c in 0..4 {
                    trial[(g, c)] += delta[4 * g + c];
                }
            }
            let mut trial_n = n.clone();
            let trial_cost = eliminate_surface(j, &rows, &trial, &mut trial_n, ridge);
            if trial_cost < cost {
                let gain = cost - trial_cost;
                *l = trial;
                *n = trial_n;
                cost = trial_cost;
                lambda = (lambda / lit(3.0)).max(diag_mean * lit(1e-15));
                accepted = true;
                if gain <= cost * lit(1e-12) {
                    return;
                }
                break;
            }
            lambda *= lit(4.0);
        }
        if !accepted {
            break;
        }
    }
}

fn validate<T: Real>(j: &DMatrix<T>, d: &DMatrix<bool>) -> Result<()> {
    let (f, b) = j.shape();
    if d.shape() != (f, b) {
        return Err(Error::ShapeMismatch(format!(
            "J is {}x{}, D is {}x{}",
            f,
            b,
            d.nrows(),
            d.ncols()
        )));
    }
    if b == 0 {
        return Err(Error::Empty("patch stack"));
    }
    if !d.iter().any(|x| *x) {
        return Err(Error::AllUnobserved);
    }
    if f < 4 {
        return Err(Error::UnderConstrained(format!("{f} frames, need at least 4")));
    }
    let usable = (0..f).filter(|&g| d.row(g).iter().any(|x| *x)).count();
    if usable < 4 {
        return Err(Error::UnderConstrained(format!(
            "{usable} frames with observations, need 4"
        )));
    }
    if !(0..b).any(|i| d.column(i).iter().filter(|x| **x).count() >= MIN_OBSERVATIONS) {
        return Err(Error::UnderConstrained("no column observed in 4 frames".into()));
    }
    Ok(())
}

/// Solves the masked factorization for the stack of one patch.
pub fn solve_patch<T: Real>(
    stack: &PatchStack<T>,
    init: Option<&PhotometricFactors<T>>,
    opts: &SolverOptions,
) -> Result<PhotometricFactors<T>> {
    solve_masked(&stack.intensities, &stack.observed, init, opts)
}

/// [`solve_patch`] on a bare intensity matrix and mask.
pub fn solve_masked<T: Real>(
    j: &DMatrix<T>,
    d: &DMatrix<bool>,
    init: Option<&PhotometricFactors<T>>,
    opts: &SolverOptions,
) -> Result<PhotometricFactors<T>> {
    validate(j, d)?;
    let (f, b) = j.shape();
    let ridge: T = lit(opts.ridge);
    let energy = observed_energy(j, d);
    let floor = energy * lit(1e-24);
    let done = energy * lit(opts.converged.max(0.0));

    let (mut l, mut n) = match init {
        Some(fac) => {
            if fac.lighting.shape() != (f, 4) || fac.surface.shape() != (4, b) {
                return Err(Error::ShapeMismatch("initial factors do not match the stack".into()));
            }
            (fac.lighting.clone(), fac.surface.clone())
        }
        None => {
            let (mut l, mut n) = spectral_init(j, d);
            wiberg(j, d, &mut l, &mut n, opts.init_iters, ridge, floor);
            let strong: Vec<bool> = (0..b)
                .map(|i| d.column(i).iter().filter(|x| **x).count() >= MIN_OBSERVATIONS)
                .collect();
            let g = fit_null_cone(&n, &strong).unwrap_or_else(Matrix4::identity);
            apply_gauge(&mut l, &mut n, &g);
            (l, n)
        }
    };
    for i in 0..b {
        let (p, _) = project_manifold(&col4(&n, i));
        set_col4(&mut n, i, &p);
    }
    // an on-manifold start may still be improved by the exact albedo for its normal
    for i in 0..b {
        let ne = column_normal(j, d, &l, i);
        if ne.count == 0 {
            continue;
        }
        let cur = col4(&n, i);
        if let Some(nv) = normal_of(&cur) {
            let c = best_albedo(&ne, &nv);
            if ne.eval(&c) < ne.eval(&cur) {
                set_col4(&mut n, i, &c);
            }
        }
    }

    let mut obj = masked_residual(j, d, &l, &n);
    let mut trace = vec![to_f64(obj)];
    let tol: T = lit(opts.tol);
    let mut iterations = 0;
    while iterations < opts.max_iters && obj > floor && obj > done {
        lighting_step(j, d, &mut l, &n, ridge);
        surface_step(j, d, &l, &mut n, ridge, opts.newton_steps);
        iterations += 1;
        let next = masked_residual(j, d, &l, &n);
        trace.push(to_f64(next));
        let change = obj - next;
        obj = next;
        if change <= tol * obj.max(floor) {
            break;
        }
    }
    let degenerate = (0..b).filter(|&i| normal_of(&col4(&n, i)).is_none()).collect();
    Ok(PhotometricFactors {
        lighting: l,
        surface: n,
        residual: obj,
        iterations,
        trace,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(f: usize, b: usize, missing: f64, seed: u64) -> (DMatrix<f64>, DMatrix<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = DMatrix::from_fn(f, 4, |_, k| {
            if k == 0 {
                rng.gen_range(0.1..0.4)
            } else {
                rng.gen_range(-1.0..1.0)
            }
        });
        let n = DMatrix::from_fn(4, b, |_, _| 0.0);
        let mut n = n;
        for i in 0..b {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.2..1.0),
            )
            .normalize();
            let rho = rng.gen_range(0.3..1.0);
            set_col4(&mut n, i, &Vector4::new(rho, rho * v.x, rho * v.y, rho * v.z));
        }
        let j = &l * &n;
        let d = DMatrix::from_fn(f, b, |_, _| rng.gen::<f64>() >= missing);
        (j, d)
    }

    #[test]
    fn full_stack_is_fit_exactly() {
        let (j, d) = random_problem(12, 200, 0.0, 1);
        let fac = solve_masked(&j, &d, None, &SolverOptions::default()).unwrap();
        let e = observed_energy(&j, &d);
        assert!(fac.residual <= 1e-8 * e, "{} vs {}", fac.residual, e);
        for i in 0..200 {
            let c = col4(&fac.surface, i);
            let t = Vector3::new(c[1], c[2], c[3]).norm();
            assert!((t - c[0]).abs() <= 1e-6 * c[0].max(1e-12));
        }
    }

    #[test]
    fn trace_is_monotone() {
        let (j, d) = random_problem(10, 150, 0.4, 2);
        let fac = solve_masked(&j, &d, None, &SolverOptions::default()).unwrap();
        for w in fac.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0));
        }
    }

    #[test]
    fn errors() {
        let (j, d) = random_problem(3, 20, 0.0, 3);
        assert!(matches!(
            solve_masked(&j, &d, None, &SolverOptions::default()),
            Err(Error::UnderConstrained(_))
        ));
        let (j, _) = random_problem(6, 20, 0.0, 3);
        let none = DMatrix::from_element(6, 20, false);
        assert!(matches!(
            solve_masked(&j, &none, None, &SolverOptions::default()),
            Err(Error::AllUnobserved)
        ));
        let mut three = DMatrix::from_element(6, 20, false);
        for g in 0..3 {
            three.row_mut(g).fill(true);
        }
        assert!(matches!(
            solve_masked(&j, &three, None, &SolverOptions::default()),
            Err(Error::UnderConstrained(_))
        ));
    }

    #[test]
    fn column_update_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut ne = Normal::<f64>::zero();
            for _ in 0..rng.gen_range(1..8) {
                let a = Vector4::new(
                    rng.gen_range(0.0..0.5),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                ne.add(&a, rng.gen_range(0.0..1.0));
            }
            let n = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let cur = Vector4::new(0.5, 0.5 * n.x, 0.5 * n.y, 0.5 * n.z);
            let next = update_column(&ne, &cur, 1e-12, 3);
            assert!(ne.eval(&next) <= ne.eval(&cur) + 1e-15);
        }
    }
}
