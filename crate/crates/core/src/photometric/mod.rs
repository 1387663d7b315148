//! First-order spherical-harmonic shading, the photometric manifold, the masked bilinear
//! solver and normal integration.

mod gauge;
mod integrate;
mod solver;

pub use gauge::{anchor_gauge, anchor_lorentz, apply_gauge, fit_null_cone, lorentz};
pub use integrate::{
    integrate_normal_field, integrate_patch, patch_curvature, Curvature, GridSpec, HeightField, IntegrationBackend,
    NZ_CLAMP,
};
pub use solver::{masked_residual, solve_masked, solve_patch, update_surface_given_lighting, SolverOptions};

use nalgebra::{DMatrix, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};

/// Intensity `lᵀ · ρ[1; n]`.
pub fn shade<T: Real>(light: &Vector4<T>, albedo: T, normal: &Vector3<T>) -> Result<T> {
    let len = normal.norm();
    if (len - T::one()).abs() > lit(1e-6) {
        return Err(Error::NonUnitNormal(to_f64(len)));
    }
    if albedo < T::zero() {
        return Err(Error::InvalidParameter {
            name: "albedo",
            reason: "must be non-negative".into(),
        });
    }
    Ok(albedo * (light[0] + light[1] * normal.x + light[2] * normal.y + light[3] * normal.z))
}

/// Nearest point `ρ[1; n]` on the photometric manifold.
///
/// Returns the projected column and `true` when the tail vanished and the normal is undefined;
/// in that case the result is the albedo-only column `[max(0, head), 0, 0, 0]`.
pub fn project_manifold<T: Real>(c: &Vector4<T>) -> (Vector4<T>, bool) {
    let tail = Vector3::new(c[1], c[2], c[3]);
    let len = tail.norm();
    if !(len > T::zero()) || !len.is_finite() {
        return (Vector4::new(c[0].max(T::zero()), T::zero(), T::zero(), T::zero()), true);
    }
    let n = tail / len;
    let rho = ((c[0] + len) * lit(0.5)).max(T::zero());
    (Vector4::new(rho, rho * n.x, rho * n.y, rho * n.z), false)
}

/// Lighting `L` (f×4), surface `N` (4×b) and the final masked residual.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhotometricFactors<T: Real> {
    pub lighting: DMatrix<T>,
    pub surface: DMatrix<T>,
    pub residual: T,
    pub iterations: usize,
    /// Objective value after each outer iteration.
    pub trace: Vec<f64>,
    /// Columns whose normal is undefined (zero albedo or zero tail).
    pub degenerate: Vec<usize>,
}

impl<T: Real> PhotometricFactors<T> {
    pub fn albedo(&self, i: usize) -> T {
        self.surface[(0, i)]
    }

    /// Unit normal of column `i`; `None` when the column is degenerate.
    pub fn normal(&self, i: usize) -> Option<Vector3<T>> {
        let t = Vector3::new(self.surface[(1, i)], self.surface[(2, i)], self.surface[(3, i)]);
        let len = t.norm();
        (len > T::zero() && len.is_finite()).then(|| t / len)
    }

    /// Full predicted stack `L · N`.
    pub fn predicted(&self) -> DMatrix<T> {
        &self.lighting * &self.surface
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn shade_spot_values() {
        let n = Vector3::new(0.3, -0.4, (1.0f64 - 0.25).sqrt());
        assert_relative_eq!(shade(&Vector4::new(1.0, 0.0, 0.0, 0.0), 0.5, &n).unwrap(), 0.5);
        let z = Vector3::z();
        assert_relative_eq!(shade(&Vector4::new(0.2, 0.0, 0.0, 1.0), 0.5, &z).unwrap(), 0.6);
        assert!(matches!(
            shade(&Vector4::new(1.0, 0.0, 0.0, 0.0), 0.5, &Vector3::new(0.0, 0.0, 1.1)),
            Err(Error::NonUnitNormal(_))
        ));
    }

    #[test]
    fn projection_spot_values() {
        let (p, deg) = project_manifold(&Vector4::new(2.0, 0.0, 0.0, 4.0));
        assert!(!deg);
        assert_relative_eq!(p, Vector4::new(3.0, 0.0, 0.0, 3.0));
        let on = Vector4::new(0.7, 0.0, 0.7 * 0.6, 0.7 * 0.8);
        assert_relative_eq!(project_manifold(&on).0, on, epsilon = 1e-12);
        let (p, deg) = project_manifold(&Vector4::new(-1.0, 0.0, 0.0, 0.0));
        assert!(deg);
        assert_eq!(p, Vector4::zeros());
        let (p, _) = project_manifold(&Vector4::new(-5.0, 0.0, 1.0, 0.0));
        assert_eq!(p, Vector4::zeros());
    }
}
