use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Height surface `z = h(x, y)` over the square `[-1, 1]²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeightSurface {
    /// `z = a x + b y + c`
    Plane { a: f64, b: f64, c: f64 },
    /// Upper cap of a sphere of the given radius (> √2) clipped to zero at the square corners.
    SphereCap { radius: f64 },
    /// Sum of isotropic Gaussian bumps.
    Potato { bumps: Vec<Bump> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
    pub sigma: f64,
}

impl HeightSurface {
    fn cap_offset(radius: f64) -> f64 {
        (radius * radius - 2.0).max(0.0).sqrt()
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        match self {
            Self::Plane { a, b, c } => a * x + b * y + c,
            Self::SphereCap { radius } => {
                let r2 = (radius * radius - x * x - y * y).max(0.0);
                r2.sqrt() - Self::cap_offset(*radius)
            }
            Self::Potato { bumps } => bumps
                .iter()
                .map(|k| {
                    let d2 = (x - k.x).powi(2) + (y - k.y).powi(2);
                    k.amplitude * (-d2 / (2.0 * k.sigma * k.sigma)).exp()
                })
                .sum(),
        }
    }

    /// `(∂h/∂x, ∂h/∂y)`.
    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Self::Plane { a, b, .. } => (*a, *b),
            Self::SphereCap { radius } => {
                let s = (radius * radius - x * x - y * y).max(1e-12).sqrt();
                (-x / s, -y / s)
            }
            Self::Potato { bumps } => bumps.iter().fold((0.0, 0.0), |(gx, gy), k| {
                let d2 = (x - k.x).powi(2) + (y - k.y).powi(2);
                let e = k.amplitude * (-d2 / (2.0 * k.sigma * k.sigma)).exp();
                let s2 = k.sigma * k.sigma;
                (gx - e * (x - k.x) / s2, gy - e * (y - k.y) / s2)
            }),
        }
    }

    /// Unit upward normal.
    pub fn normal(&self, x: f64, y: f64) -> Vector3<f64> {
        let (p, q) = self.gradient(x, y);
        Vector3::new(-p, -q, 1.0).normalize()
    }

    pub fn point(&self, x: f64, y: f64) -> nalgebra::Point3<f64> {
        nalgebra::Point3::new(x, y, self.height(x, y))
    }

    /// Height range over the domain, sampled on a grid.
    pub fn height_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let n = 101;
        for i in 0..n {
            for j in 0..n {
                let x = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
                let y = -1.0 + 2.0 * j as f64 / (n - 1) as f64;
                let z = self.height(x, y);
                lo = lo.min(z);
                hi = hi.max(z);
            }
        }
        (lo, hi)
    }
}

/// Spatially varying albedo in `(0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Albedo {
    Constant {
        value: f64,
    },
    /// `base + amplitude · sin(frequency·π·x) · sin(frequency·π·y)`
    Sinusoid {
        base: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl Default for Albedo {
    fn default() -> Self {
        Self::Constant { value: 0.8 }
    }
}

impl Albedo {
    pub fn at(&self, x: f64, y: f64) -> f64 {
        let v = match self {
            Self::Constant { value } => *value,
            Self::Sinusoid {
                base,
                amplitude,
                frequency,
            } => {
                let w = frequency * std::f64::consts::PI;
                base + amplitude * (w * x).sin() * (w * y).sin()
            }
        };
        v.clamp(0.0, 1.0)
    }
}
