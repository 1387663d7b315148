use nalgebra::{Matrix3, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera: x right, y down, z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    pub center: Point3<f64>,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeCamera {
    /// Camera at `center` looking at `target`, image x aligned with world x for frontal views.
    pub fn look_at(center: Point3<f64>, target: Point3<f64>, focal: f64, width: usize, height: usize) -> Result<Self> {
        let fwd = target - center;
        if fwd.norm() < 1e-12 || !(focal > 0.0) || width == 0 || height == 0 {
            return Err(Error::InvalidParameter {
                name: "camera",
                reason: "degenerate camera".into(),
            });
        }
        let z = fwd.normalize();
        let x = z.cross(&Vector3::y());
        if x.norm() < 1e-9 {
            return Err(Error::InvalidParameter {
                name: "camera",
                reason: "view direction parallel to world y".into(),
            });
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self {
            rotation,
            center,
            focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        })
    }

    pub fn to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.center)
    }

    /// Pixel coordinates, `None` behind the camera.
    pub fn project(&self, p: &Point3<f64>) -> Option<Point2<f64>> {
        let c = self.to_camera(p);
        (c.z > 1e-9).then(|| Point2::new(self.focal * c.x / c.z + self.cx, self.focal * c.y / c.z + self.cy))
    }

    /// Unit world-space ray direction through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = Vector3::new((u - self.cx) / self.focal, (v - self.cy) / self.focal, 1.0);
        (self.rotation.transpose() * d).normalize()
    }

    pub fn depth(&self, p: &Point3<f64>) -> f64 {
        self.to_camera(p).z
    }
}
