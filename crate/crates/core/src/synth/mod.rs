//! Ground-truth scenes, multi-view multi-light rendering and the 3D error metric.

mod camera;
mod metric;
pub mod oracle;
mod surface;

pub use camera::PinholeCamera;
pub use metric::{closest_point, error_3d, umeyama, ErrorReport, Similarity};
pub use surface::{Albedo, Bump, HeightSurface};

use nalgebra::{Point2, Point3, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageFrame;
use crate::scalar::{lit, Real};

/// Per-frame lights `[ambient, I·d]`, either listed or drawn at random.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LightSchedule {
    pub ambient: f64,
    /// Elevation above the base plane, degrees.
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Explicit 4-vectors; when non-empty they are used cyclically instead of random lights.
    pub explicit: Vec<[f64; 4]>,
}

impl Default for LightSchedule {
    fn default() -> Self {
        Self {
            ambient: 0.01,
            elevation_min: 35.0,
            elevation_max: 70.0,
            intensity_min: 0.8,
            intensity_max: 1.0,
            explicit: Vec::new(),
        }
    }
}

/// Scene description; deserializable from the TOML scene file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub surface: HeightSurface,
    pub albedo: Albedo,
    pub views: usize,
    /// Angular span of the camera arc about the world y axis, degrees.
    pub arc_degrees: f64,
    /// Every frame uses the frontal camera (photometric stereo at a fixed viewpoint).
    pub static_view: bool,
    pub distance: f64,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub lights: LightSchedule,
    pub noise_sigma: f64,
    /// Sparse points form a jittered `grid_points × grid_points` lattice over `[-0.9, 0.9]²`.
    pub grid_points: usize,
    /// Jitter as a fraction of the lattice spacing.
    pub jitter: f64,
    /// Cells per side of the render tessellation.
    pub tessellation: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            surface: HeightSurface::SphereCap { radius: 1.6 },
            albedo: Albedo::default(),
            views: 30,
            arc_degrees: 50.0,
            static_view: false,
            distance: 4.0,
            focal: 768.0,
            width: 480,
            height: 480,
            lights: LightSchedule::default(),
            noise_sigma: 0.0,
            grid_points: 11,
            jitter: 0.25,
            tessellation: 240,
        }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| {
            Err(Error::InvalidParameter {
                name,
                reason: reason.into(),
            })
        };
        if self.views == 0 {
            return bad("views", "at least one view");
        }
        if self.grid_points < 2 {
            return bad("grid_points", "at least 2");
        }
        if self.tessellation < 2 {
            return bad("tessellation", "at least 2");
        }
        if self.lights.ambient < 0.0 {
            return bad("lights.ambient", "must be non-negative");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma", "must be non-negative");
        }
        if let HeightSurface::SphereCap { radius } = self.surface {
            if radius <= 2f64.sqrt() {
                return bad("surface.radius", "must exceed sqrt(2)");
            }
        }
        Ok(())
    }

    pub fn cameras(&self) -> Result<Vec<PinholeCamera>> {
        let (lo, hi) = self.surface.height_range();
        let target = Point3::new(0.0, 0.0, 0.5 * (lo + hi));
        (0..self.views)
            .map(|g| {
                let theta = if self.static_view || self.views == 1 {
                    0.0
                } else {
                    (-0.5 + g as f64 / (self.views - 1) as f64) * self.arc_degrees.to_radians()
                };
                let center = Point3::new(self.distance * theta.sin(), 0.0, target.z + self.distance * theta.cos());
                PinholeCamera::look_at(center, target, self.focal, self.width, self.height)
            })
            .collect()
    }

    pub fn light_vectors(&self) -> Vec<Vector4<f64>> {
        let s = &self.lights;
        if !s.explicit.is_empty() {
            return (0..self.views)
                .map(|g| Vector4::from(s.explicit[g % s.explicit.len()]))
                .collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0001);
        (0..self.views)
            .map(|_| {
                let az = rng.gen_range(0.0..std::f64::consts::TAU);
                let el = rng.gen_range(s.elevation_min..=s.elevation_max).to_radians();
                let i = rng.gen_range(s.intensity_min..=s.intensity_max);
                let d = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                Vector4::new(s.ambient, i * d.x, i * d.y, i * d.z)
            })
            .collect()
    }

    /// Jittered lattice of base-plane positions for the sparse points.
    pub fn sparse_xy(&self) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0002);
        let n = self.grid_points;
        let step = 1.8 / (n - 1) as f64;
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let mut x = -0.9 + c as f64 * step;
                let mut y = -0.9 + r as f64 * step;
                if r > 0 && r + 1 < n {
                    y += rng.gen_range(-1.0..1.0) * self.jitter * step;
                }
                if c > 0 && c + 1 < n {
                    x += rng.gen_range(-1.0..1.0) * self.jitter * step;
                }
                out.push((x, y));
            }
        }
        out
    }
}

/// Rendered scene with the sparse tracks and ground truth.
#[derive(Clone, Debug)]
pub struct SynthData<T: Real> {
    pub spec: SceneSpec,
    pub frames: Vec<ImageFrame<T>>,
    pub cameras: Vec<PinholeCamera>,
    pub lights: Vec<Vector4<f64>>,
    pub points3d: Vec<Point3<T>>,
    /// `projections[g][i]`, `None` when the point is hidden or back-facing in frame `g`.
    pub projections: Vec<Vec<Option<Point2<T>>>>,
    /// Pixels of the surface region in each frame, for statistics.
    pub covered: Vec<usize>,
}

/// Intensity `ρ (l₀ + max(0, l_d · n))`: attached shadows keep the ambient term.
pub fn shade_clamped(light: &Vector4<f64>, albedo: f64, n: &Vector3<f64>) -> f64 {
    let dir = light[1] * n.x + light[2] * n.y + light[3] * n.z;
    albedo * (light[0] + dir.max(0.0))
}

struct Raster {
    /// World `(x, y)` of the visible surface point per pixel.
    hit: Vec<Option<(f64, f64)>>,
    depth: Vec<f64>,
}

fn rasterize_surface(surface: &HeightSurface, cam: &PinholeCamera, cells: usize) -> Raster {
    let (w, h) = (cam.width, cam.height);
    let mut hit = vec![None; w * h];
    let mut depth = vec![f64::INFINITY; w * h];
    let n = cells + 1;
    let coord = |k: usize| -1.0 + 2.0 * k as f64 / cells as f64;
    let verts: Vec<Point3<f64>> = (0..n * n).map(|k| surface.point(coord(k % n), coord(k / n))).collect();
    let proj: Vec<Option<Point2<f64>>> = verts.iter().map(|p| cam.project(p)).collect();
    for r in 0..cells {
        for c in 0..cells {
            let a = r * n + c;
            let quads = [[a, a + 1, a + n + 1], [a, a + n + 1, a + n]];
            for tri in quads {
                let (Some(p0), Some(p1), Some(p2)) = (proj[tri[0]], proj[tri[1]], proj[tri[2]]) else {
                    continue;
                };
                let d = (p1.x - p0.x) * (p2.y - p0.y) - (p1.y - p0.y) * (p2.x - p0.x);
                if d.abs() < 1e-12 {
                    continue;
                }
                let x0 = p0.x.min(p1.x).min(p2.x).floor().max(0.0) as i64;
                let x1 = p0.x.max(p1.x).max(p2.x).ceil().min(w as f64 - 1.0) as i64;
                let y0 = p0.y.min(p1.y).min(p2.y).floor().max(0.0) as i64;
                let y1 = p0.y.max(p1.y).max(p2.y).ceil().min(h as f64 - 1.0) as i64;
                let (v0, v1, v2) = (verts[tri[0]], verts[tri[1]], verts[tri[2]]);
                let normal = (v1 - v0).cross(&(v2 - v0));
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let (px, py) = (x as f64, y as f64);
                        let b1 = ((px - p0.x) * (p2.y - p0.y) - (py - p0.y) * (p2.x - p0.x)) / d;
                        let b2 = ((p1.x - p0.x) * (py - p0.y) - (p1.y - p0.y) * (px - p0.x)) / d;
                        let b0 = 1.0 - b1 - b2;
                        if b0 < -1e-9 || b1 < -1e-9 || b2 < -1e-9 {
                            continue;
                        }
                        let ray = cam.ray(px, py);
                        let den = normal.dot(&ray);
                        if den.abs() < 1e-15 {
                            continue;
                        }
                        let t = normal.dot(&(v0 - cam.center)) / den;
                        let world = cam.center + ray * t;
                        let z = cam.depth(&world);
                        let idx = y as usize * w + x as usize;
                        if z > 0.0 && z < depth[idx] {
                            depth[idx] = z;
                            hit[idx] = Some((world.x.clamp(-1.0, 1.0), world.y.clamp(-1.0, 1.0)));
                        }
                    }
                }
            }
        }
    }
    Raster { hit, depth }
}

/// Renders every frame and derives the sparse tracks.
pub fn render<T: Real>(spec: &SceneSpec) -> Result<SynthData<T>> {
    spec.validate()?;
    let cameras = spec.cameras()?;
    let lights = spec.light_vectors();
    let xy = spec.sparse_xy();
    let points: Vec<Point3<f64>> = xy.iter().map(|&(x, y)| spec.surface.point(x, y)).collect();
    let rendered: Vec<(ImageFrame<T>, Vec<Option<Point2<T>>>, usize)> = cameras
        .par_iter()
        .enumerate()
        .map(|(g, cam)| {
            let raster = rasterize_surface(&spec.surface, cam, spec.tessellation);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(g as u64));
            let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
            let mut covered = 0;
            let pixels: Vec<T> = raster
                .hit
                .iter()
                .map(|h| match h {
                    Some((x, y)) => {
                        covered += 1;
                        let n = spec.surface.normal(*x, *y);
                        let mut v = shade_clamped(&lights[g], spec.albedo.at(*x, *y), &n);
                        if spec.noise_sigma > 0.0 {
                            v += noise.sample(&mut rng);
                        }
                        lit(v.clamp(0.0, 1.0))
                    }
                    None => T::zero(),
                })
                .collect();
            let frame = ImageFrame {
                width: cam.width,
                height: cam.height,
                pixels,
                frame_id: g,
            };
            let proj = points
                .iter()
                .map(|p| {
                    let q = cam.project(p)?;
                    let (u, v) = (q.x.round(), q.y.round());
                    if u < 0.0 || v < 0.0 || u >= cam.width as f64 || v >= cam.height as f64 {
                        return None;
                    }
                    let n = spec.surface.normal(p.x, p.y);
                    if n.dot(&(cam.center - p)) <= 0.0 {
                        return None;
                    }
                    let zb = raster.depth[v as usize * cam.width + u as usize];
                    if cam.depth(p) > zb + 0.01 * spec.distance {
                        return None;
                    }
                    Some(Point2::new(lit::<T>(q.x), lit::<T>(q.y)))
                })
                .collect();
            (frame, proj, covered)
        })
        .collect();
    let mut frames = Vec::with_capacity(rendered.len());
    let mut projections = Vec::with_capacity(rendered.len());
    let mut covered = Vec::with_capacity(rendered.len());
    for (f, p, c) in rendered {
        frames.push(f);
        projections.push(p);
        covered.push(c);
    }
    Ok(SynthData {
        spec: spec.clone(),
        frames,
        cameras,
        lights,
        points3d: points
            .iter()
            .map(|p| Point3::new(lit(p.x), lit(p.y), lit(p.z)))
            .collect(),
        projections,
        covered,
    })
}
