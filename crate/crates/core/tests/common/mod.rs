//! Property checks shared by the property suite and the acceptance run. Each check drives
//! a deterministic proptest runner for `CASES` cases and returns the first failure.

#![allow(dead_code)]

use mvps_core::align::{lift_to_facet, patch_curvature, solve_corrections, AlignOptions, FacetPointSet};
use mvps_core::decompose::{extract_patch, rasterize_mask};
use mvps_core::geometry::{
    barycentric_of, build_mesh, delaunay_triangulation, enlarge_triangle, facet_frame, MeshOptions, Triangle2,
    Triangle3,
};
use mvps_core::image::ImageFrame;
use mvps_core::photometric::{solve_masked, SolverOptions};
use mvps_core::pipeline::{build_stacks, PipelineConfig};
use mvps_core::refine::{refine, weight_from_barycentric, RawSurface, RefineOptions, SurfacePoint};
use mvps_core::register::MIN_OBSERVATIONS;
use mvps_core::synth::oracle::{frontal_mesh, true_patches};
use mvps_core::synth::{render, HeightSurface, LightSchedule, SceneSpec};
use nalgebra::{DMatrix, Point2, Point3, Rotation3, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: u32 = 100;

fn runner() -> TestRunner {
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        max_shrink_iters: 64,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn check<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner().run(&strategy, test).map_err(|e| e.to_string())
}

fn point2(range: f64) -> impl Strategy<Value = Point2<f64>> {
    (-range..range, -range..range).prop_map(|(x, y)| Point2::new(x, y))
}

fn triangle2(range: f64) -> impl Strategy<Value = Triangle2<f64>> {
    [point2(range), point2(range), point2(range)].prop_filter("well shaped", |t| {
        let area = 0.5 * ((t[1] - t[0]).perp(&(t[2] - t[0]))).abs();
        let longest = (0..3)
            .map(|k| (t[(k + 1) % 3] - t[k]).norm_squared())
            .fold(0.0, f64::max);
        area > 1.0 && longest / area < 40.0
    })
}

fn triangle3() -> impl Strategy<Value = Triangle3<f64>> {
    let p = || (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z));
    [p(), p(), p()].prop_filter("non-degenerate", |t| (t[1] - t[0]).cross(&(t[2] - t[0])).norm() > 0.5)
}

fn on_manifold(f: usize, b: usize, missing: f64, seed: u64) -> (DMatrix<f64>, DMatrix<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = DMatrix::from_fn(f, 4, |_, k| {
        if k == 0 {
            rng.gen_range(0.1..0.4)
        } else {
            rng.gen_range(-1.0..1.0)
        }
    });
    let mut n = DMatrix::zeros(4, b);
    for i in 0..b {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.2..1.0),
        )
        .normalize();
        let rho = rng.gen_range(0.3..1.0);
        n.set_column(i, &nalgebra::Vector4::new(rho, rho * v.x, rho * v.y, rho * v.z));
    }
    let d = DMatrix::from_fn(f, b, |_, _| rng.gen::<f64>() >= missing);
    (&l * &n, d)
}

pub fn barycentric_sums() -> Result<(), String> {
    check((triangle2(40.0), 1.0..1.8f64), |(tri, s)| {
        let big = enlarge_triangle(&tri, s).unwrap();
        let shifted = big.map(|p| p + nalgebra::Vector2::new(50.0, 50.0));
        let mask = rasterize_mask(&shifted, 100, 100, 0, 0).unwrap();
        for &k in &mask.indices {
            let p = Point2::new((k % 100) as f64, (k / 100) as f64);
            let b = barycentric_of(&p, &shifted).unwrap();
            prop_assert!((b.sum() - 1.0).abs() < 1e-9);
            prop_assert!(b.alpha >= -1e-9 && b.beta >= -1e-9 && b.gamma >= -1e-9);
        }
        Ok(())
    })
}

pub fn enlarge_round_trip() -> Result<(), String> {
    check((triangle2(40.0), 1.0..3.0f64), |(tri, s)| {
        let back = enlarge_triangle(&enlarge_triangle(&tri, s).unwrap(), 1.0 / s).unwrap();
        for k in 0..3 {
            prop_assert!((back[k] - tri[k]).norm() < 1e-12);
        }
        Ok(())
    })
}

pub fn facet_frame_isometry() -> Result<(), String> {
    check(triangle3(), |tri| {
        let f = facet_frame(&tri).unwrap();
        let r = f.rotation;
        prop_assert!((r * r.transpose() - nalgebra::Matrix3::identity()).norm() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        prop_assert!((r * f.facet_normal - Vector3::z()).norm() < 1e-9);
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            let d3 = (tri[i] - tri[j]).norm();
            let d2 = (f.template2d[i] - f.template2d[j]).norm();
            prop_assert!((d3 - d2).abs() < 1e-9);
        }
        Ok(())
    })
}

pub fn delaunay_translation_invariance() -> Result<(), String> {
    let pts = proptest::collection::vec(point2(100.0), 3..40);
    check((pts, point2(1000.0)), |(pts, shift)| {
        let Ok(a) = delaunay_triangulation(&pts) else {
            return Ok(());
        };
        let moved: Vec<_> = pts.iter().map(|p| p + shift.coords).collect();
        let b = delaunay_triangulation(&moved).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let canon = |t: &Vec<[usize; 3]>| {
            let mut v: Vec<[usize; 3]> = t
                .iter()
                .map(|x| {
                    let mut s = *x;
                    s.sort();
                    s
                })
                .collect();
            v.sort();
            v
        };
        prop_assert_eq!(canon(&a), canon(&b));
        Ok(())
    })
}

pub fn mask_consistency() -> Result<(), String> {
    check((triangle2(30.0), any::<u64>()), |(tri, seed)| {
        let shifted = tri.map(|p| p + nalgebra::Vector2::new(20.0, 25.0));
        let mask = rasterize_mask(&shifted, 64, 48, 3, 1).unwrap();
        let dense = mask.to_dense();
        prop_assert_eq!(dense.iter().filter(|v| **v).count(), mask.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<f64> = (0..64 * 48).map(|_| rng.gen()).collect();
        let frame = ImageFrame::new(64, 48, pixels, 1).unwrap();
        let once = extract_patch(&frame, &mask).unwrap();
        let again = extract_patch(&ImageFrame::new(64, 48, once.clone(), 1).unwrap(), &mask).unwrap();
        prop_assert_eq!(once, again);
        Ok(())
    })
}

/// Rendered static-view stack of the best-covered facet, lit without shadows or saturation.
pub fn rendered_rank_at_most_four() -> Result<(), String> {
    check((any::<u64>(), 1.45..3.0f64), |(seed, radius)| {
        let spec = SceneSpec {
            seed,
            surface: HeightSurface::SphereCap { radius },
            views: 8,
            static_view: true,
            width: 96,
            height: 96,
            focal: 150.0,
            grid_points: 3,
            jitter: 0.2,
            tessellation: 60,
            lights: LightSchedule {
                elevation_min: 72.0,
                elevation_max: 89.0,
                intensity_min: 0.5,
                intensity_max: 0.9,
                ..LightSchedule::default()
            },
            ..SceneSpec::default()
        };
        let data = render::<f64>(&spec).unwrap();
        let mesh = build_mesh(&data.points3d, &data.projections, 0, &MeshOptions::default()).unwrap();
        let cfg = PipelineConfig::default();
        let stacks = build_stacks(&mesh, &data.frames, &cfg).unwrap();
        let (_, stack) = stacks.iter().max_by_key(|(_, s)| s.observed_count()).unwrap();
        let full: Vec<usize> = (0..stack.columns())
            .filter(|&i| stack.column_observations(i) == stack.frames())
            .collect();
        prop_assume!(full.len() >= 8);
        let j = DMatrix::from_fn(stack.frames(), full.len(), |g, i| stack.intensities[(g, full[i])]);
        let sv = j.singular_values();
        prop_assert!(sv[4] <= 1e-9 * sv[0], "singular values {:?}", sv.as_slice());
        Ok(())
    })
}

pub fn manifold_feasibility() -> Result<(), String> {
    check((any::<u64>(), 0.0..0.4f64), |(seed, missing)| {
        let (j, d) = on_manifold(10, 40, missing, seed);
        let fac = solve_masked(&j, &d, None, &SolverOptions::default()).unwrap();
        for i in 0..40 {
            let c = fac.surface.column(i);
            let tail = (c[1] * c[1] + c[2] * c[2] + c[3] * c[3]).sqrt();
            prop_assert!((tail - c[0]).abs() <= 1e-6 * c[0].abs().max(1.0), "column {i}: {c:?}");
        }
        for w in fac.trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0));
        }
        Ok(())
    })
}

pub fn solver_determinism() -> Result<(), String> {
    check((any::<u64>(), 0.0..0.5f64), |(seed, missing)| {
        let (j, d) = on_manifold(8, 30, missing, seed);
        let a = solve_masked(&j, &d, None, &SolverOptions::default()).unwrap();
        let b = solve_masked(&j, &d, None, &SolverOptions::default()).unwrap();
        prop_assert_eq!(a.surface, b.surface);
        prop_assert_eq!(a.lighting, b.lighting);
        prop_assert_eq!(a.residual.to_bits(), b.residual.to_bits());
        Ok(())
    })
}

fn random_raw(seed: u64, size: usize) -> RawSurface<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let tri = [
        Point2::new(-1.0, -1.0),
        Point2::new(2.0 * s, 0.0),
        Point2::new(0.0, 2.0 * s),
    ];
    let (a, b, c) = (
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
        rng.gen_range(0.5..2.0),
    );
    let mut points = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let p = Point2::new(x as f64, y as f64);
            let z = a * (x as f64 / s) + b * (y as f64 / s).powi(2) + rng.gen_range(-0.05..0.05);
            points.push(SurfacePoint {
                position: Point3::new(x as f64 / s, y as f64 / s, c + z),
                triangle_id: 0,
                template_index: y * size + x,
                barycentric: barycentric_of(&p, &tri).unwrap(),
                pixel: p,
            });
        }
    }
    RawSurface { points, merged: 0 }
}

pub fn refine_determinism_and_monotone_energy() -> Result<(), String> {
    check(any::<u64>(), |seed| {
        let raw = random_raw(seed, 12);
        let a = refine(&raw, &RefineOptions::default()).unwrap();
        let b = refine(&raw, &RefineOptions::default()).unwrap();
        prop_assert_eq!(&a.points, &b.points);
        for w in a.energy_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0]);
        }
        Ok(())
    })
}

fn rotation() -> impl Strategy<Value = (Rotation3<f64>, Vector3<f64>)> {
    (
        -3.0..3.0f64,
        -1.5..1.5f64,
        -3.0..3.0f64,
        -5.0..5.0f64,
        -5.0..5.0f64,
        -5.0..5.0f64,
    )
        .prop_map(|(r, p, y, a, b, c)| (Rotation3::from_euler_angles(r, p, y), Vector3::new(a, b, c)))
}

pub fn refine_rigid_equivariance() -> Result<(), String> {
    check((any::<u64>(), rotation()), |(seed, (rot, t))| {
        let raw = random_raw(seed, 10);
        let mut moved = raw.clone();
        for p in &mut moved.points {
            p.position = rot * p.position + t;
        }
        let a = refine(&raw, &RefineOptions::default()).unwrap();
        let b = refine(&moved, &RefineOptions::default()).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            prop_assert!((rot * p + t - q).norm() < 1e-8);
        }
        Ok(())
    })
}

pub fn weight_range() -> Result<(), String> {
    check((0.0..1.0f64, 0.0..1.0f64), |(u, v)| {
        let (u, v) = if u + v > 1.0 { (1.0 - u, 1.0 - v) } else { (u, v) };
        let g = weight_from_barycentric(&mvps_core::geometry::Barycentric::new(1.0 - u - v, u, v));
        prop_assert!((0.0..=std::f64::consts::FRAC_1_SQRT_2 + 1e-15).contains(&g));
        Ok(())
    })
}

fn stitched_scene(surface: &HeightSurface, seed: u64) -> (mvps_core::CoarseMesh64, Vec<FacetPointSet<f64>>, Vec<f64>) {
    let mesh = frontal_mesh(surface, 3, 0.2, seed).unwrap();
    let (rasters, fields) = true_patches(&mesh, surface, 1.3, 150).unwrap();
    let sets: Vec<_> = fields
        .iter()
        .zip(&rasters)
        .map(|(f, r)| lift_to_facet(f, r).unwrap())
        .collect();
    let curv = sets.iter().map(|s| patch_curvature(&s.heights).value).collect();
    (mesh, sets, curv)
}

pub fn alignment_rigid_equivariance() -> Result<(), String> {
    check((any::<u64>(), rotation(), 1.45..4.0f64), |(seed, (rot, t), radius)| {
        let surface = HeightSurface::SphereCap { radius };
        let (mesh, mut sets, curv) = stitched_scene(&surface, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut sets {
            let off = rng.gen_range(-0.02..0.02);
            s.elevations.iter_mut().for_each(|e| *e += off);
            s.heights.heights.iter_mut().for_each(|e| *e += off);
        }
        let r = rot.into_inner();
        let moved: Vec<_> = sets.iter().map(|s| s.transformed(&r, &t)).collect();
        let opts = AlignOptions::default();
        let (c1, rep1) = solve_corrections(&sets, &mesh, &curv, &opts).unwrap();
        let (c2, _) = solve_corrections(&moved, &mesh.transformed(&r, &t), &curv, &opts).unwrap();
        prop_assert!(rep1.gap_after <= rep1.gap_before + 1e-12);
        for k in 0..sets.len() {
            for (a, b) in sets[k]
                .corrected_points(&c1[k])
                .iter()
                .zip(&moved[k].corrected_points(&c2[k]))
            {
                prop_assert!((r * a.coords + t - b.coords).norm() < 1e-8);
            }
        }
        Ok(())
    })
}

/// Columns of a stack can only be observed where the registration mapped them.
pub fn observed_within_mapped() -> Result<(), String> {
    check((any::<u64>(), 0.0..0.2f64, 0.8..1.0f64), |(seed, dark, sat)| {
        let spec = SceneSpec {
            seed,
            views: 4,
            width: 80,
            height: 80,
            focal: 128.0,
            grid_points: 3,
            tessellation: 40,
            ..SceneSpec::default()
        };
        let data = render::<f64>(&spec).unwrap();
        let mesh = build_mesh(&data.points3d, &data.projections, 1, &MeshOptions::default()).unwrap();
        let cfg = PipelineConfig {
            tau_dark: dark,
            tau_sat: sat,
            ..PipelineConfig::default()
        };
        for (_, stack) in build_stacks(&mesh, &data.frames, &cfg).unwrap() {
            for (v, o) in stack.intensities.iter().zip(stack.observed.iter()) {
                if *o {
                    prop_assert!(*v >= dark && *v <= sat);
                }
            }
            let weak = (0..stack.columns())
                .filter(|&i| stack.column_observations(i) < MIN_OBSERVATIONS)
                .count();
            prop_assert_eq!(weak, stack.weak_columns.len());
        }
        Ok(())
    })
}
