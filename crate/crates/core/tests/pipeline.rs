use std::time::Instant;

use mvps_core::decompose::decompose_frame;
use mvps_core::geometry::build_mesh;
use mvps_core::pipeline::{benchmark_piecewise_vs_global, photometric_stage, run_on_inputs, Inputs, PipelineConfig};
use mvps_core::synth::{HeightSurface, SceneSpec};
use mvps_core::Error;

fn small_scene(surface: HeightSurface, grid: usize) -> SceneSpec {
    SceneSpec {
        seed: 3,
        surface,
        views: 10,
        arc_degrees: 30.0,
        width: 160,
        height: 160,
        focal: 256.0,
        grid_points: grid,
        jitter: 0.1,
        tessellation: 80,
        ..SceneSpec::default()
    }
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[test]
fn plane_is_recovered_and_counts_match() {
    let spec = small_scene(
        HeightSurface::Plane {
            a: 0.2,
            b: -0.1,
            c: 0.0,
        },
        4,
    );
    let inputs = Inputs::from_scene(&spec).unwrap();
    let out = run_on_inputs(&inputs, &PipelineConfig::default()).unwrap();
    let r = &out.report;
    assert_eq!(r.frames, 10);
    assert_eq!(r.mesh_points, 16);
    assert_eq!(r.triangles, out.mesh.triangle_count());
    assert_eq!(r.patches.len() + r.failed.len(), r.triangles);
    assert_eq!(r.surface_points, out.surface.len());
    assert_eq!(r.pixels, out.patches.iter().map(|p| p.columns).sum::<usize>());
    assert!(r.error_percent.unwrap() < 1.0, "{r}");
}

#[test]
fn single_worker_runs_are_bit_identical() {
    let spec = small_scene(HeightSurface::SphereCap { radius: 1.6 }, 4);
    let inputs = Inputs::from_scene(&spec).unwrap();
    let cfg = PipelineConfig::default();
    let a = run_on_inputs(&inputs, &cfg).unwrap();
    let b = run_on_inputs(&inputs, &cfg).unwrap();
    assert_eq!(a.report.without_timings(), b.report.without_timings());
    assert_eq!(a.surface.points, b.surface.points);
    assert_eq!(a.surface.pixels, b.surface.pixels);
}

#[test]
fn worker_count_does_not_change_the_surface() {
    let spec = small_scene(HeightSurface::SphereCap { radius: 1.6 }, 4);
    let inputs = Inputs::from_scene(&spec).unwrap();
    let one = run_on_inputs(&inputs, &PipelineConfig::default()).unwrap();
    let eight = run_on_inputs(
        &inputs,
        &PipelineConfig {
            workers: 8,
            ..PipelineConfig::default()
        },
    )
    .unwrap();
    assert_eq!(one.surface.pixels, eight.surface.pixels);
    for (p, q) in one.surface.points.iter().zip(&eight.surface.points) {
        assert!((p - q).norm() <= 1e-10);
    }
    assert_eq!(one.report.without_timings(), eight.report.without_timings());
}

#[test]
fn a_saturated_patch_is_excluded_and_listed() {
    let spec = small_scene(HeightSurface::SphereCap { radius: 1.6 }, 5);
    let mut inputs = Inputs::from_scene(&spec).unwrap();
    let cfg = PipelineConfig::default();
    let mesh = build_mesh(
        &inputs.points3d,
        &inputs.projections,
        inputs.frames.len() / 2,
        &cfg.mesh,
    )
    .unwrap();
    let victim = mesh.triangle_count() / 2;
    for frame in &mut inputs.frames {
        // a margin past the enlarged template so no bilinear sample reaches an intact pixel
        let masks = decompose_frame(&mesh, frame, cfg.enlargement + 0.3).unwrap();
        for &p in &masks[victim].indices {
            frame.pixels[p] = 1.0;
        }
    }
    let out = run_on_inputs(&inputs, &cfg).unwrap();
    let failed: Vec<usize> = out.report.failed.iter().map(|f| f.triangle_id).collect();
    assert_eq!(failed, vec![victim]);
    assert_eq!(out.report.patches.len(), mesh.triangle_count() - 1);
    assert!(out.report.patches.iter().all(|p| p.triangle_id != victim));
    assert!(out.report.error_percent.unwrap() < 5.0, "{}", out.report);
}

#[test]
fn corrupting_every_patch_is_an_error() {
    let spec = small_scene(HeightSurface::SphereCap { radius: 1.6 }, 4);
    let mut inputs = Inputs::from_scene(&spec).unwrap();
    for frame in &mut inputs.frames {
        frame.pixels.iter_mut().for_each(|v| *v = 1.0);
    }
    assert!(matches!(
        run_on_inputs(&inputs, &PipelineConfig::default()),
        Err(Error::NoUsablePatches)
    ));
}

#[test]
fn more_workers_solve_faster() {
    let n = cores();
    if n < 4 {
        println!("skipped: {n} core(s) available, the scaling check needs at least 4");
        return;
    }
    let spec = small_scene(HeightSurface::SphereCap { radius: 1.6 }, 9);
    let inputs = Inputs::from_scene(&spec).unwrap();
    let base = PipelineConfig::default();
    let mesh = build_mesh(
        &inputs.points3d,
        &inputs.projections,
        inputs.frames.len() / 2,
        &base.mesh,
    )
    .unwrap();
    assert!(mesh.triangle_count() >= 100);
    let solve = |workers: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
        let started = Instant::now();
        pool.install(|| photometric_stage(&mesh, &inputs.frames, &base).unwrap());
        started.elapsed().as_secs_f64()
    };
    let t1 = solve(1);
    let t4 = solve(4);
    let efficiency = t1 / (4.0 * t4);
    assert!(efficiency >= 0.6, "efficiency {efficiency:.2} at 4 workers");
    if n >= 8 {
        let run = |workers| {
            let started = Instant::now();
            run_on_inputs(
                &inputs,
                &PipelineConfig {
                    workers,
                    ..PipelineConfig::default()
                },
            )
            .unwrap();
            started.elapsed().as_secs_f64()
        };
        assert!(run(8) < run(1));
    }
}

#[test]
fn tiny_benchmark_agrees_within_a_factor_of_two() {
    let mut spec = small_scene(HeightSurface::SphereCap { radius: 1.6 }, 3);
    spec.lights.elevation_min = 55.0;
    let table = benchmark_piecewise_vs_global(&spec, &PipelineConfig::default()).unwrap();
    assert!(table.patches >= 4);
    let (g, p) = (table.global.mean_angle_deg, table.piecewise.mean_angle_deg);
    assert!(g.is_finite() && p.is_finite());
    assert!(
        p <= 2.0 * g.max(0.5) && g <= 2.0 * p.max(0.5),
        "global {g} piecewise {p}"
    );
    assert!(table.to_string().contains("speedup"));
}

#[test]
fn benchmark_needs_four_patches() {
    let spec = small_scene(HeightSurface::SphereCap { radius: 1.6 }, 2);
    assert!(matches!(
        benchmark_piecewise_vs_global(&spec, &PipelineConfig::default()),
        Err(Error::InvalidParameter { name: "scene", .. })
    ));
}
