use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use mvps_core::io::{write_sparse, SparseInput};
use mvps_core::pipeline::{benchmark_piecewise_vs_global, run_pipeline, InputSpec, PipelineConfig, RunReport};
use mvps_core::synth::{render, SceneSpec};

#[derive(Parser)]
#[command(name = "mvps", version, about = "Piecewise multi-view photometric reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full reconstruction described by a TOML config.
    Reconstruct {
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Render a synthetic scene to PNG frames, a sparse-point file and a matching config.
    Synth {
        scene: PathBuf,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
    /// Compare one global photometric solve against the piecewise solves on a static view.
    Bench {
        scene: PathBuf,
        /// Optional pipeline config for thresholds and solver settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print the report of a finished run.
    Report { run_dir: PathBuf },
}

fn load_scene(path: &Path) -> Result<SceneSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(SceneSpec::from_toml(&text)?)
}

fn reconstruct(config: &Path, out: Option<PathBuf>, workers: Option<usize>) -> Result<()> {
    let mut cfg = PipelineConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let base = config.parent().unwrap_or(Path::new(".")).to_path_buf();
    if let Some(out) = out {
        cfg.output = out;
    } else if cfg.output.is_relative() {
        cfg.output = base.join(&cfg.output);
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.cache = true;
    let output = run_pipeline(&cfg, &base)?;
    println!("{}", output.report);
    for f in &output.report.failed {
        println!("excluded patch {}: {}", f.triangle_id, f.reason);
    }
    println!("results in {}", cfg.output.display());
    Ok(())
}

fn synth(scene: &Path, out: &Path) -> Result<()> {
    let spec = load_scene(scene)?;
    let data = render::<f64>(&spec)?;
    fs::create_dir_all(out)?;
    let mut labels = Vec::with_capacity(data.frames.len());
    for frame in &data.frames {
        let name = format!("frame_{:03}.png", frame.frame_id);
        frame.save_png(&out.join(&name))?;
        labels.push(name);
    }
    write_sparse(
        &out.join("tracks.txt"),
        &SparseInput {
            points3d: data.points3d.clone(),
            labels,
            projections: data.projections.clone(),
        },
    )?;
    fs::write(out.join("scene.toml"), spec.to_toml()?)?;
    let cfg = PipelineConfig {
        input: InputSpec::Files {
            sparse: "tracks.txt".into(),
            images: Vec::new(),
        },
        output: "run".into(),
        ..PipelineConfig::default()
    };
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    info!("{} frames, {} points", data.frames.len(), data.points3d.len());
    println!("wrote {} frames to {}", data.frames.len(), out.display());
    Ok(())
}

fn bench(scene: &Path, config: Option<PathBuf>, json: Option<PathBuf>) -> Result<()> {
    let spec = load_scene(scene)?;
    let cfg = match config {
        Some(p) => PipelineConfig::load(&p)?,
        None => PipelineConfig::default(),
    };
    let table = benchmark_piecewise_vs_global(&spec, &cfg)?;
    println!("{table}");
    if let Some(p) = json {
        fs::write(p, serde_json::to_string_pretty(&table)?)?;
    }
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let path = dir.join("report.json");
    if !path.exists() {
        bail!("{} has no report.json", dir.display());
    }
    println!("{}", RunReport::load(&path)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Reconstruct { config, out, workers } => reconstruct(&config, out, workers),
        Command::Synth { scene, out } => synth(&scene, &out),
        Command::Bench { scene, config, json } => bench(&scene, config, json),
        Command::Report { run_dir } => report(&run_dir),
    }
}
