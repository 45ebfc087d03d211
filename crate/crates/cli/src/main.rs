use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use meshvr::gradcheck::{gradcheck, Tolerances};
use meshvr::io::checkpoint::Checkpoint;
use meshvr::io::eval::{eval_geometry, eval_render, write_metrics_csv};
use meshvr::io::image::Image;
use meshvr::io::obj::read_obj;
use meshvr::io::reference::{Reference, SurfaceSpec};
use meshvr::io::synth::{write_fixture, FixtureConfig};
use meshvr::render::RenderContext;
use meshvr::{Octree, SceneBundle, Stage, TrainConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "meshvr",
    version,
    about = "Fit a fixed-topology mesh to multi-view images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene from an analytic surface.
    Synth(SynthArgs),
    /// Run the three-stage optimisation on a scene.
    Fit(FitArgs),
    /// Render views of a scene from a checkpoint.
    Render(RenderArgs),
    /// Geometry or image metrics as CSV.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences on a tiny scene.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Ellipsoid,
    Blob,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Fixture description (TOML); overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ellipsoid")]
    preset: Preset,
    /// Number of training views.
    #[arg(long)]
    views: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    /// Scene manifest, or a directory containing scene.toml.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pixel stride of the ray grid. Jitter is reduced if it no longer
    /// fits inside a cell.
    #[arg(long)]
    stride: Option<usize>,
    /// Train on these view indices only (comma separated).
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<usize>>,
    /// Stop after this stage (1, 2 or 3).
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
    stage: u8,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Render settings are taken from this training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// View indices to render; defaults to the held-out views, or all
    /// views if there are none.
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<usize>>,
}

#[derive(Args)]
struct EvalArgs {
    /// Mesh (OBJ) to compare with --reference.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    geometry: Option<PathBuf>,
    /// Image to compare with --reference.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Reference OBJ or scene manifest (geometry) or image.
    #[arg(long)]
    reference: PathBuf,
    /// Mask image restricting image metrics.
    #[arg(long, requires = "image")]
    mask: Option<PathBuf>,
    /// CSV output; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Entries checked per parameter group.
    #[arg(long, default_value_t = 20)]
    entries: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("scene.toml")
    } else {
        p.to_path_buf()
    }
}

fn load_scene(p: &Path) -> Result<SceneBundle> {
    let path = manifest_path(p);
    SceneBundle::load(&path).with_context(|| format!("loading scene {}", path.display()))
}

fn load_config(p: Option<&Path>) -> Result<TrainConfig> {
    match p {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut cfg = match (&a.config, a.preset) {
        (Some(p), _) => FixtureConfig::load(p)?,
        (None, Preset::Ellipsoid) => FixtureConfig::default(),
        (None, Preset::Blob) => FixtureConfig::blob(),
    };
    if let Some(v) = a.views {
        cfg.views = v;
    }
    let (scene, manifest) = write_fixture(&cfg, &a.out)?;
    println!(
        "wrote {} ({} views, {} landmarks)",
        manifest.display(),
        scene.views.len(),
        scene.landmarks.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn fit(a: FitArgs) -> Result<ExitCode> {
    let mut scene = load_scene(&a.scene)?;
    if let Some(keep) = &a.views {
        // held-out views stay available for evaluation
        let extra: Vec<usize> = scene
            .holdout_views()
            .into_iter()
            .filter(|h| !keep.contains(h))
            .collect();
        scene = scene.select_views(&[keep.as_slice(), &extra].concat())?;
    }
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(stride) = a.stride {
        config.stride = stride;
        config.jitter = config.jitter.min(0.25 * stride as f64);
    }
    config.validate()?;
    let last = match a.stage {
        1 => Stage::Silhouette,
        2 => Stage::Appearance,
        _ => Stage::Joint,
    };
    let trainer = match &a.resume {
        Some(p) => Trainer::resume(&scene, config, Checkpoint::load(p)?)?,
        None => Trainer::new(&scene, config)?,
    };
    let mut trainer = trainer.with_output(&a.out)?;
    let faces = scene.template.faces().to_vec();
    let out = trainer.fit_through(last)?;
    if out.mesh.faces() != faces.as_slice() {
        bail!("mesh connectivity changed during fitting");
    }
    println!("wrote {}", a.out.join("final.obj").display());
    if let Some(spec) = &scene.ground_truth {
        let reference = Reference::build(spec, &scene.root)?;
        if let Some(m1) = &out.stage1_mesh {
            println!(
                "stage-1 geometry error: {:.6}",
                eval_geometry(m1, &reference, None)?
            );
        }
        println!(
            "geometry error: {:.6}",
            eval_geometry(&out.mesh, &reference, None)?
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn render(a: RenderArgs) -> Result<ExitCode> {
    let scene = load_scene(&a.scene)?;
    let config = load_config(a.config.as_deref())?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let views = match a.views {
        Some(v) => v,
        None if !scene.holdout_views().is_empty() => scene.holdout_views(),
        None => (0..scene.views.len()).collect(),
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let tree = Octree::build(&ckpt.params.mesh, config.octree)?;
    let ctx = RenderContext::new(&ckpt.params, &tree, &config.render)?;
    for i in views {
        let Some(view) = scene.views.get(i) else {
            bail!("view {i} does not exist");
        };
        let (image, opacity) = ctx.render_image(&view.camera)?;
        image.write_png(&a.out.join(format!("{}.png", view.name)))?;
        opacity.write_png(&a.out.join(format!("{}_opacity.png", view.name)))?;
        let metrics = eval_render(
            &image,
            &view.image,
            view.mask.as_ref().map(|m| m.to_mask()).as_deref(),
        )?;
        println!(
            "{}: psnr {:.2} dB, ssim {:.4}",
            view.name, metrics.psnr, metrics.ssim
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let (header, row): (&[&str], Vec<String>) = if let Some(mesh_path) = &a.geometry {
        let mesh = read_obj(mesh_path)?;
        let reference = if a.reference.extension().is_some_and(|e| e == "obj") {
            Reference::build(
                &SurfaceSpec::Mesh {
                    path: a.reference.clone(),
                },
                Path::new(""),
            )?
        } else {
            let scene = load_scene(&a.reference)?;
            let Some(spec) = &scene.ground_truth else {
                bail!(
                    "scene {} has no ground-truth surface",
                    a.reference.display()
                );
            };
            Reference::build(spec, &scene.root)?
        };
        let err = eval_geometry(&mesh, &reference, None)?;
        (
            &["mesh", "geometry_error"],
            vec![mesh_path.display().to_string(), err.to_string()],
        )
    } else {
        let path = a
            .image
            .as_ref()
            .expect("clap requires --image or --geometry");
        let image = Image::read(path)?;
        let reference = Image::read(&a.reference)?;
        let mask = a
            .mask
            .as_deref()
            .map(Image::read)
            .transpose()?
            .map(|m| m.to_mask());
        let m = eval_render(&image, &reference, mask.as_deref())?;
        (
            &["image", "psnr", "ssim"],
            vec![
                path.display().to_string(),
                m.psnr.to_string(),
                m.ssim.to_string(),
            ],
        )
    };
    match &a.out {
        Some(out) => write_metrics_csv(out, header, &[row])?,
        None => {
            println!("{}", header.join(","));
            println!("{}", row.join(","));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let report = gradcheck(a.seed, a.entries, Tolerances::default())?;
    println!("loss {:.6}", report.loss);
    println!(
        "{:<9} {:>7} {:>7} {:>12} {:>9}",
        "group", "checked", "skipped", "max rel err", "limit"
    );
    for g in &report.groups {
        println!(
            "{:<9} {:>7} {:>7} {:>12.3e} {:>9.0e}  {}",
            g.group.name(),
            g.sampled - g.skipped,
            g.skipped,
            g.max_rel_error,
            g.tolerance,
            if g.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
