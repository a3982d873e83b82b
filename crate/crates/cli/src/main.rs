//! `prog3d` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use prog3d::datagen::{generate_dataset, read_dataset, write_dataset};
use prog3d::eval::{evaluate, GeneratorPredictor, Predictor};
use prog3d::gradcheck::{run_suite, Suite};
use prog3d::imageio::{load_rgb, save_gray, save_rgb};
use prog3d::mesh::{read_obj, write_obj};
use prog3d::renderer::{rasterize, DEFAULT_SIGMA};
use prog3d::uv_project::{project_image_to_uv, UvRaster};
use prog3d::{
    Camera, CorruptionSpec, DatasetConfig, DiscriminatorConfig, GeneratorConfig, SceneSpec, Tensor, TrainConfig, Trainer,
    ViewSpec,
};

#[derive(Parser)]
#[command(name = "prog3d", version, about = "Single-image textured mesh reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural multi-view dataset.
    GenData {
        #[arg(long)]
        n_objects: usize,
        #[arg(long, default_value_t = 8)]
        n_views: usize,
        /// Corruption spec as a JSON string or a path to a JSON file.
        #[arg(long)]
        corruption: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 64)]
        texture_size: usize,
        #[arg(long, default_value_t = 4)]
        subdivision: u32,
    },
    /// Train with a JSON config, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Dataset directory; overrides the config's `dataset`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Same-view and novel-view metrics of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the per-object latent codes.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a prediction (from a checkpoint and an image) or an OBJ with a
    /// texture: the given camera plus eight azimuths, the mesh and the texture.
    Render {
        #[arg(long, conflicts_with = "obj", requires = "image")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, requires = "texture")]
        obj: Option<PathBuf>,
        #[arg(long)]
        texture: Option<PathBuf>,
        /// Camera as a JSON string or file: {azimuth, elevation, distance, fov[, image_size]}.
        #[arg(long)]
        camera: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Project an image onto the UV texture of an OBJ mesh.
    ProjectUv {
        #[arg(long)]
        obj: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        camera: String,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a training config preset as JSON.
    Config {
        #[arg(long, value_parser = ["toy", "desk", "full"], default_value = "toy")]
        preset: String,
        /// Total iterations, split 40/30/30 over the three stages.
        #[arg(long, default_value_t = 2500)]
        total: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks; exits nonzero on any failure.
    Gradcheck {
        #[arg(long, value_parser = ["renderer", "losses", "mesh"])]
        module: String,
    },
}

/// A JSON value given inline or as a file path.
fn json_arg(s: &str) -> Result<serde_json::Value> {
    let text = if Path::new(s).is_file() {
        std::fs::read_to_string(s).with_context(|| format!("reading {s}"))?
    } else {
        s.to_string()
    };
    serde_json::from_str(&text).with_context(|| format!("parsing JSON {s:?}"))
}

fn camera_arg(s: &str, default_size: usize) -> Result<Camera> {
    let mut v = json_arg(s)?;
    if let Some(obj) = v.as_object_mut() {
        obj.entry("image_size").or_insert(default_size.into());
    }
    let cam: Camera = serde_json::from_value(v).context("camera JSON")?;
    cam.validate()?;
    Ok(cam)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn gen_data(
    n_objects: usize,
    n_views: usize,
    corruption: Option<String>,
    out: &Path,
    seed: u64,
    image_size: usize,
    texture_size: usize,
    subdivision: u32,
) -> Result<()> {
    let corruption: CorruptionSpec = match corruption {
        Some(s) => serde_json::from_value(json_arg(&s)?).context("corruption JSON")?,
        None => CorruptionSpec::default(),
    };
    let cfg = DatasetConfig {
        n_objects,
        seed,
        scene: SceneSpec {
            subdivision,
            texture_size,
            ..SceneSpec::default()
        },
        views: ViewSpec {
            n_views,
            image_size,
            ..ViewSpec::default()
        },
        corruption,
    };
    let samples = generate_dataset(&cfg)?;
    write_dataset(&samples, out, &corruption)?;
    eprintln!("wrote {} objects x {} views to {}", samples.len(), n_views, out.display());
    Ok(())
}

fn train(config: Option<PathBuf>, resume: Option<PathBuf>, data: Option<PathBuf>, out: &Path) -> Result<()> {
    let mut trainer = match (&resume, &config) {
        (Some(ck), _) => Trainer::load(ck)?,
        (None, Some(cfg)) => Trainer::new(TrainConfig::load(cfg)?)?,
        (None, None) => bail!("either --config or --resume is required"),
    };
    let root = data
        .or_else(|| trainer.config.dataset.clone())
        .context("no dataset: pass --data or set `dataset` in the config")?;
    let (_, samples) = read_dataset(&root)?;
    create_dir(out)?;
    std::fs::write(out.join("config.json"), serde_json::to_vec_pretty(&trainer.config)?)?;
    let total = trainer.config.schedule.total();
    let chunk = 50;
    while trainer.iteration < total {
        let end = (trainer.iteration + chunk).min(total);
        trainer.run_until(&samples, end, Some(out))?;
        if let Some(r) = trainer.log.last() {
            eprintln!("iter {} stage {} loss {:.5} ({:.1}s)", r.iter + 1, r.stage, r.total, r.wall_time);
        }
    }
    eprintln!("final checkpoint {}", out.join("final.ckpt").display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, out: &Path, seed: u64) -> Result<()> {
    let trainer = Trainer::load(ckpt)?;
    let (_, samples) = read_dataset(data)?;
    let predictor = GeneratorPredictor {
        generator: &trainer.generator,
        seed,
    };
    let echo = serde_json::json!({
        "checkpoint": ckpt.display().to_string(),
        "dataset": data.display().to_string(),
        "latent_seed": seed,
        "train_config": trainer.config,
        "proxy_frechet_distance": "Frechet distance over pooled random conv features; not comparable with Inception FID",
    });
    let report = evaluate(&predictor, &samples, &trainer.phi, trainer.config.sigma, echo)?;
    report.write(out)?;
    for (name, m) in [("same view", &report.same_view), ("novel view", &report.novel_view)] {
        println!(
            "{name}: mse {:.5} ssim {:.4} iou {:.4} feature {:.5} proxy_fd {:.5}",
            m.mse, m.ssim, m.iou, m.feature_distance, m.proxy_frechet_distance
        );
    }
    Ok(())
}

fn render(
    ckpt: Option<PathBuf>,
    image: Option<PathBuf>,
    obj: Option<PathBuf>,
    texture: Option<PathBuf>,
    camera: &str,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let (mesh, tex, sigma, size) = match (ckpt, obj) {
        (Some(ck), None) => {
            let trainer = Trainer::load(&ck)?;
            let img = load_rgb(&image.context("--image is required with --ckpt")?)?;
            let n = trainer.generator.config.image_size;
            if img.shape() != [3, n, n] {
                bail!("input image must be {n}x{n}, got {:?}", img.shape());
            }
            let predictor = GeneratorPredictor {
                generator: &trainer.generator,
                seed,
            };
            let (mesh, texture) = predictor.predict(0, &img)?;
            (mesh, texture, trainer.config.sigma, n)
        }
        (None, Some(o)) => {
            let tex = load_rgb(&texture.context("--texture is required with --obj")?)?;
            (read_obj(&o)?, tex, DEFAULT_SIGMA, 64)
        }
        _ => bail!("pass either --ckpt with --image or --obj with --texture"),
    };
    let cam = camera_arg(camera, size)?;
    create_dir(out)?;
    let r = rasterize(&mesh, &tex, &cam, sigma)?;
    save_rgb(&out.join("same_view.png"), &r.image)?;
    save_gray(&out.join("same_view_mask.png"), &r.silhouette)?;
    for k in 0..8 {
        let c = Camera {
            azimuth: cam.azimuth + 45.0 * k as f64,
            ..cam.clone()
        };
        let r = rasterize(&mesh, &tex, &c, sigma)?;
        save_rgb(&out.join(format!("novel_{k}.png")), &r.image)?;
    }
    write_obj(&mesh, &out.join("mesh.obj"))?;
    save_rgb(&out.join("texture.png"), &tex)?;
    eprintln!("wrote renders, mesh.obj and texture.png to {}", out.display());
    Ok(())
}

fn project_uv(obj: &Path, image: &Path, camera: &str, size: usize, out: &Path) -> Result<()> {
    let mesh = read_obj(obj)?;
    let img: Tensor = load_rgb(image)?;
    let cam = camera_arg(camera, img.shape()[1])?;
    let raster = UvRaster::new(&mesh.topology, size)?;
    let p = project_image_to_uv(&img, &mesh, &cam, &raster, 0)?;
    create_dir(out)?;
    save_rgb(&out.join("partial_texture.png"), &p.texture)?;
    save_gray(&out.join("visibility.png"), &p.visibility)?;
    eprintln!("{} of {} texels visible", p.visible_count(), size * size);
    Ok(())
}

fn config(preset: &str, total: usize, seed: u64) -> Result<()> {
    let mut c = TrainConfig::toy(total, seed);
    match preset {
        "toy" => {}
        "desk" => {
            c.generator = GeneratorConfig::desk();
            c.discriminator = DiscriminatorConfig {
                texture_size: c.generator.texture_size,
                ..DiscriminatorConfig::full()
            };
            c.schedule.learning_rate_g = 1e-4;
            c.schedule.learning_rate_d = 1e-4;
        }
        "full" => {
            c.generator = GeneratorConfig::full();
            c.discriminator = DiscriminatorConfig::full();
            c.schedule.learning_rate_g = 1e-4;
            c.schedule.learning_rate_d = 1e-4;
        }
        other => bail!("unknown preset {other}"),
    }
    c.validate()?;
    println!("{}", serde_json::to_string_pretty(&c)?);
    Ok(())
}

fn gradcheck(module: &str) -> Result<bool> {
    let suite: Suite = module.parse()?;
    let results = run_suite(suite)?;
    for r in &results {
        println!("{r}");
    }
    Ok(results.iter().all(|r| r.passed()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            n_objects,
            n_views,
            corruption,
            out,
            seed,
            image_size,
            texture_size,
            subdivision,
        } => gen_data(n_objects, n_views, corruption, &out, seed, image_size, texture_size, subdivision).map(|_| true),
        Command::Train {
            config,
            resume,
            data,
            out,
        } => train(config, resume, data, &out).map(|_| true),
        Command::Eval { ckpt, data, out, seed } => eval(&ckpt, &data, &out, seed).map(|_| true),
        Command::Render {
            ckpt,
            image,
            obj,
            texture,
            camera,
            out,
            seed,
        } => render(ckpt, image, obj, texture, &camera, &out, seed).map(|_| true),
        Command::ProjectUv {
            obj,
            image,
            camera,
            size,
            out,
        } => project_uv(&obj, &image, &camera, size, &out).map(|_| true),
        Command::Config { preset, total, seed } => config(&preset, total, seed).map(|_| true),
        Command::Gradcheck { module } => gradcheck(&module),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
