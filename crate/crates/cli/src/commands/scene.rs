use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use gsvox::diffusion::{toy_dataset, toy_names, ToySpec};
use gsvox::edc::{fit_fixed_count, write_log, EDCConfig};
use gsvox::io::{load_ply, save_ply};
use gsvox::losses::{mse, psnr_from_mse};
use gsvox::raster::render;
use gsvox::scene::{build_demo, DemoSpec};
use serde::Serialize;
use toml::Value;

use super::Ctx;
use crate::config::write_snapshot;
use crate::error::CliError;
use crate::files::{create_dir, load_scene, save_dataset, save_render, save_scene, write_text};

#[derive(Debug, Args, Serialize)]
pub struct DemoArgs {
    /// Output directory; receives `scene/` and `toy/`.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Orbit cameras around the scene.
    #[arg(long, default_value_t = 16)]
    pub views: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Gaussians in the perturbed pretrained cloud.
    #[arg(long, default_value_t = 1000)]
    pub pretrained: usize,
    /// Skip the four-object diffusion toy set.
    #[arg(long)]
    pub no_toy: bool,
    /// Lattice side of the toy grids.
    #[arg(long, default_value_t = 8)]
    pub toy_n: usize,
    /// Width of the toy condition tokens.
    #[arg(long, default_value_t = 16)]
    pub toy_channels: usize,
    /// Views per toy object.
    #[arg(long, default_value_t = 4)]
    pub toy_views: usize,
    /// Square toy image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub toy_size: usize,
}

/// Synthetic desk scene (`scene/manifest.json`, `scene/source.ply`,
/// `scene/pretrained.ply`) and the diffusion toy set (`toy/items.json`).
pub fn demo(ctx: &Ctx, args: &DemoArgs) -> Result<(), CliError> {
    ctx.sources.reject_any("demo")?;
    let seed = ctx.seed();
    let spec = DemoSpec {
        views: args.views,
        width: args.size,
        height: args.size,
        pretrained: args.pretrained,
        seed,
    };
    let demo = build_demo(&spec)?;
    let scene = args.out.join("scene");
    save_scene(&scene, &demo.views, None)?;
    save_ply(&scene.join("source.ply"), &demo.source)?;
    save_ply(&scene.join("pretrained.ply"), &demo.pretrained)?;
    println!(
        "scene: {} views at {}x{}, {} source and {} pretrained Gaussians",
        demo.views.len(),
        args.size,
        args.size,
        demo.source.len(),
        demo.pretrained.len()
    );
    if !args.no_toy {
        let toy = ToySpec {
            n: args.toy_n,
            channels: args.toy_channels,
            views: args.toy_views,
            image_size: args.toy_size,
            seed,
        };
        let items = toy_dataset(&toy)?;
        save_dataset(&args.out.join("toy"), &toy_names(), &items)?;
        println!("toy: {} objects on {}^3 grids", items.len(), args.toy_n);
    }
    write_snapshot::<_, ()>(&args.out, "demo", seed, args, None)
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Scene manifest with cameras and ground-truth images.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Pretrained cloud to convert.
    #[arg(long)]
    pub init: PathBuf,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Gaussian budget.
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Optimisation iterations.
    #[arg(long)]
    pub iters: Option<usize>,
}

/// Fixed-count conversion; writes `fit.ply` and `fit_log.csv`.
pub fn fit(ctx: &Ctx, args: &FitArgs) -> Result<(), CliError> {
    let cfg: EDCConfig = ctx.sources.resolve(
        &EDCConfig::default(),
        &[
            ("n_max", args.n_max.map(|v| Value::Integer(v as i64))),
            ("max_iters", args.iters.map(|v| Value::Integer(v as i64))),
        ],
    )?;
    let (_, views) = load_scene(&args.manifest)?;
    let init = load_ply(&args.init)?;
    create_dir(&args.out)?;
    let r = fit_fixed_count(&init, &views, &cfg)?;
    if let Some(row) = r.log.iter().find(|row| row.count > cfg.n_max) {
        return Err(CliError::Numeric(format!("{} Gaussians at iteration {}", row.count, row.iter)));
    }
    if r.cloud.len() != cfg.n_max {
        return Err(CliError::Numeric(format!("fit ended with {} Gaussians", r.cloud.len())));
    }
    save_ply(&args.out.join("fit.ply"), &r.cloud)?;
    let mut log = Vec::new();
    write_log(&r.log, &mut log).expect("writing to memory");
    write_text(&args.out.join("fit_log.csv"), std::str::from_utf8(&log).expect("ASCII log"))?;
    let m = views
        .iter()
        .map(|v| mse(&render(&r.cloud, &v.camera).color, &v.color))
        .sum::<gsvox::Result<f64>>()?
        / views.len() as f64;
    println!(
        "initialised {} Gaussians, ran {} iterations{}, padded {}, final {}",
        r.initial_count,
        r.iterations,
        if r.plateaued { " (plateau)" } else { "" },
        r.padded,
        r.cloud.len()
    );
    println!("mean PSNR {:.3} dB", psnr_from_mse(m));
    write_snapshot(&args.out, "fit", ctx.seed(), args, Some(&cfg))
}

#[derive(Debug, Args, Serialize)]
pub struct RenderArgs {
    /// Gaussian cloud (binary PLY).
    #[arg(long)]
    pub ply: PathBuf,
    /// Cameras, and ground truth for the PSNR report.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

/// `render_XXX.ppm` plus depth and normal PFMs per camera and `psnr.csv`.
pub fn render_cmd(ctx: &Ctx, args: &RenderArgs) -> Result<(), CliError> {
    ctx.sources.reject_any("render")?;
    let cloud = load_ply(&args.ply)?;
    let (_, views) = load_scene(&args.manifest)?;
    create_dir(&args.out)?;
    let mut report = String::from("view,psnr_db\n");
    let mut total = 0.0;
    for (i, v) in views.iter().enumerate() {
        let out = render(&cloud, &v.camera);
        let bad = out.color.iter().chain(&out.depth).chain(&out.normal).any(|x| !x.is_finite());
        if bad {
            return Err(CliError::Numeric(format!("view {i} rendered non-finite values")));
        }
        save_render(&args.out, &format!("render_{i:03}"), &out)?;
        let m = mse(&out.color, &v.color)?;
        total += m;
        writeln!(report, "{i},{:.6}", psnr_from_mse(m)).expect("string write");
    }
    let mean = psnr_from_mse(total / views.len() as f64);
    writeln!(report, "mean,{mean:.6}").expect("string write");
    write_text(&args.out.join("psnr.csv"), &report)?;
    println!("rendered {} views of {} Gaussians, mean PSNR {mean:.3} dB", views.len(), cloud.len());
    write_snapshot::<_, ()>(&args.out, "render", ctx.seed(), args, None)
}
