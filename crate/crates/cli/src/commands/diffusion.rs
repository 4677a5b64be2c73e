use std::path::PathBuf;

use clap::Args;
use gsvox::diffusion::{
    reference_model, sample, schedule_from_betas, write_log, DiffusionConfig, DiffusionModel, Normalizer, ParamStore,
    Perceiver, Schedule, StepLosses, Trainer, VoxelUNet,
};
use gsvox::gaussian::CHANNELS;
use gsvox::io::{load_checkpoint, save_checkpoint, save_grid, save_ply, NamedArray};
use gsvox::voxel::unstructure;
use serde::Serialize;
use toml::Value;

use super::Ctx;
use crate::config::write_snapshot;
use crate::error::CliError;
use crate::files::{create_dir, load_dataset, write_text};

/// Average of the first and last ten diffusion losses.
pub fn loss_ends(log: &[StepLosses]) -> (f64, f64) {
    let w = log.len().min(10);
    let mean = |s: &[StepLosses]| s.iter().map(|r| r.diffusion).sum::<f64>() / s.len().max(1) as f64;
    (mean(&log[..w]), mean(&log[log.len() - w..]))
}

fn row(name: String, values: &[f64]) -> NamedArray {
    NamedArray {
        name,
        rows: 1,
        cols: values.len(),
        data: values.to_vec(),
    }
}

fn store_arrays(prefix: &str, store: &ParamStore) -> Vec<NamedArray> {
    store
        .specs
        .iter()
        .enumerate()
        .map(|(i, s)| NamedArray {
            name: format!("{prefix}.{}", s.name),
            rows: s.rows,
            cols: s.cols,
            data: store.slice(i).to_vec(),
        })
        .collect()
}

fn fill_store(prefix: &str, store: &mut ParamStore, arrays: &[NamedArray]) -> Result<(), CliError> {
    for i in 0..store.specs.len() {
        let spec = store.specs[i].clone();
        let name = format!("{prefix}.{}", spec.name);
        let a = find(arrays, &name)?;
        if (a.rows, a.cols) != (spec.rows, spec.cols) {
            return Err(CliError::Usage(format!(
                "checkpoint array `{name}` is {}x{}, expected {}x{}",
                a.rows, a.cols, spec.rows, spec.cols
            )));
        }
        store.slice_mut(i).copy_from_slice(&a.data);
    }
    Ok(())
}

fn find<'a>(arrays: &'a [NamedArray], name: &str) -> Result<&'a NamedArray, CliError> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| CliError::Usage(format!("checkpoint has no array `{name}`")))
}

/// Model weights, the noise schedule and the feature normaliser.
pub fn checkpoint_arrays(model: &DiffusionModel<VoxelUNet>, schedule: &Schedule, norm: &Normalizer) -> Vec<NamedArray> {
    let p = &model.perceiver;
    let u = &model.predictor;
    let mut out = vec![
        row("arch".into(), &[p.channels as f64, p.hidden as f64, u.hidden as f64]),
        row("schedule.betas".into(), &schedule.betas),
        row("normalizer.mean".into(), &norm.mean),
        row("normalizer.std".into(), &norm.std),
    ];
    out.extend(store_arrays("perceiver", &p.params));
    out.extend(store_arrays("predictor", &u.params));
    out
}

pub fn model_from_arrays(arrays: &[NamedArray]) -> Result<(DiffusionModel<VoxelUNet>, Schedule, Normalizer), CliError> {
    let arch = find(arrays, "arch")?;
    let dims: Vec<usize> = arch.data.iter().map(|&v| v as usize).collect();
    if dims.len() != 3 || dims.iter().zip(&arch.data).any(|(&d, &v)| d == 0 || d as f64 != v) {
        return Err(CliError::Usage("checkpoint `arch` must hold three positive integers".into()));
    }
    let mut perceiver = Perceiver::new(dims[0], dims[1], 0);
    let mut predictor = VoxelUNet::new(dims[2], dims[0], 0);
    fill_store("perceiver", &mut perceiver.params, arrays)?;
    fill_store("predictor", &mut predictor.params, arrays)?;
    let schedule = schedule_from_betas(find(arrays, "schedule.betas")?.data.clone())?;
    let channel_row = |name: &str| -> Result<[f64; CHANNELS], CliError> {
        find(arrays, name)?
            .data
            .as_slice()
            .try_into()
            .map_err(|_| CliError::Usage(format!("checkpoint `{name}` must hold {CHANNELS} values")))
    };
    let norm = Normalizer {
        mean: channel_row("normalizer.mean")?,
        std: channel_row("normalizer.std")?,
    };
    if norm.std.iter().any(|s| !(*s > 0.0)) {
        return Err(CliError::Usage("checkpoint normaliser has a non-positive std".into()));
    }
    Ok((DiffusionModel { perceiver, predictor }, schedule, norm))
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory with `items.json`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Training iterations.
    #[arg(long)]
    #[serde(skip)]
    pub iters: Option<usize>,
}

/// Train the reference model; writes `model.ckp` (averaged weights) and
/// `train_log.csv`.
pub fn diffuse_train(ctx: &Ctx, args: &TrainArgs) -> Result<(), CliError> {
    let cfg: DiffusionConfig = ctx.sources.resolve(
        &DiffusionConfig::default(),
        &[
            ("max_iters", args.iters.map(|v| Value::Integer(v as i64))),
            ("seed", ctx.seed.map(|v| Value::Integer(v as i64))),
        ],
    )?;
    cfg.validate()?;
    let (_, items) = load_dataset(&args.data)?;
    let channels = items[0].condition.channels();
    if items.iter().any(|i| i.condition.channels() != channels) {
        return Err(CliError::Usage("dataset conditions differ in width".into()));
    }
    let normalizer = Normalizer::fit(items.iter().map(|i| &i.grid))?;
    let mut trainer = Trainer::new(reference_model(channels, cfg.seed), cfg.clone(), normalizer)?;
    let log = trainer.train(&items)?;
    create_dir(&args.out)?;
    let ema = trainer.ema_model()?;
    save_checkpoint(
        &args.out.join("model.ckp"),
        &checkpoint_arrays(&ema, &trainer.schedule, &trainer.normalizer),
    )?;
    let mut csv = Vec::new();
    write_log(&log, &mut csv)?;
    write_text(&args.out.join("train_log.csv"), std::str::from_utf8(&csv).expect("ASCII log"))?;
    let (first, last) = loss_ends(&log);
    println!(
        "{} iterations on {} items, {} parameters",
        log.len(),
        items.len(),
        trainer.model.params().len()
    );
    println!("L_diff first-10 mean {first:.6}, last-10 mean {last:.6}, reduction {:.1}%", 100.0 * (1.0 - last / first));
    write_snapshot(&args.out, "diffuse-train", cfg.seed, args, Some(&cfg))
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    /// Model written by `diffuse-train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset providing the condition, lattice size and bounds.
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset item whose condition is used.
    #[arg(long)]
    pub item: String,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

/// Ancestral sample written as `sample.vxg` and decoded to `sample.ply`.
pub fn diffuse_sample(ctx: &Ctx, args: &SampleArgs) -> Result<(), CliError> {
    ctx.sources.reject_any("diffuse-sample")?;
    let seed = ctx.seed();
    let (model, schedule, normalizer) = model_from_arrays(&load_checkpoint(&args.checkpoint)?)?;
    let (names, items) = load_dataset(&args.data)?;
    let k = names
        .iter()
        .position(|n| *n == args.item)
        .ok_or_else(|| CliError::Usage(format!("no item `{}`; have {}", args.item, names.join(", "))))?;
    let item = &items[k];
    if item.condition.channels() != model.perceiver.channels {
        return Err(CliError::Usage("condition width does not match the checkpoint".into()));
    }
    let fused = model.fused(&item.condition)?;
    let grid = sample(&model.predictor, &fused, item.grid.n, &schedule, &normalizer, item.grid.bounds, seed)?;
    let cloud = unstructure(&grid)?;
    if !cloud.iter().all(|g| g.is_finite()) {
        return Err(CliError::Numeric("sample decoded to non-finite Gaussians".into()));
    }
    create_dir(&args.out)?;
    save_grid(&args.out.join("sample.vxg"), &grid)?;
    save_ply(&args.out.join("sample.ply"), &cloud)?;
    let opacity = cloud.iter().map(|g| g.opacity()).sum::<f64>() / cloud.len() as f64;
    println!("sampled a {}^3 grid for `{}`, mean opacity {opacity:.4}", grid.n, args.item);
    write_snapshot::<_, ()>(&args.out, "diffuse-sample", seed, args, None)
}
