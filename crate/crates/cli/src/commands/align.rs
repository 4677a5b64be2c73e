use std::path::PathBuf;

use clap::Args;
use gsvox::alignment::{info_nce_pair, retrieval_topk, stage1_loss, stage2_loss, triplet_loss, ContrastConfig};
use gsvox::io::{load_embeddings, EmbeddingTable};
use serde::Serialize;
use toml::Value;

use super::Ctx;
use crate::config::write_snapshot;
use crate::error::CliError;
use crate::files::{create_dir, write_text};

#[derive(Debug, Args, Serialize)]
pub struct AlignArgs {
    /// Query embeddings; row i is paired with row i of every other table.
    #[arg(long)]
    pub sketch: PathBuf,
    /// Gallery embeddings.
    #[arg(long)]
    pub shape: PathBuf,
    /// Enables the sketch-stage loss.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    /// With `--image`, enables the shape-stage loss.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Temperature.
    #[arg(long)]
    #[serde(skip)]
    pub tau: Option<f64>,
    /// Triplet margin.
    #[arg(long)]
    #[serde(skip)]
    pub margin: Option<f64>,
    /// Cut-offs of the top-k table.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub ks: Vec<usize>,
}

#[derive(Serialize)]
struct TopK {
    k: usize,
    sketch_to_shape: f64,
    shape_to_sketch: f64,
}

#[derive(Serialize)]
struct AlignReport {
    items: usize,
    info_nce: f64,
    triplet: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage2: Option<f64>,
    topk: Vec<TopK>,
}

fn paired(a: &EmbeddingTable, b: &EmbeddingTable, what: &str) -> Result<(), CliError> {
    if a.ids != b.ids {
        return Err(CliError::Usage(format!("{what}: row ids differ from the sketch table")));
    }
    Ok(())
}

/// Alignment losses on stored embeddings and the retrieval table, written to
/// `align.json`.
pub fn align_eval(ctx: &Ctx, args: &AlignArgs) -> Result<(), CliError> {
    let cfg: ContrastConfig = ctx.sources.resolve(
        &ContrastConfig::default(),
        &[
            ("temperature", args.tau.map(Value::Float)),
            ("margin", args.margin.map(Value::Float)),
        ],
    )?;
    cfg.validate()?;
    let s = load_embeddings(&args.sketch)?;
    let p = load_embeddings(&args.shape)?;
    paired(&s, &p, "shape")?;
    let image = args.image.as_deref().map(load_embeddings).transpose()?;
    let text = args.text.as_deref().map(load_embeddings).transpose()?;
    if text.is_some() && image.is_none() {
        return Err(CliError::Usage("--text needs --image".into()));
    }
    let stage2 = match &image {
        Some(i) => {
            paired(&s, i, "image")?;
            Some(stage2_loss(&s.batch, &p.batch, &i.batch, &cfg)?)
        }
        None => None,
    };
    let stage1 = match (&text, &image) {
        (Some(t), Some(i)) => {
            paired(&s, t, "text")?;
            Some(stage1_loss(&p.batch, &t.batch, &i.batch, cfg.temperature)?)
        }
        _ => None,
    };
    let forward = retrieval_topk(&s.batch, &p.batch, &args.ks)?;
    let backward = retrieval_topk(&p.batch, &s.batch, &args.ks)?;
    let report = AlignReport {
        items: s.ids.len(),
        info_nce: info_nce_pair(&s.batch, &p.batch, cfg.temperature)?,
        triplet: triplet_loss(&s.batch, &p.batch, cfg.margin)?,
        stage1,
        stage2,
        topk: args
            .ks
            .iter()
            .zip(forward.iter().zip(&backward))
            .map(|(&k, (&f, &b))| TopK {
                k,
                sketch_to_shape: f,
                shape_to_sketch: b,
            })
            .collect(),
    };
    create_dir(&args.out)?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
    write_text(&args.out.join("align.json"), &json)?;
    println!("items {}", report.items);
    println!("info_nce {:.9}", report.info_nce);
    println!("triplet {:.9}", report.triplet);
    if let Some(v) = report.stage1 {
        println!("stage1 {v:.9}");
    }
    if let Some(v) = report.stage2 {
        println!("stage2 {v:.9}");
    }
    println!("{:>6} {:>16} {:>16}", "k", "sketch->shape", "shape->sketch");
    for t in &report.topk {
        println!("{:>6} {:>16.6} {:>16.6}", t.k, t.sketch_to_shape, t.shape_to_sketch);
    }
    write_snapshot(&args.out, "align-eval", ctx.seed(), args, Some(&cfg))
}
