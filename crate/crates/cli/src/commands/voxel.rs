use std::path::PathBuf;

use clap::{Args, ValueEnum};
use gsvox::io::{load_grid, load_ply, save_grid, save_ply};
use gsvox::losses::chamfer_distance;
use gsvox::voxel::{cube_root, grid_bounds, structure_with, unstructure, Solver};
use serde::Serialize;

use super::Ctx;
use crate::config::write_snapshot;
use crate::error::CliError;
use crate::files::{create_dir, write_text};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverArg {
    Auto,
    Hungarian,
    Auction,
    Greedy,
}

impl From<SolverArg> for Solver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Auto => Solver::Auto,
            SolverArg::Hungarian => Solver::Hungarian,
            SolverArg::Auction => Solver::Auction,
            SolverArg::Greedy => Solver::Greedy,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct VoxelizeArgs {
    /// Gaussian cloud (binary PLY).
    #[arg(long)]
    pub ply: PathBuf,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Lattice side; the cloud must hold exactly n³ Gaussians.
    #[arg(long)]
    pub n: Option<usize>,
    /// Assignment solver; `auto` is exact up to 1024 Gaussians.
    #[arg(long, value_enum, default_value_t = SolverArg::Auto)]
    pub solver: SolverArg,
}

#[derive(Serialize)]
struct VoxelizeReport {
    n: usize,
    solver: Solver,
    cost: f64,
    greedy_cost: f64,
    lower_bound: Option<f64>,
    round_trip_chamfer: f64,
}

fn positions(cloud: &gsvox::GaussianCloud) -> Vec<[f64; 3]> {
    cloud.iter().map(|g| g.position.into()).collect()
}

/// OT structuring into `grid.vxg`, with the transport cost next to the
/// greedy baseline in `voxelize.json`.
pub fn voxelize(ctx: &Ctx, args: &VoxelizeArgs) -> Result<(), CliError> {
    ctx.sources.reject_any("voxelize")?;
    let cloud = load_ply(&args.ply)?;
    if let Some(n) = args.n {
        if n.checked_pow(3) != Some(cloud.len()) {
            return Err(CliError::Usage(format!("{} Gaussians do not fill a {n}^3 grid", cloud.len())));
        }
    } else if cube_root(cloud.len()).is_none() {
        return Err(CliError::Usage(format!("{} Gaussians is not a perfect cube", cloud.len())));
    }
    let bounds = grid_bounds(&cloud)?;
    let (grid, a) = structure_with(&cloud, &bounds, args.solver.into())?;
    let back = unstructure(&grid)?;
    let report = VoxelizeReport {
        n: grid.n,
        solver: a.method,
        cost: a.cost,
        greedy_cost: a.greedy_cost,
        lower_bound: a.lower_bound,
        round_trip_chamfer: chamfer_distance(&positions(&cloud), &positions(&back))?,
    };
    if !(report.cost <= report.greedy_cost) {
        return Err(CliError::Numeric(format!("cost {} exceeds greedy {}", report.cost, report.greedy_cost)));
    }
    create_dir(&args.out)?;
    save_grid(&args.out.join("grid.vxg"), &grid)?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
    write_text(&args.out.join("voxelize.json"), &json)?;
    println!("grid {}^3 via {:?}", report.n, report.solver);
    println!("cost {:.12e}", report.cost);
    println!("greedy_cost {:.12e}", report.greedy_cost);
    if let Some(lb) = report.lower_bound {
        println!("lower_bound {lb:.12e}");
    }
    println!("round_trip_chamfer {:.3e}", report.round_trip_chamfer);
    write_snapshot::<_, ()>(&args.out, "voxelize", ctx.seed(), args, None)
}

#[derive(Debug, Args, Serialize)]
pub struct DevoxelizeArgs {
    /// Voxel grid file.
    #[arg(long)]
    pub grid: PathBuf,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

/// Decode a grid into `cloud.ply`.
pub fn devoxelize(ctx: &Ctx, args: &DevoxelizeArgs) -> Result<(), CliError> {
    ctx.sources.reject_any("devoxelize")?;
    let grid = load_grid(&args.grid)?;
    let cloud = unstructure(&grid)?;
    create_dir(&args.out)?;
    save_ply(&args.out.join("cloud.ply"), &cloud)?;
    println!("decoded {} Gaussians from a {}^3 grid", cloud.len(), grid.n);
    write_snapshot::<_, ()>(&args.out, "devoxelize", ctx.seed(), args, None)
}
