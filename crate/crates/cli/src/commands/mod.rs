mod align;
mod diffusion;
mod gradcheck;
mod scene;
mod voxel;

pub use align::{align_eval, AlignArgs};
pub use diffusion::{diffuse_sample, diffuse_train, SampleArgs, TrainArgs};
pub use gradcheck::{gradcheck, GradcheckArgs};
pub use scene::{demo, fit, render_cmd, DemoArgs, FitArgs, RenderArgs};
pub use voxel::{devoxelize, voxelize, DevoxelizeArgs, VoxelizeArgs};

use crate::config::Sources;

/// Settings shared by every command.
pub struct Ctx {
    /// `--seed`, when given.
    pub seed: Option<u64>,
    pub sources: Sources,
}

impl Ctx {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}
