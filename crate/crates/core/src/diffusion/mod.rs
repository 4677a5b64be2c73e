//! Toy conditioned DDPM over voxelised Gaussian grids.
//!
//! Grids are standardised per channel, noised, and denoised by a small
//! volumetric network that attends to 17 fused condition tokens (16 reduced
//! sketch rows and one text row). After warm-up the one-step clean estimate
//! is decoded, rendered and supervised with the image, depth and normal
//! losses as well.

mod params;
mod perceiver;
mod predictor;
mod schedule;
mod toy;
mod train;

pub use params::{Init, ParamStore, TensorSpec};
pub use perceiver::{fuse_condition, ConditionBundle, Perceiver, PerceiverTrace, QUERIES};
pub use predictor::{timestep_embedding, NoisePredictor, OraclePredictor, TrainablePredictor, VoxelUNet};
pub use schedule::{
    diffusion_loss, make_schedule, predict_x0, predict_x0_noise_jacobian, q_sample, schedule_from_betas, DiffusionConfig,
    Ema, Schedule, MIN_ALPHA_BAR,
};
pub use toy::{toy_bounds, toy_dataset, toy_names, ToySpec, SKETCH_TOKENS};
pub use train::{
    sample, write_log, DiffusionItem, DiffusionModel, Normalizer, StepLosses, Trainer, LOG_HEADER, STD_FLOOR,
};

/// Hidden width of the reference predictor and reducer.
pub const DEFAULT_HIDDEN: usize = 32;

/// Reference model for `channels`-wide conditions.
pub fn reference_model(channels: usize, seed: u64) -> DiffusionModel<VoxelUNet> {
    DiffusionModel {
        perceiver: Perceiver::new(channels, channels, seed),
        predictor: VoxelUNet::new(DEFAULT_HIDDEN, channels, seed.wrapping_add(1)),
    }
}
