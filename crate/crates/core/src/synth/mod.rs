//! Synthetic motion clips: seeded smooth pose trajectories, rendered
//! silhouettes and joint heatmaps, and dataset persistence.

mod dataset;
mod motion;
mod render;

pub use dataset::{generate_dataset, read_dataset, write_dataset, Dataset, GenConfig, Split};
pub use motion::{
    generate_motion, generate_noisy_motion, sample_pose, MotionSequence, Style, BETA_RANGE, DEFAULT_FPS, FREQ_RANGE,
    MAX_AMPLITUDE, MIN_FRAMES,
};
pub use render::{
    add_noise, from_grid, gaussian_heatmap, heatmap_coords, rasterize, render_observation, to_grid, Observation,
    HEATMAP_SIGMA, HEATMAP_SIZE, IMAGE_SIZE, SPLAT_SIGMA,
};
