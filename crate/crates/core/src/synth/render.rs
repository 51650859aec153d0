use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::body::{project, regress_joints, skin, BodyMesh, BodyTemplate, ThetaParams, NUM_LSP};
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 64;
pub const HEATMAP_SIZE: usize = 16;
pub const SPLAT_SIGMA: f64 = 1.0;
pub const HEATMAP_SIGMA: f64 = 0.75;

/// One rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `[64, 64]`, values in `[0, 1]`.
    pub silhouette: Vec<f64>,
    /// `[14, 16, 16]`, each joint map sums to one.
    pub heatmaps: Vec<f64>,
}

/// Maps a normalized image point `(x, y)` in `[-1, 1]` (y up) to
/// `(row, col)` on a grid of `size` cells per side.
pub fn to_grid(x: f64, y: f64, size: usize) -> (f64, f64) {
    let extent = (size - 1) as f64;
    ((1.0 - y) * 0.5 * extent, (x + 1.0) * 0.5 * extent)
}

/// Inverse of [`to_grid`].
pub fn from_grid(row: f64, col: f64, size: usize) -> (f64, f64) {
    let extent = (size - 1) as f64;
    (col / extent * 2.0 - 1.0, 1.0 - row / extent * 2.0)
}

/// `[14, 2]` joint positions as `(row, col)` heatmap coordinates.
pub fn heatmap_coords(j2d: &[f64]) -> Vec<f64> {
    j2d.chunks(2)
        .flat_map(|p| {
            let (r, c) = to_grid(p[0], p[1], HEATMAP_SIZE);
            [r, c]
        })
        .collect()
}

/// Normalized Gaussian bump centered at `(row, col)`.
pub fn gaussian_heatmap(row: f64, col: f64, size: usize, sigma: f64) -> Vec<f64> {
    let mut h: Vec<f64> = (0..size * size)
        .map(|p| {
            let (r, c) = ((p / size) as f64, (p % size) as f64);
            (-((r - row).powi(2) + (c - col).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= z);
    h
}

fn splat(image: &mut [f64], row: f64, col: f64) {
    let reach = (3.0 * SPLAT_SIGMA).ceil() as isize;
    let (r0, c0) = (row.round() as isize, col.round() as isize);
    for r in r0 - reach..=r0 + reach {
        for c in c0 - reach..=c0 + reach {
            if r < 0 || c < 0 || r >= IMAGE_SIZE as isize || c >= IMAGE_SIZE as isize {
                continue;
            }
            let d2 = (r as f64 - row).powi(2) + (c as f64 - col).powi(2);
            image[r as usize * IMAGE_SIZE + c as usize] += (-d2 / (2.0 * SPLAT_SIGMA * SPLAT_SIGMA)).exp();
        }
    }
}

/// Renders the silhouette and joint heatmaps of `params`.
///
/// Fails with [`Error::OutOfFrame`] when a joint projects outside the heatmap grid.
pub fn render_observation(params: &ThetaParams, template: &BodyTemplate) -> Result<Observation> {
    let mesh = skin(template, params)?;
    let j3d = regress_joints(&mesh, template)?;
    let j2d = project(&j3d, &params.global_r, params.scale, &params.trans)?;
    rasterize(params, &mesh, &j2d)
}

/// Renders from an already skinned mesh and its projected `[14, 2]` joints.
pub fn rasterize(params: &ThetaParams, mesh: &BodyMesh, j2d: &[f64]) -> Result<Observation> {
    let coords = heatmap_coords(j2d);
    let limit = (HEATMAP_SIZE - 1) as f64;
    for (k, rc) in coords.chunks(2).enumerate() {
        if rc.iter().any(|v| !(0.0..=limit).contains(v)) {
            return Err(Error::OutOfFrame { joint: k });
        }
    }
    let mut heatmaps = Vec::with_capacity(NUM_LSP * HEATMAP_SIZE * HEATMAP_SIZE);
    for rc in coords.chunks(2) {
        heatmaps.extend(gaussian_heatmap(rc[0], rc[1], HEATMAP_SIZE, HEATMAP_SIGMA));
    }
    let pixels = project(&mesh.vertices, &params.global_r, params.scale, &params.trans)?;
    let mut silhouette = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    for p in pixels.chunks(2) {
        let (r, c) = to_grid(p[0], p[1], IMAGE_SIZE);
        splat(&mut silhouette, r, c);
    }
    silhouette.iter_mut().for_each(|v| *v = v.min(1.0));
    Ok(Observation { silhouette, heatmaps })
}

/// Adds Gaussian pixel noise to the silhouette, clamped back to `[0, 1]`.
pub fn add_noise(obs: &mut Observation, std: f64, rng: &mut impl Rng) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    for v in obs.silhouette.iter_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
}
