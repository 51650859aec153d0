//! Single-frame network: convolutional encoder, skeleton branch with
//! integral regression over heatmaps, detail branch, bilinear fusion and the
//! body-parameter head.

use diffcore::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{ThetaVars, NUM_LSP, THETA_DIM};
use crate::error::{Error, Result};
use crate::nn::{self, Loader};
use crate::synth::{HEATMAP_SIZE, IMAGE_SIZE};

/// Tolerance on heatmap mass accepted by [`dir`].
pub const DIR_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsdConfig {
    pub detail_dim: usize,
    pub fused_dim: usize,
    pub skeleton_dim: usize,
    pub heatmap_size: usize,
    pub encoder_channels: [usize; 4],
    pub deconv_channels: usize,
    pub detail_hidden: usize,
}

impl Default for DsdConfig {
    fn default() -> Self {
        Self {
            detail_dim: 64,
            fused_dim: 64,
            skeleton_dim: 2 * NUM_LSP,
            heatmap_size: HEATMAP_SIZE,
            encoder_channels: [8, 16, 32, 32],
            deconv_channels: 16,
            detail_hidden: 64,
        }
    }
}

impl DsdConfig {
    /// Full-width fusion: 512-dimensional detail and fused vectors.
    pub fn full_scale() -> Self {
        Self {
            detail_dim: 512,
            fused_dim: 512,
            detail_hidden: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.skeleton_dim != 2 * NUM_LSP {
            return Err(Error::Config(format!(
                "skeleton_dim must be {} (two coordinates per joint), got {}",
                2 * NUM_LSP,
                self.skeleton_dim
            )));
        }
        if self.heatmap_size != HEATMAP_SIZE {
            return Err(Error::Config(format!("heatmap_size must be {HEATMAP_SIZE}")));
        }
        let dims = [self.detail_dim, self.fused_dim, self.deconv_channels, self.detail_hidden];
        if dims.iter().chain(&self.encoder_channels).any(|d| *d == 0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder stride per stage; 64 -> 32 -> 16 -> 8 -> 8.
const ENCODER_STRIDES: [usize; 4] = [2, 2, 2, 1];

/// Seeded initial weights under the `dsd.` prefix.
pub fn init_dsd_params(cfg: &DsdConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let mut cin = 1;
    for (i, &c) in cfg.encoder_channels.iter().enumerate() {
        nn::add_conv(&mut s, &mut rng, &format!("dsd.enc{i}"), cin, c, 3)?;
        cin = c;
    }
    let dc = cfg.deconv_channels;
    nn::add_conv_transpose(&mut s, &mut rng, "dsd.deconv0", cin, dc, 4)?;
    nn::add_conv_transpose(&mut s, &mut rng, "dsd.deconv1", dc, dc, 3)?;
    nn::add_conv_transpose(&mut s, &mut rng, "dsd.deconv2", dc, dc, 3)?;
    nn::add_conv(&mut s, &mut rng, "dsd.heat", dc, NUM_LSP, 1)?;
    nn::add_linear(&mut s, &mut rng, "dsd.detail0", cin, cfg.detail_hidden)?;
    nn::add_linear(&mut s, &mut rng, "dsd.detail1", cfg.detail_hidden, cfg.detail_dim)?;
    let fan_in = cfg.skeleton_dim * cfg.detail_dim;
    let a = diffcore::glorot_uniform(
        &mut rng,
        &[cfg.fused_dim, cfg.skeleton_dim, cfg.detail_dim],
        fan_in,
        cfg.fused_dim,
    );
    s.insert("dsd.bilinear", a)?;
    nn::add_linear(&mut s, &mut rng, "dsd.head", cfg.fused_dim, THETA_DIM)?;
    Ok(s)
}

/// Encoder output: `[C, 8, 8]` feature map and its spatial mean `[C]`.
pub fn encode(g: &mut Graph, p: Loader, image: Var) -> Result<(Var, Var)> {
    if g.shape(image) != [1, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(Error::Shape {
            what: "encoder input".into(),
            expected: vec![1, IMAGE_SIZE, IMAGE_SIZE],
            actual: g.shape(image).to_vec(),
        });
    }
    let mut x = image;
    for (i, stride) in ENCODER_STRIDES.iter().enumerate() {
        let (w, b) = p.layer(g, &format!("dsd.enc{i}"))?;
        let y = g.conv2d(x, w, b, *stride, 1);
        x = g.relu(y);
    }
    let (c, h, w) = match g.shape(x) {
        [c, h, w] => (*c, *h, *w),
        _ => unreachable!("conv2d output is 3-D"),
    };
    let flat = g.reshape(x, &[c, h * w]);
    let pooled = g.row_means(flat);
    Ok((x, pooled))
}

/// Per-joint normalized heatmaps `[14, 16 * 16]`.
pub fn skeleton_branch(g: &mut Graph, p: Loader, features: Var) -> Result<Var> {
    let (w, b) = p.layer(g, "dsd.deconv0")?;
    let x = g.conv_transpose2d(features, w, b, 2, 1);
    let mut x = g.relu(x);
    for name in ["dsd.deconv1", "dsd.deconv2"] {
        let (w, b) = p.layer(g, name)?;
        let y = g.conv_transpose2d(x, w, b, 1, 1);
        x = g.relu(y);
    }
    let (w, b) = p.layer(g, "dsd.heat")?;
    let logits = g.conv2d(x, w, b, 1, 0);
    let logits = g.reshape(logits, &[NUM_LSP, HEATMAP_SIZE * HEATMAP_SIZE]);
    Ok(g.softmax_rows(logits))
}

/// Index coordinates of every cell of a grid with extents `dims`, row-major,
/// as a `[prod(dims), dims.len()]` matrix.
pub fn coordinate_grid(dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n * dims.len());
    for p in 0..n {
        let mut rest = p;
        let mut idx = vec![0.0; dims.len()];
        for (d, extent) in dims.iter().enumerate().rev() {
            idx[d] = (rest % extent) as f64;
            rest /= extent;
        }
        data.extend(idx);
    }
    Tensor::new(vec![n, dims.len()], data).expect("grid shape")
}

/// Integral regression over heatmaps `[K, prod(dims)]`: the expected grid
/// index of each map, `[K, dims.len()]`.
pub fn dir_vars(g: &mut Graph, heatmaps: Var, dims: &[usize]) -> Var {
    let grid = g.constant(coordinate_grid(dims));
    g.matmul(heatmaps, grid)
}

/// Plain integral regression with a normalization check. `heatmaps` holds
/// `K` maps of extents `dims`; a 2-D map yields `(row, col)`.
pub fn dir(heatmaps: &[f64], dims: &[usize]) -> Result<Vec<f64>> {
    let cells: usize = dims.iter().product();
    if cells == 0 || heatmaps.len() % cells != 0 {
        return Err(Error::Shape {
            what: "heatmaps".into(),
            expected: dims.to_vec(),
            actual: vec![heatmaps.len()],
        });
    }
    let k = heatmaps.len() / cells;
    for (i, h) in heatmaps.chunks(cells).enumerate() {
        let sum: f64 = h.iter().sum();
        if (sum - 1.0).abs() > DIR_NORM_TOL || h.iter().any(|v| *v < 0.0) {
            return Err(Error::NotNormalized { index: i, sum });
        }
    }
    let mut g = Graph::new();
    let h = g.constant(Tensor::new(vec![k, cells], heatmaps.to_vec())?);
    let out = dir_vars(&mut g, h, dims);
    Ok(g.data(out).to_vec())
}

/// Maps heatmap coordinates `[14, 2]` to a flat `[28]` vector in `[-1, 1]`.
pub fn normalize_skeleton(g: &mut Graph, coords: Var) -> Var {
    let half = (HEATMAP_SIZE - 1) as f64 / 2.0;
    let n = g.value(coords).numel();
    let flat = g.reshape(coords, &[n]);
    let scaled = g.scale(flat, 1.0 / half);
    g.offset(scaled, -1.0)
}

pub fn detail_branch(g: &mut Graph, p: Loader, pooled: Var) -> Result<Var> {
    let (w, b) = p.layer(g, "dsd.detail0")?;
    let h = nn::linear(g, w, b, pooled);
    let h = g.relu(h);
    let (w, b) = p.layer(g, "dsd.detail1")?;
    let out = nn::linear(g, w, b, h);
    Ok(g.relu(out))
}

pub fn fuse(g: &mut Graph, p: Loader, x_s: Var, x_d: Var) -> Result<Var> {
    let a = p.get(g, "dsd.bilinear")?;
    Ok(g.bilinear(x_s, a, x_d))
}

/// Raw 85-vector from the fused feature.
pub fn regress_theta(g: &mut Graph, p: Loader, y: Var) -> Result<Var> {
    let (w, b) = p.layer(g, "dsd.head")?;
    Ok(nn::linear(g, w, b, y))
}

#[derive(Debug, Clone, Copy)]
pub struct DsdOutputs {
    pub heatmaps: Var,
    /// DIR joint coordinates `[14, 2]` as `(row, col)` heatmap indices.
    pub skeleton: Var,
    /// Normalized skeleton vector `[28]` fed to the bilinear layer.
    pub x_s: Var,
    pub x_d: Var,
    /// Fused per-frame feature `[d_y]`.
    pub y: Var,
    pub raw_theta: Var,
    pub theta: ThetaVars,
}

pub fn image_input(g: &mut Graph, silhouette: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::new(vec![1, IMAGE_SIZE, IMAGE_SIZE], silhouette.to_vec())?))
}

pub fn dsd_forward(g: &mut Graph, p: Loader, image: Var) -> Result<DsdOutputs> {
    let (features, pooled) = encode(g, p, image)?;
    let heatmaps = skeleton_branch(g, p, features)?;
    let skeleton = dir_vars(g, heatmaps, &[HEATMAP_SIZE, HEATMAP_SIZE]);
    let x_s = normalize_skeleton(g, skeleton);
    dsd_head(g, p, pooled, heatmaps, skeleton, x_s)
}

/// Forward pass with an externally supplied normalized skeleton vector in
/// place of the predicted one.
pub fn dsd_forward_with_skeleton(g: &mut Graph, p: Loader, image: Var, x_s: Var) -> Result<DsdOutputs> {
    let (features, pooled) = encode(g, p, image)?;
    let heatmaps = skeleton_branch(g, p, features)?;
    let skeleton = dir_vars(g, heatmaps, &[HEATMAP_SIZE, HEATMAP_SIZE]);
    dsd_head(g, p, pooled, heatmaps, skeleton, x_s)
}

fn dsd_head(g: &mut Graph, p: Loader, pooled: Var, heatmaps: Var, skeleton: Var, x_s: Var) -> Result<DsdOutputs> {
    let x_d = detail_branch(g, p, pooled)?;
    let y = fuse(g, p, x_s, x_d)?;
    let raw_theta = regress_theta(g, p, y)?;
    let theta = ThetaVars::from_raw(g, raw_theta);
    Ok(DsdOutputs {
        heatmaps,
        skeleton,
        x_s,
        x_d,
        y,
        raw_theta,
        theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn store() -> ParamStore {
        init_dsd_params(&DsdConfig::default(), 3).unwrap()
    }

    #[test]
    fn encoder_reaches_eight_by_eight() {
        let s = store();
        let mut g = Graph::new();
        let img = image_input(&mut g, &vec![0.0; 64 * 64]).unwrap();
        let (f, pooled) = encode(&mut g, Loader::trainable(&s), img).unwrap();
        assert_eq!(g.shape(f), &[32, 8, 8]);
        assert_eq!(g.shape(pooled), &[32]);
        // Zero biases and a zero image give an all-zero feature map.
        assert!(g.data(f).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let s = store();
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros([1, 32, 32]));
        assert!(matches!(encode(&mut g, Loader::trainable(&s), img), Err(Error::Shape { .. })));
    }

    #[test]
    fn heatmaps_are_normalized_and_uniform_on_flat_logits() {
        let s = store();
        let mut g = Graph::new();
        let zero = g.constant(Tensor::zeros([32, 8, 8]));
        let h = skeleton_branch(&mut g, Loader::trainable(&s), zero).unwrap();
        for row in g.data(h).chunks(256) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| (v - 1.0 / 256.0).abs() < 1e-15));
        }
        let xy = dir(g.data(h), &[16, 16]).unwrap();
        assert!(xy.iter().all(|v| (v - 7.5).abs() < 1e-12));
    }

    #[test]
    fn dir_examples() {
        let mut h = vec![0.0; 256];
        h[3 * 16 + 5] = 1.0;
        assert_eq!(dir(&h, &[16, 16]).unwrap(), vec![3.0, 5.0]);
        h[0] = 0.5;
        assert!(matches!(dir(&h, &[16, 16]), Err(Error::NotNormalized { index: 0, .. })));
    }

    #[test]
    fn detail_branch_on_zero_input_is_bias_driven() {
        let mut s = store();
        s.get_mut("dsd.detail1.b").unwrap().data_mut().iter_mut().for_each(|b| *b = 0.25);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([32]));
        let xd = detail_branch(&mut g, Loader::trainable(&s), z).unwrap();
        assert_eq!(g.data(xd).len(), 64);
        assert!(g.data(xd).iter().all(|v| *v == 0.25));
    }

    #[test]
    fn zero_fused_vector_gives_positive_scale() {
        let s = store();
        let mut g = Graph::new();
        let y = g.constant(Tensor::zeros([64]));
        let raw = regress_theta(&mut g, Loader::trainable(&s), y).unwrap();
        assert_eq!(g.data(raw).len(), THETA_DIM);
        let th = ThetaVars::from_raw(&mut g, raw);
        assert!(g.data(th.scale)[0] > 0.0);
    }

    #[test]
    fn forward_is_deterministic_and_skeleton_in_range() {
        let s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let run = || {
            let mut g = Graph::new();
            let x = image_input(&mut g, &img).unwrap();
            let o = dsd_forward(&mut g, Loader::trainable(&s), x).unwrap();
            (g.data(o.raw_theta).to_vec(), g.data(o.skeleton).to_vec(), g.data(o.x_s).to_vec())
        };
        let (a, sk, xs) = run();
        assert_eq!(a, run().0);
        assert!(sk.iter().all(|v| (0.0..=15.0).contains(v)));
        assert!(xs.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn full_scale_preset_has_wide_fusion() {
        let c = DsdConfig::full_scale();
        assert_eq!((c.detail_dim, c.fused_dim, c.skeleton_dim), (512, 512, 28));
        let mut bad = DsdConfig::default();
        bad.skeleton_dim = 30;
        assert!(bad.validate().is_err());
    }
}
