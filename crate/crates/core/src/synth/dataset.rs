use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::body::{BodyTemplate, ThetaParams, NUM_LSP, THETA_DIM};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::synth::motion::{generate_noisy_motion, MotionSequence, Style};
use crate::synth::render::{Observation, HEATMAP_SIZE, IMAGE_SIZE};

/// Which half of a dataset a sequence belongs to, by seed parity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn of_seed(seed: u64) -> Self {
        if seed % 2 == 0 {
            Split::Train
        } else {
            Split::Heldout
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub sequences: usize,
    pub frames: usize,
    /// Silhouette pixel noise standard deviation.
    pub noise: f64,
    /// Fixed style, or cycle through all styles when `None`.
    pub style: Option<Style>,
    pub vertex_count: usize,
    pub template_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            sequences: 8,
            frames: 16,
            noise: 0.0,
            style: None,
            vertex_count: 432,
            template_seed: 0,
        }
    }
}

/// Generated sequences plus the number of seeds skipped because a frame
/// left the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub sequences: Vec<MotionSequence>,
    pub skipped: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &MotionSequence> {
        self.sequences.iter().filter(move |s| Split::of_seed(s.seed) == split)
    }
}

/// Generates `cfg.sequences` sequences from consecutive seeds starting at
/// `first_seed`, skipping (and counting) seeds whose motion leaves the frame.
pub fn generate_dataset(template: &BodyTemplate, first_seed: u64, cfg: &GenConfig) -> Result<Dataset> {
    let mut sequences = Vec::with_capacity(cfg.sequences);
    let mut skipped = 0;
    let mut seed = first_seed;
    while sequences.len() < cfg.sequences {
        let style = cfg.style.unwrap_or(Style::ALL[((seed / 2) % 4) as usize]);
        match generate_noisy_motion(template, seed, cfg.frames, style, cfg.noise) {
            Ok(seq) => sequences.push(seq),
            Err(Error::OutOfFrame { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
        seed += 1;
    }
    Ok(Dataset {
        config: cfg.clone(),
        sequences,
        skipped,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeqMeta {
    seed: u64,
    style: Style,
    fps: f64,
    frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    kind: String,
    config: GenConfig,
    skipped: usize,
    sequences: Vec<SeqMeta>,
}

fn seq_key(i: usize, what: &str) -> String {
    format!("seq{i:05}/{what}")
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let meta = DatasetMeta {
        kind: "dataset".into(),
        config: ds.config.clone(),
        skipped: ds.skipped,
        sequences: ds
            .sequences
            .iter()
            .map(|s| SeqMeta {
                seed: s.seed,
                style: s.style,
                fps: s.fps,
                frames: s.frame_count(),
            })
            .collect(),
    };
    let mut c = Container::new(serde_json::to_value(&meta)?);
    for (i, s) in ds.sequences.iter().enumerate() {
        let n = s.frame_count();
        let params = s.gt_params.iter().flat_map(|p| p.to_vec()).collect();
        c.push_array(seq_key(i, "params"), vec![n, THETA_DIM], params)?;
        c.push_array(seq_key(i, "j3d"), vec![n, NUM_LSP, 3], s.gt_j3d.clone())?;
        c.push_array(seq_key(i, "j2d"), vec![n, NUM_LSP, 2], s.gt_j2d.clone())?;
        let sil = s.observations.iter().flat_map(|o| o.silhouette.iter().copied()).collect();
        c.push_array(seq_key(i, "silhouette"), vec![n, IMAGE_SIZE, IMAGE_SIZE], sil)?;
        let hm = s.observations.iter().flat_map(|o| o.heatmaps.iter().copied()).collect();
        c.push_array(seq_key(i, "heatmaps"), vec![n, NUM_LSP, HEATMAP_SIZE, HEATMAP_SIZE], hm)?;
    }
    c.write(dir)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let c = Container::read(dir)?;
    let meta: DatasetMeta = serde_json::from_value(c.meta.clone())?;
    if meta.kind != "dataset" {
        return Err(Error::MissingData(format!("{} holds a {}, not a dataset", dir.display(), meta.kind)));
    }
    let mut sequences = Vec::with_capacity(meta.sequences.len());
    for (i, m) in meta.sequences.iter().enumerate() {
        let n = m.frames;
        let fetch = |what: &str, shape: Vec<usize>| -> Result<Vec<f64>> {
            let key = seq_key(i, what);
            let t = c.get(&key)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    what: key,
                    expected: shape,
                    actual: t.shape().to_vec(),
                });
            }
            Ok(t.data().to_vec())
        };
        let params = fetch("params", vec![n, THETA_DIM])?;
        let gt_params = params
            .chunks(THETA_DIM)
            .map(ThetaParams::from_slice)
            .collect::<Result<Vec<_>>>()?;
        let sil = fetch("silhouette", vec![n, IMAGE_SIZE, IMAGE_SIZE])?;
        let hm = fetch("heatmaps", vec![n, NUM_LSP, HEATMAP_SIZE, HEATMAP_SIZE])?;
        let observations = sil
            .chunks(IMAGE_SIZE * IMAGE_SIZE)
            .zip(hm.chunks(NUM_LSP * HEATMAP_SIZE * HEATMAP_SIZE))
            .map(|(s, h)| Observation {
                silhouette: s.to_vec(),
                heatmaps: h.to_vec(),
            })
            .collect();
        sequences.push(MotionSequence {
            seed: m.seed,
            style: m.style,
            fps: m.fps,
            gt_params,
            gt_j3d: fetch("j3d", vec![n, NUM_LSP, 3])?,
            gt_j2d: fetch("j2d", vec![n, NUM_LSP, 2])?,
            observations,
        });
    }
    Ok(Dataset {
        config: meta.config,
        sequences,
        skipped: meta.skipped,
    })
}
