use std::io::Write;
use std::path::Path;

use diffcore::{Graph, ParamStore, Sgd, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{BodyTemplate, TemplateConsts, ThetaParams, THETA_DIM};
use crate::container::Container;
use crate::dsd::init_dsd_params;
use crate::error::{Error, Result};
use crate::losses::{init_disc_params, total_loss_vars};
use crate::nn::Loader;
use crate::satn::{init_satn_params, satn_forward, SatnConfig, SatnOutputs};
use crate::sorting::{gaussian_targets, sort_accuracy, sort_loss_vars, sorting_forward, Permutation};
use crate::synth::{sample_pose, Dataset, Split};
use crate::train::dsd::{batch_schedule, disc_step, dsd_predict, predicted_joints, theta_terms, FrameSample, LossLog};
use crate::train::{Checkpoint, RngState, Stage, TrainConfig};

/// Per-frame fused features and single-frame predictions of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqFeatures {
    pub seed: u64,
    /// `[frames, dim]`
    pub y: Vec<f64>,
    pub dsd_params: Vec<ThetaParams>,
    /// `[frames, 14, 3]` single-frame joint predictions.
    pub dsd_j3d: Vec<f64>,
}

impl SeqFeatures {
    pub fn frame_count(&self) -> usize {
        self.dsd_params.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub dim: usize,
    /// Aligned with the dataset's sequences.
    pub sequences: Vec<SeqFeatures>,
    /// Per-dimension mean of the training-split features.
    pub mean: Vec<f64>,
    /// Per-dimension standard deviation of the training-split features, 1
    /// for constant dimensions.
    pub std: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FeatureMeta {
    kind: String,
    dim: usize,
    seeds: Vec<u64>,
    frames: Vec<usize>,
}

fn key(i: usize, what: &str) -> String {
    format!("seq{i:05}/{what}")
}

/// Runs the frozen single-frame network over every frame of `ds`.
pub fn precompute_features(ds: &Dataset, template: &BodyTemplate, dsd: &Checkpoint) -> Result<FeatureStore> {
    if dsd.stage != Stage::Dsd {
        return Err(Error::Config("feature precomputation needs a single-frame checkpoint".into()));
    }
    dsd.check_matches(&init_dsd_params(&dsd.config.dsd, 0)?)?;
    let dim = dsd.config.dsd.fused_dim;
    let mut sequences = Vec::with_capacity(ds.sequences.len());
    for s in &ds.sequences {
        let mut f = SeqFeatures {
            seed: s.seed,
            y: Vec::with_capacity(s.frame_count() * dim),
            dsd_params: Vec::with_capacity(s.frame_count()),
            dsd_j3d: Vec::with_capacity(s.frame_count() * 42),
        };
        for obs in &s.observations {
            let p = dsd_predict(&dsd.params, template, &obs.silhouette)?;
            f.y.extend(p.feature);
            f.dsd_params.push(p.params);
            f.dsd_j3d.extend(p.j3d);
        }
        sequences.push(f);
    }
    let (mean, std) = feature_stats(ds, &sequences, dim);
    Ok(FeatureStore {
        dim,
        sequences,
        mean,
        std,
    })
}

/// Mean and standard deviation per dimension over training-split frames, or
/// over every frame when the split is empty.
fn feature_stats(ds: &Dataset, sequences: &[SeqFeatures], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let train: Vec<&SeqFeatures> = sequences
        .iter()
        .zip(&ds.sequences)
        .filter(|(_, s)| Split::of_seed(s.seed) == Split::Train)
        .map(|(f, _)| f)
        .collect();
    let pool = if train.is_empty() { sequences.iter().collect() } else { train };
    let rows: Vec<&[f64]> = pool.iter().flat_map(|f| f.y.chunks(dim)).collect();
    let n = rows.len().max(1) as f64;
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std = (0..dim)
        .map(|j| {
            let sd = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl FeatureStore {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let meta = FeatureMeta {
            kind: "features".into(),
            dim: self.dim,
            seeds: self.sequences.iter().map(|s| s.seed).collect(),
            frames: self.sequences.iter().map(|s| s.frame_count()).collect(),
        };
        let mut c = Container::new(serde_json::to_value(meta)?);
        for (i, s) in self.sequences.iter().enumerate() {
            let n = s.frame_count();
            c.push_array(key(i, "y"), vec![n, self.dim], s.y.clone())?;
            let theta = s.dsd_params.iter().flat_map(|p| p.to_vec()).collect();
            c.push_array(key(i, "dsd_theta"), vec![n, THETA_DIM], theta)?;
            c.push_array(key(i, "dsd_j3d"), vec![n, 14, 3], s.dsd_j3d.clone())?;
        }
        c.push_array("stats/mean".to_string(), vec![self.dim], self.mean.clone())?;
        c.push_array("stats/std".to_string(), vec![self.dim], self.std.clone())?;
        c.write(dir)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let c = Container::read(dir)?;
        let meta: FeatureMeta = serde_json::from_value(c.meta.clone())?;
        if meta.kind != "features" {
            return Err(Error::MissingData(format!("{} holds a {}, not features", dir.display(), meta.kind)));
        }
        let mut sequences = Vec::with_capacity(meta.seeds.len());
        for (i, (seed, n)) in meta.seeds.iter().zip(&meta.frames).enumerate() {
            let fetch = |what: &str, shape: Vec<usize>| -> Result<Vec<f64>> {
                let t = c.get(&key(i, what))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Shape {
                        what: key(i, what),
                        expected: shape,
                        actual: t.shape().to_vec(),
                    });
                }
                Ok(t.data().to_vec())
            };
            let theta = fetch("dsd_theta", vec![*n, THETA_DIM])?;
            sequences.push(SeqFeatures {
                seed: *seed,
                y: fetch("y", vec![*n, meta.dim])?,
                dsd_params: theta.chunks(THETA_DIM).map(ThetaParams::from_slice).collect::<Result<_>>()?,
                dsd_j3d: fetch("dsd_j3d", vec![*n, 14, 3])?,
            });
        }
        let stat = |name: &str| -> Result<Vec<f64>> {
            let t = c.get(name)?;
            if t.shape() != [meta.dim] {
                return Err(Error::Shape {
                    what: name.into(),
                    expected: vec![meta.dim],
                    actual: t.shape().to_vec(),
                });
            }
            Ok(t.data().to_vec())
        };
        Ok(Self {
            dim: meta.dim,
            sequences,
            mean: stat("stats/mean")?,
            std: stat("stats/std")?,
        })
    }

    fn check_against(&self, ds: &Dataset) -> Result<()> {
        let same = self.sequences.len() == ds.sequences.len()
            && self
                .sequences
                .iter()
                .zip(&ds.sequences)
                .all(|(f, s)| f.seed == s.seed && f.frame_count() == s.frame_count());
        if !same {
            return Err(Error::MissingData("features were computed for a different dataset".into()));
        }
        Ok(())
    }

    /// `[seq_len, dim]` window of sequence `seq` centered on `center`,
    /// replicating edge frames where the window runs past either end.
    /// Features are standardized when `cfg.standardize` is set.
    pub fn window(&self, seq: usize, cfg: &SatnConfig, center: usize) -> Tensor {
        let f = &self.sequences[seq];
        let dim = self.dim;
        let n = f.frame_count() as isize;
        let half = (cfg.seq_len / 2) as isize;
        let mut data = Vec::with_capacity(cfg.seq_len * dim);
        for o in -half..=half {
            let t = (center as isize + o).clamp(0, n - 1) as usize;
            let row = &f.y[t * dim..(t + 1) * dim];
            if cfg.standardize {
                data.extend(row.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s));
            } else {
                data.extend_from_slice(row);
            }
        }
        Tensor::new(vec![cfg.seq_len, dim], data).expect("window shape")
    }
}

/// `(sequence index, center frame)` of every full window in `split`.
pub fn full_windows(ds: &Dataset, seq_len: usize, split: Split) -> Vec<(usize, usize)> {
    let half = seq_len / 2;
    ds.sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| Split::of_seed(s.seed) == split)
        .flat_map(|(i, s)| (half..s.frame_count().saturating_sub(half)).map(move |c| (i, c)))
        .collect()
}

fn frame_sample(ds: &Dataset, seq: usize, frame: usize) -> FrameSample<'_> {
    let s = &ds.sequences[seq];
    FrameSample {
        silhouette: &s.observations[frame].silhouette,
        params: &s.gt_params[frame],
        j3d: s.j3d(frame),
        j2d: s.j2d(frame),
        has_3d: true,
    }
}

/// Trains the temporal network on precomputed features of the training
/// split. Each window takes the sorting branch with probability
/// `cfg.sort_prob` when sorting is enabled.
pub fn train_satn(
    ds: &Dataset,
    features: &FeatureStore,
    template: &BodyTemplate,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    cfg.validate()?;
    features.check_against(ds)?;
    let scfg = &cfg.satn;
    if features.dim != scfg.model_dim {
        return Err(Error::Config(format!(
            "feature dimension {} does not match model_dim {}",
            features.dim, scfg.model_dim
        )));
    }
    let windows = full_windows(ds, scfg.seq_len, Split::Train);
    if windows.is_empty() {
        return Err(Error::TooFewFrames {
            minimum: scfg.seq_len,
            actual: ds.split(Split::Train).map(|s| s.frame_count()).max().unwrap_or(0),
        });
    }
    let mut params = init_satn_params(scfg, cfg.seed)?;
    let mut disc = cfg.disc_enabled.then(|| init_disc_params(cfg.seed ^ 0xd15c)).transpose()?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, &params);
    let mut disc_opt = disc.as_ref().map(|d| Sgd::new(cfg.lr, cfg.momentum, d));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = batch_schedule(&mut rng, windows.len(), cfg.batch_size, cfg.total_steps(windows.len()));
    let io = |e| Error::Io {
        path: "training log".into(),
        source: e,
    };
    writeln!(log, "{}", LossLog::header(cfg.sorting_enabled)).map_err(io)?;
    let mut epoch_log = LossLog::default();
    for (step, (epoch, batch)) in schedule.iter().enumerate() {
        params.zero_grads();
        // Every stochastic choice of the step is drawn before any graph work.
        let choices: Vec<Option<Permutation>> = batch
            .iter()
            .map(|_| {
                (cfg.sorting_enabled && rng.gen_bool(cfg.sort_prob)).then(|| Permutation::random(scfg.seq_len, rng.gen()))
            })
            .collect();
        let mut fakes = Vec::with_capacity(batch.len());
        for (&w, perm) in batch.iter().zip(&choices) {
            let (seq, center) = windows[w];
            let mut g = Graph::new();
            let p = Loader::trainable(&params);
            let consts = TemplateConsts::new(&mut g, template);
            let x = g.constant(features.window(seq, scfg, center));
            let (out, scores) = match perm {
                Some(perm) => {
                    let o = sorting_forward(&mut g, p, scfg, x, perm)?;
                    (o.satn, Some((o.scores, perm)))
                }
                None => (satn_forward(&mut g, p, scfg, x)?, None),
            };
            let sample = frame_sample(ds, seq, center);
            let (mut terms, _) = theta_terms(&mut g, &consts, &out.theta, &sample, disc.as_ref())?;
            if let Some((scores, perm)) = scores {
                let targets = gaussian_targets(perm, cfg.sort_sigma)?;
                terms.s = Some(sort_loss_vars(&mut g, scores, &targets));
                epoch_log.add_sort_accuracy(sort_accuracy(g.data(scores), perm)?);
            }
            let total = total_loss_vars(&mut g, &terms, &cfg.weights)?;
            g.backward(total)?;
            g.accumulate_param_grads(&mut params)?;
            epoch_log.add_terms(&g, &terms, total);
            fakes.push(g.data(out.theta.pose).to_vec());
        }
        params.scale_grads(1.0 / batch.len() as f64);
        opt.step(&mut params)?;
        if let (Some(d), Some(o)) = (disc.as_mut(), disc_opt.as_mut()) {
            let real: Vec<_> = batch.iter().map(|_| sample_pose(rng.gen())).collect();
            epoch_log.add_disc(disc_step(d, o, &real, &fakes)?);
        }
        let last = step + 1 == schedule.len();
        if last || schedule[step + 1].0 != *epoch {
            writeln!(log, "{}", epoch_log.row(*epoch, step + 1, cfg.sorting_enabled)).map_err(io)?;
            epoch_log = LossLog::default();
        }
    }
    params.iter_mut().for_each(|(_, t)| t.clear_grad());
    if let Some(d) = disc.as_mut() {
        d.iter_mut().for_each(|(_, t)| t.clear_grad());
    }
    Ok(Checkpoint {
        stage: Stage::Satn,
        params,
        disc,
        config: cfg.clone(),
        step: schedule.len(),
        rng: RngState::capture(&rng),
    })
}

fn satn_outputs(g: &mut Graph, params: &ParamStore, cfg: &SatnConfig, x: Tensor) -> Result<SatnOutputs> {
    let x = g.constant(x);
    satn_forward(g, Loader::frozen(params), cfg, x)
}

/// Temporal predictions `(params, [frames, 14, 3] joints)` for every frame
/// of sequence `seq`.
pub fn satn_predict_sequence(
    params: &ParamStore,
    cfg: &SatnConfig,
    template: &BodyTemplate,
    features: &FeatureStore,
    seq: usize,
) -> Result<(Vec<ThetaParams>, Vec<f64>)> {
    let f = &features.sequences[seq];
    let mut thetas = Vec::with_capacity(f.frame_count());
    let mut joints = Vec::with_capacity(f.frame_count() * 42);
    for t in 0..f.frame_count() {
        let mut g = Graph::new();
        let consts = TemplateConsts::new(&mut g, template);
        let out = satn_outputs(&mut g, params, cfg, features.window(seq, cfg, t))?;
        let (j3d, _) = predicted_joints(&mut g, &consts, &out.theta);
        thetas.push(out.theta.to_params(&g));
        joints.extend_from_slice(g.data(j3d));
    }
    Ok((thetas, joints))
}

/// Mean sorting accuracy over every full window of `split`, each shuffled
/// by a permutation drawn from `seed`.
pub fn sort_accuracy_on(
    ds: &Dataset,
    features: &FeatureStore,
    params: &ParamStore,
    cfg: &SatnConfig,
    split: Split,
    seed: u64,
) -> Result<f64> {
    features.check_against(ds)?;
    let windows = full_windows(ds, cfg.seq_len, split);
    if windows.is_empty() {
        return Err(Error::MissingData(format!("no full windows in the {split:?} split")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for (seq, center) in &windows {
        let perm = Permutation::random(cfg.seq_len, rng.gen());
        let mut g = Graph::new();
        let x = g.constant(features.window(*seq, cfg, *center));
        let out = sorting_forward(&mut g, Loader::frozen(params), cfg, x, &perm)?;
        acc += sort_accuracy(g.data(out.scores), &perm)?;
    }
    Ok(acc / windows.len() as f64)
}
