use std::io::Write;

use diffcore::{Graph, ParamStore, Sgd, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body::{
    project_vars, regress_joints_vars, skin_vars, BodyTemplate, TemplateConsts, ThetaParams, ThetaVars,
};
use crate::dsd::{dsd_forward, image_input, init_dsd_params, DsdOutputs};
use crate::error::{Error, Result};
use crate::losses::{
    disc_losses_vars, disc_scores, init_disc_params, loss_2d_vars, loss_2dj_vars, loss_3d_vars, loss_pm_vars,
    pose_rotations, total_loss_vars, LossTerms, LossWeights,
};
use crate::nn::Loader;
use crate::synth::{heatmap_coords, sample_pose, Dataset, Split};
use crate::train::{Checkpoint, RngState, Stage, TrainConfig};

/// One supervised frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameSample<'a> {
    pub silhouette: &'a [f64],
    pub params: &'a ThetaParams,
    pub j3d: &'a [f64],
    pub j2d: &'a [f64],
    /// False for frames with 2D labels only; they get no parameter or 3D loss.
    pub has_3d: bool,
}

/// Every frame of the sequences in `split`, in dataset order.
pub fn frame_samples(ds: &Dataset, split: Split) -> Vec<FrameSample<'_>> {
    ds.split(split)
        .flat_map(|s| {
            (0..s.frame_count()).map(move |f| FrameSample {
                silhouette: &s.observations[f].silhouette,
                params: &s.gt_params[f],
                j3d: s.j3d(f),
                j2d: s.j2d(f),
                has_3d: true,
            })
        })
        .collect()
}

/// Predicted joints of a parameter vector: `([14, 3], [14, 2])`.
pub fn predicted_joints(g: &mut Graph, consts: &TemplateConsts, theta: &ThetaVars) -> (Var, Var) {
    let mesh = skin_vars(g, consts, theta);
    let j3d = regress_joints_vars(g, consts, mesh.vertices);
    let j2d = project_vars(g, j3d, theta.global_r, theta.scale, theta.trans);
    (j3d, j2d)
}

/// Generator-side loss terms for one predicted parameter set. The
/// discriminator, when given, is frozen.
pub fn theta_terms(
    g: &mut Graph,
    consts: &TemplateConsts,
    theta: &ThetaVars,
    sample: &FrameSample,
    disc: Option<&ParamStore>,
) -> Result<(LossTerms<Var>, Var)> {
    let (j3d, j2d) = predicted_joints(g, consts, theta);
    let mut terms = LossTerms {
        j2d: Some(loss_2d_vars(g, j2d, sample.j2d)?),
        ..LossTerms::default()
    };
    if sample.has_3d {
        terms.pm = Some(loss_pm_vars(g, theta, sample.params));
        terms.j3d = Some(loss_3d_vars(g, j3d, sample.j3d)?);
    }
    if let Some(d) = disc {
        let rot = pose_rotations(g, theta.pose);
        let scores = disc_scores(g, Loader::frozen(d), rot)?;
        terms.r = disc_losses_vars(g, &[], &[scores]).1;
    }
    Ok((terms, j3d))
}

pub struct FrameLoss {
    pub total: Var,
    pub terms: LossTerms<Var>,
    pub outputs: DsdOutputs,
    pub j3d: Var,
}

/// Full single-frame objective.
pub fn dsd_frame_loss(
    g: &mut Graph,
    p: Loader,
    template: &BodyTemplate,
    sample: &FrameSample,
    weights: &LossWeights,
    disc: Option<&ParamStore>,
) -> Result<FrameLoss> {
    let consts = TemplateConsts::new(g, template);
    let image = image_input(g, sample.silhouette)?;
    let outputs = dsd_forward(g, p, image)?;
    let (mut terms, j3d) = theta_terms(g, &consts, &outputs.theta, sample, disc)?;
    terms.j2dj = Some(loss_2dj_vars(g, outputs.skeleton, &heatmap_coords(sample.j2d))?);
    let total = total_loss_vars(g, &terms, weights)?;
    Ok(FrameLoss {
        total,
        terms,
        outputs,
        j3d,
    })
}

/// Running sums of loss terms for the CSV log.
#[derive(Debug, Default, Clone)]
pub(crate) struct LossLog {
    sums: [f64; 9],
    counts: [usize; 9],
}

impl LossLog {
    const TOTAL: usize = 6;
    const DISC: usize = 7;
    const SORT_ACC: usize = 8;

    /// Sorting columns appear only when the sorting branch is enabled.
    pub(crate) fn header(sorting: bool) -> String {
        let mut h = String::from("epoch,step,l_pm,l_3d,l_2d,l_r,l_2dj,total,l_d");
        if sorting {
            h.push_str(",l_s,sort_acc");
        }
        h
    }

    pub(crate) fn add_terms(&mut self, g: &Graph, t: &LossTerms<Var>, total: Var) {
        let vals = [t.pm, t.j3d, t.j2d, t.r, t.j2dj, t.s];
        for (i, v) in vals.iter().enumerate() {
            if let Some(v) = v {
                self.sums[i] += g.value(*v).item();
                self.counts[i] += 1;
            }
        }
        self.sums[Self::TOTAL] += g.value(total).item();
        self.counts[Self::TOTAL] += 1;
    }

    pub(crate) fn add_disc(&mut self, l_d: f64) {
        self.sums[Self::DISC] += l_d;
        self.counts[Self::DISC] += 1;
    }

    pub(crate) fn add_sort_accuracy(&mut self, acc: f64) {
        self.sums[Self::SORT_ACC] += acc;
        self.counts[Self::SORT_ACC] += 1;
    }

    pub(crate) fn row(&self, epoch: usize, step: usize, sorting: bool) -> String {
        let cell = |i: usize| {
            if self.counts[i] == 0 {
                String::new()
            } else {
                format!("{:.9e}", self.sums[i] / self.counts[i] as f64)
            }
        };
        let mut cols: Vec<usize> = vec![0, 1, 2, 3, 4, Self::TOTAL, Self::DISC];
        if sorting {
            cols.extend([5, Self::SORT_ACC]);
        }
        let cells: Vec<String> = cols.into_iter().map(cell).collect();
        format!("{epoch},{step},{}", cells.join(","))
    }
}

/// Sample order for `total_steps` batches drawn epoch by epoch from a fresh
/// shuffle of `n` items.
pub(crate) fn batch_schedule(rng: &mut ChaCha8Rng, n: usize, batch: usize, total_steps: usize) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::with_capacity(total_steps);
    let mut epoch = 0;
    while out.len() < total_steps {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            if out.len() == total_steps {
                break;
            }
            out.push((epoch, chunk.to_vec()));
        }
        epoch += 1;
    }
    out
}

/// One discriminator update on `real` prior poses against `fake` predictions.
pub(crate) fn disc_step(disc: &mut ParamStore, opt: &mut Sgd, real: &[[[f64; 3]; 23]], fake: &[Vec<f64>]) -> Result<f64> {
    disc.zero_grads();
    let mut total = 0.0;
    for (r, f) in real.iter().zip(fake) {
        let mut g = Graph::new();
        let p = Loader::trainable(disc);
        let rv = g.constant(Tensor::new(vec![23, 3], r.iter().flatten().copied().collect())?);
        let fv = g.constant(Tensor::new(vec![23, 3], f.clone())?);
        let rr = pose_rotations(&mut g, rv);
        let fr = pose_rotations(&mut g, fv);
        let rs = disc_scores(&mut g, p, rr)?;
        let fs = disc_scores(&mut g, p, fr)?;
        let l_d = disc_losses_vars(&mut g, &[rs], &[fs]).0.expect("both sides present");
        total += g.backward(l_d)?;
        g.accumulate_param_grads(disc)?;
    }
    let n = real.len() as f64;
    disc.scale_grads(1.0 / n);
    opt.step(disc)?;
    Ok(total / n)
}

/// Trains the single-frame network on the training split of `ds`, writing
/// one CSV row per epoch to `log`.
pub fn train_dsd(ds: &Dataset, template: &BodyTemplate, cfg: &TrainConfig, log: &mut dyn Write) -> Result<Checkpoint> {
    cfg.validate()?;
    let samples = frame_samples(ds, Split::Train);
    if samples.is_empty() {
        return Err(Error::MissingData("training split is empty".into()));
    }
    let mut params = init_dsd_params(&cfg.dsd, cfg.seed)?;
    let mut disc = cfg.disc_enabled.then(|| init_disc_params(cfg.seed ^ 0xd15c)).transpose()?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, &params);
    let mut disc_opt = disc.as_ref().map(|d| Sgd::new(cfg.lr, cfg.momentum, d));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = batch_schedule(&mut rng, samples.len(), cfg.batch_size, cfg.total_steps(samples.len()));
    let io = |e| Error::Io {
        path: "training log".into(),
        source: e,
    };
    writeln!(log, "{}", LossLog::header(false)).map_err(io)?;
    let mut epoch_log = LossLog::default();
    for (step, (epoch, batch)) in schedule.iter().enumerate() {
        params.zero_grads();
        let mut fakes = Vec::with_capacity(batch.len());
        for &i in batch {
            let mut g = Graph::new();
            let fl = dsd_frame_loss(&mut g, Loader::trainable(&params), template, &samples[i], &cfg.weights, disc.as_ref())?;
            g.backward(fl.total)?;
            g.accumulate_param_grads(&mut params)?;
            epoch_log.add_terms(&g, &fl.terms, fl.total);
            fakes.push(g.data(fl.outputs.theta.pose).to_vec());
        }
        params.scale_grads(1.0 / batch.len() as f64);
        opt.step(&mut params)?;
        if let (Some(d), Some(o)) = (disc.as_mut(), disc_opt.as_mut()) {
            let real: Vec<_> = batch.iter().map(|_| sample_pose(rng.gen())).collect();
            epoch_log.add_disc(disc_step(d, o, &real, &fakes)?);
        }
        let last = step + 1 == schedule.len();
        if last || schedule[step + 1].0 != *epoch {
            writeln!(log, "{}", epoch_log.row(*epoch, step + 1, false)).map_err(io)?;
            epoch_log = LossLog::default();
        }
    }
    params.iter_mut().for_each(|(_, t)| t.clear_grad());
    if let Some(d) = disc.as_mut() {
        d.iter_mut().for_each(|(_, t)| t.clear_grad());
    }
    Ok(Checkpoint {
        stage: Stage::Dsd,
        params,
        disc,
        config: cfg.clone(),
        step: schedule.len(),
        rng: RngState::capture(&rng),
    })
}

/// Inference result for one frame.
#[derive(Debug, Clone)]
pub struct DsdPrediction {
    pub params: ThetaParams,
    pub j3d: Vec<f64>,
    /// DIR skeleton in heatmap coordinates `[14, 2]`.
    pub skeleton: Vec<f64>,
    /// Fused feature `[d_y]`.
    pub feature: Vec<f64>,
}

pub fn dsd_predict(params: &ParamStore, template: &BodyTemplate, silhouette: &[f64]) -> Result<DsdPrediction> {
    let mut g = Graph::new();
    let consts = TemplateConsts::new(&mut g, template);
    let image = image_input(&mut g, silhouette)?;
    let out = dsd_forward(&mut g, Loader::frozen(params), image)?;
    let (j3d, _) = predicted_joints(&mut g, &consts, &out.theta);
    Ok(DsdPrediction {
        params: out.theta.to_params(&g),
        j3d: g.data(j3d).to_vec(),
        skeleton: g.data(out.skeleton).to_vec(),
        feature: g.data(out.y).to_vec(),
    })
}
