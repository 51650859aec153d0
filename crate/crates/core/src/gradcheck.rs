//! Named finite-difference gradient checks for every differentiable stage of
//! the pipeline. Network stages are checked with respect to both their
//! activations and every parameter tensor they read.

use std::collections::BTreeMap;

use diffcore::{check_gradients, CheckConfig, CheckReport, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body::{
    build_template, project_vars, regress_joints_vars, skin_vars, BodyTemplate, TemplateConsts, ThetaParams, ThetaVars,
    BETA_DIM, NUM_LSP, NUM_POSE_JOINTS, THETA_DIM,
};
use crate::dsd::{dir_vars, dsd_forward, encode, fuse, init_dsd_params, regress_theta, skeleton_branch, DsdConfig};
use crate::error::{Error, Result};
use crate::losses::{
    disc_losses_vars, disc_scores, init_disc_params, loss_2d_vars, loss_2dj_vars, loss_3d_vars, loss_pm_vars,
    total_loss_vars, LossTerms, LossWeights,
};
use crate::nn::Loader;
use crate::satn::{add_positional, attention_block, init_satn_params, mha, sdpa, tcn, SatnConfig};
use crate::sorting::{gaussian_targets, sort_loss_vars, sort_scores, Permutation};
use crate::synth::{HEATMAP_SIZE, IMAGE_SIZE};
use crate::train::predicted_joints;

pub const OPS: &[&str] = &[
    "rodrigues",
    "skin",
    "regress_joints",
    "project",
    "encoder",
    "deconv_branch",
    "dir",
    "bilinear",
    "regress_theta",
    "positional_encoding",
    "sdpa",
    "mha",
    "tcn",
    "sort_head",
    "loss_pm",
    "loss_3d",
    "loss_2d",
    "loss_2dj",
    "sort_loss",
    "discriminator",
    "disc_losses",
    "total_loss",
    "dsd_forward",
];

/// Coordinates sampled per input tensor in each trial.
pub const COORDS_PER_INPUT: usize = 4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn named(name: &str, t: Tensor) -> (String, Tensor) {
    (name.to_string(), t)
}

/// Parameters of `store` whose names start with any of `prefixes`, as
/// checkable inputs. Zero biases are replaced by small random values so the
/// check does not sit on a symmetric point.
fn param_inputs(store: &ParamStore, prefixes: &[&str], rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
    store
        .iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| {
            let mut t = t.clone();
            t.clear_grad();
            if n.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
            (n.to_string(), t)
        })
        .collect()
}

fn bind(names: &[(String, Tensor)], vars: &[Var], skip: usize) -> BTreeMap<String, Var> {
    names[skip..]
        .iter()
        .zip(&vars[skip..])
        .map(|((n, _), v)| (n.clone(), *v))
        .collect()
}

fn flatten_all(g: &mut Graph, parts: &[Var]) -> Var {
    let flat: Vec<Var> = parts
        .iter()
        .map(|v| {
            let n = g.value(*v).numel();
            g.reshape(*v, &[n])
        })
        .collect();
    g.concat(&flat)
}

fn random_params(rng: &mut ChaCha8Rng) -> ThetaParams {
    let mut p = ThetaParams::default();
    p.theta.iter_mut().flatten().for_each(|v| *v = rng.gen_range(-0.8..0.8));
    p.beta.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
    p.global_r = [rng.gen_range(-0.5..0.5), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5)];
    p.trans = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
    p.scale = rng.gen_range(0.7..1.0);
    p
}

/// Shared fixtures for the suite.
pub struct Fixtures {
    pub template: BodyTemplate,
    pub dsd: DsdConfig,
    pub satn: SatnConfig,
}

impl Fixtures {
    pub fn new() -> Result<Self> {
        Ok(Self {
            template: build_template(0, 432)?,
            dsd: DsdConfig::default(),
            satn: SatnConfig::default(),
        })
    }
}

/// Runs one trial of the check named `op`.
pub fn check_op(op: &str, fx: &Fixtures, trial: u64) -> Result<CheckReport> {
    let seed = trial.wrapping_mul(0x9e37_79b9).wrapping_add(op.len() as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = CheckConfig {
        coords_per_input: Some(COORDS_PER_INPUT),
        seed,
        ..CheckConfig::default()
    };
    let t = &fx.template;
    let report = match op {
        "rodrigues" => {
            let inputs = vec![named("axis_angle", uniform(&mut rng, &[4, 3], -2.0, 2.0))];
            check_gradients(op, &inputs, |g, v| g.rodrigues(v[0]), &cfg)
        }
        "skin" => {
            let p = random_params(&mut rng);
            let inputs = vec![
                named("pose", Tensor::new(vec![NUM_POSE_JOINTS, 3], p.theta.iter().flatten().copied().collect())?),
                named("beta", Tensor::new(vec![BETA_DIM, 1], p.beta.to_vec())?),
            ];
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let c = TemplateConsts::new(g, t);
                    let th = ThetaVars::from_params(g, &p);
                    let th = ThetaVars {
                        pose: v[0],
                        beta: v[1],
                        ..th
                    };
                    let m = skin_vars(g, &c, &th);
                    flatten_all(g, &[m.vertices, m.joints])
                },
                &cfg,
            )
        }
        "regress_joints" => {
            let inputs = vec![named("vertices", uniform(&mut rng, &[t.vertex_count(), 3], -1.0, 1.0))];
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let c = TemplateConsts::new(g, t);
                    regress_joints_vars(g, &c, v[0])
                },
                &cfg,
            )
        }
        "project" => {
            let inputs = vec![
                named("points", uniform(&mut rng, &[NUM_LSP, 3], -1.0, 1.0)),
                named("global_r", uniform(&mut rng, &[3], -1.0, 1.0)),
                named("scale", uniform(&mut rng, &[1], 0.5, 1.0)),
                named("trans", uniform(&mut rng, &[2], -0.2, 0.2)),
            ];
            check_gradients(op, &inputs, |g, v| project_vars(g, v[0], v[1], v[2], v[3]), &cfg)
        }
        "encoder" => {
            let store = init_dsd_params(&fx.dsd, seed)?;
            let mut inputs = vec![named("image", uniform(&mut rng, &[1, IMAGE_SIZE, IMAGE_SIZE], 0.0, 1.0))];
            inputs.extend(param_inputs(&store, &["dsd.enc"], &mut rng));
            let names = inputs.clone();
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let b = bind(&names, v, 1);
                    let (features, pooled) = encode(g, Loader::bound(&store, &b), v[0]).expect("encoder");
                    flatten_all(g, &[features, pooled])
                },
                &cfg,
            )
        }
        "deconv_branch" => {
            let store = init_dsd_params(&fx.dsd, seed)?;
            let c = fx.dsd.encoder_channels[3];
            let mut inputs = vec![named("features", uniform(&mut rng, &[c, 8, 8], 0.0, 1.0))];
            inputs.extend(param_inputs(&store, &["dsd.deconv", "dsd.heat"], &mut rng));
            let names = inputs.clone();
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let b = bind(&names, v, 1);
                    skeleton_branch(g, Loader::bound(&store, &b), v[0]).expect("skeleton branch")
                },
                &cfg,
            )
        }
        "dir" => {
            let dims = [HEATMAP_SIZE, HEATMAP_SIZE];
            let inputs = vec![named("heatmaps", uniform(&mut rng, &[NUM_LSP, dims[0] * dims[1]], 0.0, 1.0))];
            check_gradients(op, &inputs, |g, v| dir_vars(g, v[0], &dims), &cfg)
        }
        "bilinear" => {
            let store = init_dsd_params(&fx.dsd, seed)?;
            let mut inputs = vec![
                named("x_s", uniform(&mut rng, &[fx.dsd.skeleton_dim], -1.0, 1.0)),
                named("x_d", uniform(&mut rng, &[fx.dsd.detail_dim], 0.0, 1.0)),
            ];
            inputs.extend(param_inputs(&store, &["dsd.bilinear"], &mut rng));
            let names = inputs.clone();
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let b = bind(&names, v, 2);
                    fuse(g, Loader::bound(&store, &b), v[0], v[1]).expect("fuse")
                },
                &cfg,
            )
        }
        "regress_theta" => {
            let store = init_dsd_params(&fx.dsd, seed)?;
            let mut inputs = vec![named("y", uniform(&mut rng, &[fx.dsd.fused_dim], -1.0, 1.0))];
            inputs.extend(param_inputs(&store, &["dsd.head"], &mut rng));
            let names = inputs.clone();
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let b = bind(&names, v, 1);
                    let raw = regress_theta(g, Loader::bound(&store, &b), v[0]).expect("head");
                    let th = ThetaVars::from_raw(g, raw);
                    flatten_all(g, &[th.pose, th.beta, th.global_r, th.trans, th.scale])
                },
                &cfg,
            )
        }
        "dsd_forward" => {
            let store = init_dsd_params(&fx.dsd, seed)?;
            let mut inputs = vec![named("image", uniform(&mut rng, &[1, IMAGE_SIZE, IMAGE_SIZE], 0.0, 1.0))];
            inputs.extend(param_inputs(&store, &["dsd."], &mut rng));
            let names = inputs.clone();
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let b = bind(&names, v, 1);
                    let out = dsd_forward(g, Loader::bound(&store, &b), v[0]).expect("dsd");
                    let c = TemplateConsts::new(g, t);
                    let (j3d, j2d) = predicted_joints(g, &c, &out.theta);
                    flatten_all(g, &[j3d, j2d])
                },
                &cfg,
            )
        }
        "positional_encoding" => {
            let store = init_satn_params(&fx.satn, seed)?;
            let d = fx.satn.model_dim;
            let mut inputs = vec![named("x", uniform(&mut rng, &[fx.satn.seq_len, d], -1.0, 1.0))];
            inputs.extend(param_inputs(&store, &["satn.attn0."], &mut rng));
            let names = inputs.clone();
            let scfg = &fx.satn;
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let b = bind(&names, v, 1);
                    let x = add_positional(g, v[0]);
                    attention_block(g, Loader::bound(&store, &b), scfg, 0, x).expect("attention block")
                },
                &cfg,
            )
        }
        "sdpa" => {
            let inputs = vec![named("x", uniform(&mut rng, &[fx.satn.seq_len, fx.satn.head_dim()], -1.0, 1.0))];
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let (out, probs) = sdpa(g, v[0]);
                    flatten_all(g, &[out, probs])
                },
                &cfg,
            )
        }
        "mha" => {
            let store = init_satn_params(&fx.satn, seed)?;
            let mut inputs = vec![named("x", uniform(&mut rng, &[fx.satn.seq_len, fx.satn.model_dim], -1.0, 1.0))];
            inputs.extend(
                param_inputs(&store, &["satn.attn0.head", "satn.attn0.out"], &mut rng),
            );
            let names = inputs.clone();
            let scfg = &fx.satn;
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let b = bind(&names, v, 1);
                    mha(g, Loader::bound(&store, &b), scfg, 0, v[0]).expect("mha").0
                },
                &cfg,
            )
        }
        "tcn" => {
            let store = init_satn_params(&fx.satn, seed)?;
            let mut inputs = vec![named("x", uniform(&mut rng, &[fx.satn.seq_len, fx.satn.model_dim], -1.0, 1.0))];
            inputs.extend(param_inputs(&store, &["satn.tcn"], &mut rng));
            let names = inputs.clone();
            let scfg = &fx.satn;
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let b = bind(&names, v, 1);
                    tcn(g, Loader::bound(&store, &b), scfg, v[0]).expect("tcn")
                },
                &cfg,
            )
        }
        "sort_head" => {
            let store = init_satn_params(&fx.satn, seed)?;
            let mut inputs = vec![named("x", uniform(&mut rng, &[fx.satn.seq_len, fx.satn.model_dim], -1.0, 1.0))];
            inputs.extend(param_inputs(&store, &["sort."], &mut rng));
            let names = inputs.clone();
            let scfg = &fx.satn;
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let b = bind(&names, v, 1);
                    sort_scores(g, Loader::bound(&store, &b), scfg, v[0]).expect("sort head")
                },
                &cfg,
            )
        }
        "loss_pm" => {
            let gt = random_params(&mut rng);
            let inputs = vec![named("raw_theta", uniform(&mut rng, &[THETA_DIM], -1.0, 1.0))];
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let th = ThetaVars::from_raw(g, v[0]);
                    loss_pm_vars(g, &th, &gt)
                },
                &cfg,
            )
        }
        "loss_3d" => {
            let gt = uniform(&mut rng, &[NUM_LSP, 3], -1.0, 1.0);
            let inputs = vec![named("j3d", uniform(&mut rng, &[NUM_LSP, 3], -1.0, 1.0))];
            check_gradients(op, &inputs, |g, v| loss_3d_vars(g, v[0], gt.data()).expect("shape"), &cfg)
        }
        "loss_2d" | "loss_2dj" => {
            let gt = uniform(&mut rng, &[NUM_LSP, 2], -1.0, 1.0);
            let inputs = vec![named("j2d", uniform(&mut rng, &[NUM_LSP, 2], -1.0, 1.0))];
            let two_d = op == "loss_2d";
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    if two_d {
                        loss_2d_vars(g, v[0], gt.data()).expect("shape")
                    } else {
                        loss_2dj_vars(g, v[0], gt.data()).expect("shape")
                    }
                },
                &cfg,
            )
        }
        "sort_loss" => {
            let n = fx.satn.seq_len;
            let perm = Permutation::random(n, seed);
            let targets = gaussian_targets(&perm, 1.0)?;
            let inputs = vec![named("scores", uniform(&mut rng, &[n, n], 0.0, 1.0))];
            check_gradients(op, &inputs, |g, v| sort_loss_vars(g, v[0], &targets), &cfg)
        }
        "discriminator" => {
            let store = init_disc_params(seed)?;
            let mut inputs = vec![named("rotations", uniform(&mut rng, &[NUM_POSE_JOINTS, 9], -1.0, 1.0))];
            inputs.extend(param_inputs(&store, &["disc.joint00.", "disc.joint13.", "disc.pose."], &mut rng));
            let names = inputs.clone();
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let b = bind(&names, v, 1);
                    disc_scores(g, Loader::bound(&store, &b), v[0]).expect("discriminator")
                },
                &cfg,
            )
        }
        "disc_losses" => {
            let inputs = vec![
                named("real", uniform(&mut rng, &[NUM_POSE_JOINTS + 1], -1.0, 2.0)),
                named("fake", uniform(&mut rng, &[NUM_POSE_JOINTS + 1], -1.0, 2.0)),
            ];
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let (l_d, l_r) = disc_losses_vars(g, &[v[0]], &[v[1]]);
                    let l_d = l_d.expect("present");
                    let l_r = l_r.expect("present");
                    g.concat(&[l_d, l_r])
                },
                &cfg,
            )
        }
        "total_loss" => {
            let inputs: Vec<_> = ["pm", "j3d", "j2d", "r", "j2dj", "s"]
                .iter()
                .map(|n| named(n, uniform(&mut rng, &[1], 0.0, 2.0)))
                .collect();
            let w = LossWeights::default();
            check_gradients(
                op,
                &inputs,
                |g, v| {
                    let terms = LossTerms {
                        pm: Some(v[0]),
                        j3d: Some(v[1]),
                        j2d: Some(v[2]),
                        r: Some(v[3]),
                        j2dj: Some(v[4]),
                        s: Some(v[5]),
                    };
                    total_loss_vars(g, &terms, &w).expect("terms present")
                },
                &cfg,
            )
        }
        _ => return Err(Error::UnknownOp(op.to_string())),
    };
    Ok(report)
}

/// `trials` merged trials of `op`.
pub fn check_op_trials(op: &str, fx: &Fixtures, trials: u64) -> Result<CheckReport> {
    let mut report = check_op(op, fx, 0)?;
    for trial in 1..trials {
        report.merge(&check_op(op, fx, trial)?);
    }
    Ok(report)
}

/// Every registered op, `trials` trials each.
pub fn run_suite(trials: u64) -> Result<Vec<CheckReport>> {
    let fx = Fixtures::new()?;
    OPS.iter().map(|op| check_op_trials(op, &fx, trials)).collect()
}
