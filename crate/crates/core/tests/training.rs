use diffcore::{Graph, Sgd, Tensor};
use skelmesh::body::{build_template, BodyTemplate};
use skelmesh::dsd::init_dsd_params;
use skelmesh::losses::{disc_losses_vars, disc_scores, init_disc_params, pose_rotations};
use skelmesh::metrics::{sequence_report, JointSeq};
use skelmesh::nn::Loader;
use skelmesh::synth::{generate_dataset, sample_pose, Dataset, GenConfig, Split};
use skelmesh::train::{
    dsd_frame_loss, evaluate, frame_samples, precompute_features, train_dsd, train_satn, Checkpoint, FeatureStore,
    TrainConfig,
};
use skelmesh::Error;

fn setup(sequences: usize, frames: usize) -> (BodyTemplate, Dataset) {
    let t = build_template(0, 432).unwrap();
    let ds = generate_dataset(
        &t,
        0,
        &GenConfig {
            sequences,
            frames,
            ..GenConfig::default()
        },
    )
    .unwrap();
    (t, ds)
}

fn small_config(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 3,
        max_steps: Some(steps),
        ..TrainConfig::default()
    }
}

fn totals(log: &[u8]) -> Vec<String> {
    let text = String::from_utf8(log.to_vec()).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "total").unwrap();
    text.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().to_string()).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (t, mut ds) = setup(2, 9);
    ds.sequences.retain(|s| Split::of_seed(s.seed) == Split::Train);
    let cfg = TrainConfig {
        lr: 0.0,
        batch_size: 9,
        max_steps: Some(3),
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    let ck = train_dsd(&ds, &t, &cfg, &mut log).unwrap();
    let init = init_dsd_params(&cfg.dsd, cfg.seed).unwrap();
    for (name, p) in init.iter() {
        assert_eq!(ck.params.get(name).unwrap().data(), p.data(), "{name}");
    }
    let totals = totals(&log);
    assert_eq!(totals.len(), 3);
    assert!(totals.iter().all(|v| *v == totals[0]), "{totals:?}");
}

#[test]
fn training_is_deterministic() {
    let (t, ds) = setup(4, 9);
    let cfg = small_config(4);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let ca = train_dsd(&ds, &t, &cfg, &mut a).unwrap();
    let cb = train_dsd(&ds, &t, &cfg, &mut b).unwrap();
    assert_eq!(a, b);
    for (name, p) in ca.params.iter() {
        assert_eq!(cb.params.get(name).unwrap().data(), p.data(), "{name}");
    }
    let other = train_dsd(&ds, &t, &TrainConfig { seed: 1, ..cfg }, &mut Vec::new()).unwrap();
    assert_ne!(other.params.get("dsd.head.w").unwrap().data(), ca.params.get("dsd.head.w").unwrap().data());
}

#[test]
fn masked_3d_labels_drop_their_terms() {
    let (t, ds) = setup(2, 9);
    let params = init_dsd_params(&TrainConfig::default().dsd, 0).unwrap();
    let mut samples = frame_samples(&ds, Split::Train);
    samples.truncate(4);
    for s in samples.iter_mut().step_by(2) {
        s.has_3d = false;
    }
    let cfg = TrainConfig::default();
    for s in &samples {
        let mut g = Graph::new();
        let fl = dsd_frame_loss(&mut g, Loader::trainable(&params), &t, s, &cfg.weights, None).unwrap();
        assert_eq!(fl.terms.pm.is_some(), s.has_3d);
        assert_eq!(fl.terms.j3d.is_some(), s.has_3d);
        assert!(fl.terms.j2d.is_some() && fl.terms.j2dj.is_some());
        let l = g.backward(fl.total).unwrap();
        let mut want = cfg.weights.j2d * g.value(fl.terms.j2d.unwrap()).item()
            + cfg.weights.j2dj * g.value(fl.terms.j2dj.unwrap()).item();
        if s.has_3d {
            want += cfg.weights.pm * g.value(fl.terms.pm.unwrap()).item()
                + cfg.weights.j3d * g.value(fl.terms.j3d.unwrap()).item();
        }
        assert!((l - want).abs() < 1e-12 * want.max(1.0));
    }
}

#[test]
fn discriminator_step_lowers_its_loss() {
    let mut improved = 0;
    for seed in 0..20u64 {
        let disc = init_disc_params(seed).unwrap();
        let real: Vec<Tensor> = (0..4)
            .map(|k| Tensor::new(vec![23, 3], sample_pose(seed * 10 + k).iter().flatten().copied().collect()).unwrap())
            .collect();
        let fake: Vec<Tensor> = (0..4)
            .map(|k| Tensor::new(vec![23, 3], sample_pose(1000 + seed * 10 + k).iter().flatten().map(|v| -v).collect()).unwrap())
            .collect();
        let loss = |disc: &diffcore::ParamStore, grads: bool| -> (f64, Option<diffcore::ParamStore>) {
            let mut store = disc.clone();
            store.zero_grads();
            let mut total = 0.0;
            for (r, f) in real.iter().zip(&fake) {
                let mut g = Graph::new();
                let p = Loader::trainable(disc);
                let (rv, fv) = (g.constant(r.clone()), g.constant(f.clone()));
                let (rr, fr) = (pose_rotations(&mut g, rv), pose_rotations(&mut g, fv));
                let rs = disc_scores(&mut g, p, rr).unwrap();
                let fs = disc_scores(&mut g, p, fr).unwrap();
                let l = disc_losses_vars(&mut g, &[rs], &[fs]).0.unwrap();
                total += g.backward(l).unwrap() / real.len() as f64;
                if grads {
                    g.accumulate_param_grads(&mut store).unwrap();
                }
            }
            (total, grads.then_some(store))
        };
        let (before, grads) = loss(&disc, true);
        let mut disc = grads.unwrap();
        disc.scale_grads(1.0 / real.len() as f64);
        Sgd::new(1e-3, 0.0, &disc).step(&mut disc).unwrap();
        let (after, _) = loss(&disc, false);
        improved += usize::from(after < before);
    }
    assert!(improved >= 18, "{improved}/20");
}

#[test]
fn checkpoints_round_trip_and_reproduce_metrics() {
    let (t, ds) = setup(4, 9);
    let ck = train_dsd(&ds, &t, &small_config(2), &mut Vec::new()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.config, ck.config);
    assert_eq!(back.step, ck.step);
    assert_eq!(back.rng, ck.rng);
    assert_eq!(back.rng.restore().unwrap(), ck.rng.restore().unwrap());
    for (name, p) in ck.params.iter() {
        assert_eq!(back.params.get(name).unwrap().data(), p.data());
    }
    let fa = precompute_features(&ds, &t, &ck).unwrap();
    let fb = precompute_features(&ds, &t, &back).unwrap();
    assert_eq!(fa, fb);
    let ra = evaluate(&ds, &fa, &t, None, Split::Heldout).unwrap();
    let rb = evaluate(&ds, &fb, &t, None, Split::Heldout).unwrap();
    assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
}

#[test]
fn features_round_trip_with_fused_width() {
    let (t, ds) = setup(2, 9);
    let ck = train_dsd(&ds, &t, &small_config(1), &mut Vec::new()).unwrap();
    let f = precompute_features(&ds, &t, &ck).unwrap();
    assert_eq!(f.dim, ck.config.dsd.fused_dim);
    for (s, fs) in ds.sequences.iter().zip(&f.sequences) {
        assert_eq!(fs.y.len(), s.frame_count() * f.dim);
    }
    let dir = tempfile::tempdir().unwrap();
    f.write(dir.path()).unwrap();
    assert_eq!(FeatureStore::read(dir.path()).unwrap(), f);
    assert_eq!(precompute_features(&ds, &t, &ck).unwrap(), f);
}

#[test]
fn satn_logs_follow_the_sorting_switch() {
    let (t, ds) = setup(2, 10);
    let ck = train_dsd(&ds, &t, &small_config(1), &mut Vec::new()).unwrap();
    let f = precompute_features(&ds, &t, &ck).unwrap();
    let mut with = Vec::new();
    let cfg = small_config(2);
    let a = train_satn(&ds, &f, &t, &cfg, &mut with).unwrap();
    let header = String::from_utf8(with.clone()).unwrap();
    assert!(header.lines().next().unwrap().contains("l_s"));
    assert!(header.lines().next().unwrap().contains("sort_acc"));
    let mut again = Vec::new();
    let b = train_satn(&ds, &f, &t, &cfg, &mut again).unwrap();
    assert_eq!(with, again);
    for (name, p) in a.params.iter() {
        assert_eq!(b.params.get(name).unwrap().data(), p.data());
    }
    let mut without = Vec::new();
    let off = TrainConfig {
        sorting_enabled: false,
        ..cfg
    };
    train_satn(&ds, &f, &t, &off, &mut without).unwrap();
    let text = String::from_utf8(without).unwrap();
    assert!(!text.lines().next().unwrap().contains("l_s"));
}

#[test]
fn satn_needs_full_windows() {
    let (t, mut ds) = setup(2, 10);
    let ck = train_dsd(&ds, &t, &small_config(1), &mut Vec::new()).unwrap();
    for s in ds.sequences.iter_mut() {
        s.gt_params.truncate(8);
        s.gt_j3d.truncate(8 * 42);
        s.gt_j2d.truncate(8 * 28);
        s.observations.truncate(8);
    }
    let f = precompute_features(&ds, &t, &ck).unwrap();
    let err = train_satn(&ds, &f, &t, &small_config(1), &mut Vec::new()).unwrap_err();
    assert!(matches!(err, Error::TooFewFrames { minimum: 9, .. }), "{err}");
}

#[test]
fn ground_truth_predictions_score_zero() {
    let (_, ds) = setup(2, 9);
    let pairs: Vec<_> = ds
        .sequences
        .iter()
        .map(|s| {
            let mm: Vec<f64> = s.gt_j3d.iter().map(|v| v * 1000.0).collect();
            let seq = JointSeq::new(mm, 14, s.fps).unwrap();
            (seq.clone(), seq)
        })
        .collect();
    let r = sequence_report(&pairs, "heldout").unwrap();
    assert_eq!((r.mpjpe, r.mpjve, r.mpjae), (0.0, 0.0, 0.0));
    assert!(r.pa_mpjpe < 1e-9);
    assert_eq!(r.n_frames, 18);
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["mpjae", "mpjpe", "mpjve", "n_frames", "pa_mpjpe", "split"]);
}

#[test]
fn evaluation_needs_the_requested_split() {
    let (t, mut ds) = setup(2, 9);
    let ck = train_dsd(&ds, &t, &small_config(1), &mut Vec::new()).unwrap();
    ds.sequences.retain(|s| Split::of_seed(s.seed) == Split::Train);
    let f = precompute_features(&ds, &t, &ck).unwrap();
    assert!(matches!(
        evaluate(&ds, &f, &t, None, Split::Heldout),
        Err(Error::MissingData(_))
    ));
}
