//! Frame-order self-supervision: shuffle a window of frame features, predict
//! each shuffled frame's original position, and score against soft targets
//! that accept either temporal direction.

use diffcore::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Loader};
use crate::satn::{attend, satn_head, tcn, SatnConfig, SatnOutputs};

/// Default width of the soft position targets.
pub const DEFAULT_SIGMA: f64 = 1.0;

/// `order[i]` is the original index of the frame placed at slot `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut inverse = vec![usize::MAX; n];
        for (i, &o) in order.iter().enumerate() {
            if o >= n || inverse[o] != usize::MAX {
                return Err(Error::InvalidPermutation(format!("{order:?} is not a bijection on 0..{n}")));
            }
            inverse[o] = i;
        }
        Ok(Self { order, inverse })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    /// Seeded Fisher–Yates shuffle of `0..n`.
    pub fn random(n: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::new(order).expect("shuffle yields a bijection")
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, o)| i == *o)
    }
}

/// Reorders the rows of `features: [n, d]` by a fresh seeded permutation.
pub fn shuffle(features: &Tensor, seed: u64) -> Result<(Tensor, Permutation)> {
    let n = rows(features)?;
    if n < 2 {
        return Err(Error::InvalidPermutation(format!("cannot shuffle {n} frame(s)")));
    }
    let perm = Permutation::random(n, seed);
    Ok((permute_rows(features, perm.order())?, perm))
}

/// Restores the original row order of shuffled features.
pub fn unshuffle(features: &Tensor, perm: &Permutation) -> Result<Tensor> {
    if rows(features)? != perm.len() {
        return Err(Error::InvalidPermutation(format!(
            "permutation of {} frames applied to {:?}",
            perm.len(),
            features.shape()
        )));
    }
    permute_rows(features, perm.inverse())
}

fn rows(t: &Tensor) -> Result<usize> {
    match t.shape() {
        [n, _] => Ok(*n),
        s => Err(Error::Shape {
            what: "frame features".into(),
            expected: vec![0, 0],
            actual: s.to_vec(),
        }),
    }
}

fn permute_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = t.shape()[1];
    let data = idx.iter().flat_map(|&i| t.data()[i * d..(i + 1) * d].iter().copied()).collect();
    Ok(Tensor::new(t.shape().to_vec(), data)?)
}

/// Soft position targets for both temporal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct SortTargets {
    /// `[n, n]`, row `i` peaks at the original index of slot `i`.
    pub forward: Vec<f64>,
    /// `[n, n]`, row `i` peaks at `n - 1 -` that index.
    pub backward: Vec<f64>,
    pub sigma: f64,
    pub n: usize,
}

fn gaussian_row(center: usize, n: usize, sigma: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n)
        .map(|j| (-((j as f64 - center as f64).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= z);
    row
}

pub fn gaussian_targets(perm: &Permutation, sigma: f64) -> Result<SortTargets> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParams(format!("sigma must be positive, got {sigma}")));
    }
    let n = perm.len();
    let forward = perm.order().iter().flat_map(|&o| gaussian_row(o, n, sigma)).collect();
    let backward = perm.order().iter().flat_map(|&o| gaussian_row(n - 1 - o, n, sigma)).collect();
    Ok(SortTargets {
        forward,
        backward,
        sigma,
        n,
    })
}

/// Position distributions `[n, n]` from attention outputs of a shuffled window.
pub fn sort_scores(g: &mut Graph, p: Loader, cfg: &SatnConfig, attended: Var) -> Result<Var> {
    let mut x = attended;
    for i in 0..cfg.sort_conv_blocks {
        let (w, b) = p.layer(g, &format!("sort.conv{i}"))?;
        let y = g.temporal_conv(x, w, b, 1);
        let y = g.relu(y);
        x = g.add(x, y);
    }
    for name in ["sort.fc0", "sort.fc1"] {
        let (w, b) = p.layer(g, name)?;
        let y = nn::linear_rows(g, w, b, x);
        x = g.relu(y);
    }
    let (w, b) = p.layer(g, "sort.fc2")?;
    let logits = nn::linear_rows(g, w, b, x);
    Ok(g.softmax_rows(logits))
}

/// `min(|S - F|², |S - B|²) / n`.
pub fn sort_loss_vars(g: &mut Graph, scores: Var, targets: &SortTargets) -> Var {
    let shape = [targets.n, targets.n];
    let f = g.constant(Tensor::new(shape.to_vec(), targets.forward.clone()).expect("target shape"));
    let b = g.constant(Tensor::new(shape.to_vec(), targets.backward.clone()).expect("target shape"));
    let df = g.sub(scores, f);
    let df = g.mul(df, df);
    let lf = g.sum(df);
    let db = g.sub(scores, b);
    let db = g.mul(db, db);
    let lb = g.sum(db);
    let m = g.min2(lf, lb);
    g.scale(m, 1.0 / targets.n as f64)
}

pub fn sort_loss(scores: &[f64], targets: &SortTargets) -> Result<f64> {
    let n = targets.n;
    if scores.len() != n * n {
        return Err(Error::Shape {
            what: "sort scores".into(),
            expected: vec![n, n],
            actual: vec![scores.len()],
        });
    }
    let dist = |t: &[f64]| scores.iter().zip(t).map(|(s, t)| (s - t).powi(2)).sum::<f64>();
    Ok(dist(&targets.forward).min(dist(&targets.backward)) / n as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of slots whose highest-scoring position equals the true original
/// index, under whichever direction scores better overall.
pub fn sort_accuracy(scores: &[f64], perm: &Permutation) -> Result<f64> {
    let n = perm.len();
    if scores.len() != n * n {
        return Err(Error::Shape {
            what: "sort scores".into(),
            expected: vec![n, n],
            actual: vec![scores.len()],
        });
    }
    let (mut fwd, mut bwd) = (0usize, 0usize);
    let (mut fwd_mass, mut bwd_mass) = (0.0, 0.0);
    for (i, row) in scores.chunks(n).enumerate() {
        let o = perm.order()[i];
        let a = argmax(row);
        fwd += usize::from(a == o);
        bwd += usize::from(a == n - 1 - o);
        fwd_mass += row[o];
        bwd_mass += row[n - 1 - o];
    }
    let hits = if fwd_mass >= bwd_mass { fwd } else { bwd };
    Ok(hits as f64 / n as f64)
}

/// Outputs of the multi-task temporal pass.
#[derive(Debug, Clone, Copy)]
pub struct SortingOutputs {
    pub satn: SatnOutputs,
    /// Attention output in shuffled slot order.
    pub shuffled_attended: Var,
    /// The rows handed to the temporal convolution stack, in original order.
    pub tcn_input: Var,
    pub scores: Var,
}

/// Shuffled pass: the window is permuted before attention (positional codes
/// keep slot order), the sorting head reads the shuffled attention output,
/// and the convolution stack reads it after the permutation is undone.
pub fn sorting_forward(
    g: &mut Graph,
    p: Loader,
    cfg: &SatnConfig,
    features: Var,
    perm: &Permutation,
) -> Result<SortingOutputs> {
    if g.shape(features)[0] != perm.len() {
        return Err(Error::InvalidPermutation(format!(
            "permutation of {} frames for a window of {}",
            perm.len(),
            g.shape(features)[0]
        )));
    }
    let shuffled = g.gather_rows(features, perm.order());
    let attended = attend(g, p, cfg, shuffled)?;
    let scores = sort_scores(g, p, cfg, attended)?;
    let tcn_input = g.gather_rows(attended, perm.inverse());
    let center = tcn(g, p, cfg, tcn_input)?;
    let (raw_theta, theta) = satn_head(g, p, center)?;
    Ok(SortingOutputs {
        satn: SatnOutputs {
            attended: tcn_input,
            center,
            raw_theta,
            theta,
        },
        shuffled_attended: attended,
        tcn_input,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::satn::init_satn_params;
    use rand::Rng;

    #[test]
    fn seed_zero_golden_permutation() {
        let p = Permutation::random(9, 0);
        assert_eq!(p.order(), GOLDEN_SEED0);
        assert_eq!(Permutation::random(9, 0), p);
    }

    const GOLDEN_SEED0: &[usize] = &[3, 8, 5, 2, 7, 1, 0, 4, 6];

    #[test]
    fn shuffle_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![9, 4], (0..36).map(|_| rng.gen::<f64>()).collect()).unwrap();
        for seed in 0..20 {
            let (s, p) = shuffle(&x, seed).unwrap();
            assert_eq!(unshuffle(&s, &p).unwrap(), x);
        }
        let id = Permutation::identity(9);
        assert_eq!(unshuffle(&x, &id).unwrap(), x);
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(unshuffle(&x, &Permutation::identity(3)).is_err());
    }

    #[test]
    fn identity_shuffle_leaves_features_unchanged() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let seed = (0..).find(|s| Permutation::random(2, *s).is_identity()).unwrap();
        assert_eq!(shuffle(&x, seed).unwrap().0, x);
    }

    #[test]
    fn targets_are_distributions_with_gaussian_ratio() {
        let t = gaussian_targets(&Permutation::identity(9), 1.0).unwrap();
        for row in t.forward.chunks(9).chain(t.backward.chunks(9)) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let row = &t.forward[4 * 9..5 * 9];
        assert!((row[3] / row[4] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((row[5] / row[4] - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn narrow_targets_become_one_hot() {
        let p = Permutation::random(9, 3);
        let t = gaussian_targets(&p, 0.05).unwrap();
        for (i, row) in t.forward.chunks(9).enumerate() {
            for (j, v) in row.iter().enumerate() {
                if j == p.order()[i] {
                    assert!((v - 1.0).abs() < 1e-10);
                } else {
                    assert!(*v < 1e-10);
                }
            }
        }
        assert!(gaussian_targets(&p, 0.0).is_err());
    }

    #[test]
    fn backward_of_identity_is_full_reversal() {
        let id = gaussian_targets(&Permutation::identity(9), 1.0).unwrap();
        let rev = Permutation::new((0..9).rev().collect()).unwrap();
        let rt = gaussian_targets(&rev, 1.0).unwrap();
        assert_eq!(id.backward, rt.forward);
    }

    #[test]
    fn loss_examples() {
        let p = Permutation::random(9, 4);
        let t = gaussian_targets(&p, 1.0).unwrap();
        assert_eq!(sort_loss(&t.forward, &t.target_swap()).unwrap(), 0.0);
        assert_eq!(sort_loss(&t.forward, &t).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<f64> = (0..81).map(|_| rng.gen()).collect();
        let rev_order: Vec<usize> = p.order().iter().map(|o| 8 - o).collect();
        let tr = gaussian_targets(&Permutation::new(rev_order).unwrap(), 1.0).unwrap();
        assert_eq!(sort_loss(&s, &t).unwrap(), sort_loss(&s, &tr).unwrap());
    }

    #[test]
    fn two_by_two_loss_by_hand() {
        let t = SortTargets {
            forward: vec![1.0, 0.0, 0.0, 1.0],
            backward: vec![0.0, 1.0, 1.0, 0.0],
            sigma: 1.0,
            n: 2,
        };
        let s = [0.7, 0.3, 0.4, 0.6];
        let f = 0.09 + 0.09 + 0.16 + 0.16;
        let b = 0.49 + 0.49 + 0.36 + 0.36;
        assert!((sort_loss(&s, &t).unwrap() - f64::min(f, b) / 2.0).abs() < 1e-15);
        let mut g = Graph::new();
        let sv = g.input(Tensor::new(vec![2, 2], s.to_vec()).unwrap());
        let l = sort_loss_vars(&mut g, sv, &t);
        assert!((g.value(l).item() - f64::min(f, b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn accuracy_examples() {
        let p = Permutation::random(9, 6);
        let t = gaussian_targets(&p, 1.0).unwrap();
        assert_eq!(sort_accuracy(&t.forward, &p).unwrap(), 1.0);
        assert_eq!(sort_accuracy(&t.backward, &p).unwrap(), 1.0);
        let uniform = vec![1.0 / 9.0; 81];
        assert!((sort_accuracy(&uniform, &p).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        // Slot origins 2, 0, 1 with argmaxes 2, 1, 1: forward hits slots 0
        // and 2 and carries more mass (1.3 against 0.8) than backward.
        let p3 = Permutation::new(vec![2, 0, 1]).unwrap();
        let s = [0.1, 0.2, 0.7, 0.2, 0.5, 0.3, 0.3, 0.4, 0.3];
        assert!((sort_accuracy(&s, &p3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn scores_rows_sum_to_one() {
        let cfg = SatnConfig::default();
        let s = init_satn_params(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![9, 64], (0..576).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        let sc = sort_scores(&mut g, Loader::trainable(&s), &cfg, x).unwrap();
        assert_eq!(g.shape(sc), &[9, 9]);
        for row in g.data(sc).chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_moves_the_sort_loss_but_not_the_head_ordering() {
        let cfg = SatnConfig::default();
        let s = init_satn_params(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::new(vec![9, 64], (0..576).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut losses = Vec::new();
        for seed in [3, 4] {
            let perm = Permutation::random(9, seed);
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let out = sorting_forward(&mut g, Loader::trainable(&s), &cfg, xv, &perm).unwrap();
            let targets = gaussian_targets(&perm, DEFAULT_SIGMA).unwrap();
            losses.push(sort_loss(g.data(out.scores), &targets).unwrap());
            assert_eq!(out.satn.attended, out.tcn_input);
            let (tcn_rows, slot_rows) = (g.data(out.tcn_input), g.data(out.shuffled_attended));
            for frame in 0..9 {
                let slot = perm.inverse()[frame];
                assert_eq!(perm.order()[slot], frame);
                assert_eq!(tcn_rows[frame * 64..(frame + 1) * 64], slot_rows[slot * 64..(slot + 1) * 64]);
            }
        }
        assert_ne!(Permutation::random(9, 3), Permutation::random(9, 4));
        assert_ne!(losses[0], losses[1]);
    }

    impl SortTargets {
        fn target_swap(&self) -> SortTargets {
            SortTargets {
                forward: self.backward.clone(),
                backward: self.forward.clone(),
                ..self.clone()
            }
        }
    }
}
