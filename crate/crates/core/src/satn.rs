//! Temporal network over per-frame features: sinusoidal positional codes,
//! multi-head self-attention blocks, a dilated temporal convolution stack and
//! the center-frame body-parameter head.

use diffcore::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{ThetaVars, THETA_DIM};
use crate::error::{Error, Result};
use crate::nn::{self, Loader};

/// Temporal kernel width of every convolution in the stack.
pub const TCN_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatnConfig {
    pub seq_len: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub attn_blocks: usize,
    pub tcn_dilations: Vec<usize>,
    pub ffn_mult: usize,
    /// Convolution blocks in the sorting head.
    pub sort_conv_blocks: usize,
    /// Standardize input features with training-split statistics.
    #[serde(default)]
    pub standardize: bool,
}

impl Default for SatnConfig {
    fn default() -> Self {
        Self {
            seq_len: 9,
            model_dim: 64,
            heads: 8,
            attn_blocks: 2,
            tcn_dilations: vec![1, 3],
            ffn_mult: 4,
            sort_conv_blocks: 3,
            standardize: false,
        }
    }
}

impl SatnConfig {
    pub fn full_scale() -> Self {
        Self {
            model_dim: 512,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Frames seen by the center output of the convolution stack.
    pub fn receptive_field(&self) -> usize {
        1 + self.tcn_dilations.iter().map(|d| (TCN_KERNEL - 1) * d).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.seq_len % 2 == 0 {
            return Err(Error::Config(format!("seq_len must be odd, got {}", self.seq_len)));
        }
        if self.receptive_field() != self.seq_len {
            return Err(Error::Config(format!(
                "temporal receptive field {} does not match seq_len {}",
                self.receptive_field(),
                self.seq_len
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_satn_params(cfg: &SatnConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let (d, dh) = (cfg.model_dim, cfg.head_dim());
    for b in 0..cfg.attn_blocks {
        for h in 0..cfg.heads {
            nn::add_linear(&mut s, &mut rng, &format!("satn.attn{b}.head{h}"), d, dh)?;
        }
        nn::add_linear(&mut s, &mut rng, &format!("satn.attn{b}.out"), d, d)?;
        nn::add_linear(&mut s, &mut rng, &format!("satn.attn{b}.ffn0"), d, cfg.ffn_mult * d)?;
        nn::add_linear(&mut s, &mut rng, &format!("satn.attn{b}.ffn1"), cfg.ffn_mult * d, d)?;
    }
    for (i, _) in cfg.tcn_dilations.iter().enumerate() {
        nn::add_temporal(&mut s, &mut rng, &format!("satn.tcn{i}"), d, d, TCN_KERNEL)?;
    }
    nn::add_linear(&mut s, &mut rng, "satn.head", d, THETA_DIM)?;
    for i in 0..cfg.sort_conv_blocks {
        nn::add_temporal(&mut s, &mut rng, &format!("sort.conv{i}"), d, d, TCN_KERNEL)?;
    }
    nn::add_linear(&mut s, &mut rng, "sort.fc0", d, d)?;
    nn::add_linear(&mut s, &mut rng, "sort.fc1", d, d)?;
    nn::add_linear(&mut s, &mut rng, "sort.fc2", d, cfg.seq_len)?;
    Ok(s)
}

/// Sinusoidal codes `[n, d]`: `sin(p / 10000^(2i/d))` at even columns and the
/// matching cosine at odd columns.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for c in 0..d {
            let i = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / d as f64);
            data[p * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("encoding shape")
}

/// Adds positional codes to `x: [n, d]`.
pub fn add_positional(g: &mut Graph, x: Var) -> Var {
    let (n, d) = match g.shape(x) {
        [n, d] => (*n, *d),
        s => panic!("add_positional: expected [n, d], got {s:?}"),
    };
    let pe = g.constant(positional_encoding(n, d));
    g.add(x, pe)
}

/// `softmax(x xᵀ / sqrt(d)) x` for `x: [n, d]`. Returns the output and the
/// attention probabilities `[n, n]`.
pub fn sdpa(g: &mut Graph, x: Var) -> (Var, Var) {
    let d = g.shape(x)[1];
    let xt = g.transpose(x);
    let scores = g.matmul(x, xt);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let probs = g.softmax_rows(scores);
    (g.matmul(probs, x), probs)
}

/// Multi-head attention sublayer before the residual: per-head projection,
/// [`sdpa`] per head, concatenation and output projection. Also returns each
/// head's attention probabilities.
pub fn mha(g: &mut Graph, p: Loader, cfg: &SatnConfig, block: usize, x: Var) -> Result<(Var, Vec<Var>)> {
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut probs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (w, b) = p.layer(g, &format!("satn.attn{block}.head{h}"))?;
        let proj = nn::linear_rows(g, w, b, x);
        let (out, pr) = sdpa(g, proj);
        heads.push(out);
        probs.push(pr);
    }
    let cat = g.concat_cols(&heads);
    let (w, b) = p.layer(g, &format!("satn.attn{block}.out"))?;
    Ok((nn::linear_rows(g, w, b, cat), probs))
}

/// One attention block: `h = x + MHA(LN(x))` then `h + FFN(LN(h))`.
pub fn attention_block(g: &mut Graph, p: Loader, cfg: &SatnConfig, block: usize, x: Var) -> Result<Var> {
    let n = g.layer_norm_rows(x);
    let (a, _) = mha(g, p, cfg, block, n)?;
    let h = g.add(x, a);
    let n = g.layer_norm_rows(h);
    let (w, b) = p.layer(g, &format!("satn.attn{block}.ffn0"))?;
    let f = nn::linear_rows(g, w, b, n);
    let f = g.relu(f);
    let (w, b) = p.layer(g, &format!("satn.attn{block}.ffn1"))?;
    let f = nn::linear_rows(g, w, b, f);
    Ok(g.add(h, f))
}

/// Positional codes, every attention block and a final layer norm.
pub fn attend(g: &mut Graph, p: Loader, cfg: &SatnConfig, features: Var) -> Result<Var> {
    let mut x = add_positional(g, features);
    for b in 0..cfg.attn_blocks {
        x = attention_block(g, p, cfg, b, x)?;
    }
    Ok(g.layer_norm_rows(x))
}

/// Residual dilated convolution blocks over `x: [n, d]`, returning the
/// center row `[d]`. Works for any odd `n`.
pub fn tcn_center(g: &mut Graph, p: Loader, cfg: &SatnConfig, x: Var) -> Result<Var> {
    let mut x = x;
    for (i, dil) in cfg.tcn_dilations.iter().enumerate() {
        let (w, b) = p.layer(g, &format!("satn.tcn{i}"))?;
        let y = g.temporal_conv(x, w, b, *dil);
        let y = g.relu(y);
        x = g.add(x, y);
    }
    let n = g.shape(x)[0];
    let d = g.shape(x)[1];
    let center = g.gather_rows(x, &[n / 2]);
    Ok(g.reshape(center, &[d]))
}

/// [`tcn_center`] restricted to windows of exactly `seq_len` frames.
pub fn tcn(g: &mut Graph, p: Loader, cfg: &SatnConfig, x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    if n != cfg.seq_len {
        return Err(Error::Config(format!("window of {n} frames, expected {}", cfg.seq_len)));
    }
    tcn_center(g, p, cfg, x)
}

pub fn satn_head(g: &mut Graph, p: Loader, center: Var) -> Result<(Var, ThetaVars)> {
    let (w, b) = p.layer(g, "satn.head")?;
    let raw = nn::linear(g, w, b, center);
    let theta = ThetaVars::from_raw(g, raw);
    Ok((raw, theta))
}

#[derive(Debug, Clone, Copy)]
pub struct SatnOutputs {
    pub attended: Var,
    pub center: Var,
    pub raw_theta: Var,
    pub theta: ThetaVars,
}

/// Center-frame prediction from `features: [seq_len, d]`.
pub fn satn_forward(g: &mut Graph, p: Loader, cfg: &SatnConfig, features: Var) -> Result<SatnOutputs> {
    let attended = attend(g, p, cfg, features)?;
    let center = tcn(g, p, cfg, attended)?;
    let (raw_theta, theta) = satn_head(g, p, center)?;
    Ok(SatnOutputs {
        attended,
        center,
        raw_theta,
        theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn positional_codes() {
        let pe = positional_encoding(64, 64);
        let d = pe.data();
        for c in 0..64 {
            assert_eq!(d[c], if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(d.iter().all(|v| (-1.0..=1.0).contains(v)));
        for a in 0..64 {
            for b in a + 1..64 {
                assert_ne!(&d[a * 64..(a + 1) * 64], &d[b * 64..(b + 1) * 64]);
            }
        }
    }

    #[test]
    fn sdpa_single_row_is_identity() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.input(random(&mut rng, &[1, 5]));
        let (y, p) = sdpa(&mut g, x);
        assert_eq!(g.data(p), &[1.0]);
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn sdpa_identical_rows_are_fixed() {
        let mut g = Graph::new();
        let row = [0.3, -1.2, 2.5, 0.7];
        let x = g.input(Tensor::new(vec![4, 4], row.repeat(4)).unwrap());
        let (y, _) = sdpa(&mut g, x);
        for r in g.data(y).chunks(4) {
            for (a, b) in r.iter().zip(&row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sdpa_two_by_two_by_hand() {
        let x = [0.4, -0.9, 1.3, 0.2];
        let mut g = Graph::new();
        let xv = g.input(Tensor::new(vec![2, 2], x.to_vec()).unwrap());
        let (y, _) = sdpa(&mut g, xv);
        let s = 2f64.sqrt();
        for i in 0..2 {
            let s0 = (x[2 * i] * x[0] + x[2 * i + 1] * x[1]) / s;
            let s1 = (x[2 * i] * x[2] + x[2 * i + 1] * x[3]) / s;
            let (e0, e1) = (s0.exp(), s1.exp());
            let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            for c in 0..2 {
                let want = p0 * x[c] + p1 * x[2 + c];
                assert!((g.data(y)[2 * i + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = SatnConfig::default();
        let s = init_satn_params(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.input(random(&mut rng, &[9, 64]));
        let (_, probs) = mha(&mut g, Loader::trainable(&s), &cfg, 0, x).unwrap();
        assert_eq!(probs.len(), 8);
        for p in probs {
            for row in g.data(p).chunks(9) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn mha_is_permutation_equivariant() {
        let cfg = SatnConfig::default();
        let s = init_satn_params(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[9, 64]);
        let perm = [4, 0, 8, 2, 6, 1, 3, 7, 5];
        let mut g = Graph::new();
        let xv = g.input(x);
        let coded = add_positional(&mut g, xv);
        let (a, _) = mha(&mut g, Loader::trainable(&s), &cfg, 0, coded).unwrap();
        let shuffled = g.gather_rows(coded, &perm);
        let (b, _) = mha(&mut g, Loader::trainable(&s), &cfg, 0, shuffled).unwrap();
        let a_perm = g.gather_rows(a, &perm);
        for (u, v) in g.data(a_perm).iter().zip(g.data(b)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn tcn_sees_whole_window_only() {
        let mut cfg = SatnConfig::default();
        let s = init_satn_params(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random(&mut rng, &[11, 64]);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let c = tcn_center(&mut g, Loader::trainable(&s), &cfg, xv).unwrap();
            g.data(c).to_vec()
        };
        let reference = run(&base);
        for frame in 0..11 {
            let mut x = base.clone();
            for v in &mut x.data_mut()[frame * 64..(frame + 1) * 64] {
                *v += 0.5;
            }
            let changed = run(&x) != reference;
            assert_eq!(changed, (1..=9).contains(&frame), "frame {frame}");
        }
        cfg.seq_len = 11;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tcn_rejects_wrong_window() {
        let cfg = SatnConfig::default();
        let s = init_satn_params(&cfg, 4).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([7, 64]));
        assert!(tcn(&mut g, Loader::trainable(&s), &cfg, x).is_err());
    }

    #[test]
    fn constant_input_gives_column_independent_output() {
        let cfg = SatnConfig::default();
        let s = init_satn_params(&cfg, 6).unwrap();
        let p = Loader::trainable(&s);
        let row: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![9, 64], row.repeat(9)).unwrap());
        let c = tcn(&mut g, p, &cfg, x).unwrap();
        let center = g.data(c).to_vec();
        // Every column of a longer constant clip whose receptive field avoids
        // the zero padding produces the same vector.
        let mut y = g.input(Tensor::new(vec![17, 64], row.repeat(17)).unwrap());
        for (i, dil) in cfg.tcn_dilations.iter().enumerate() {
            let (w, b) = p.layer(&mut g, &format!("satn.tcn{i}")).unwrap();
            let t = g.temporal_conv(y, w, b, *dil);
            let t = g.relu(t);
            y = g.add(y, t);
        }
        for col in 4..13 {
            for (a, b) in g.data(y)[col * 64..(col + 1) * 64].iter().zip(&center) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_emits_85_values() {
        let cfg = SatnConfig::default();
        let s = init_satn_params(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, &[9, 64]);
        let run = || {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let o = satn_forward(&mut g, Loader::trainable(&s), &cfg, xv).unwrap();
            g.data(o.raw_theta).to_vec()
        };
        let a = run();
        assert_eq!(a.len(), THETA_DIM);
        assert_eq!(a, run());
    }
}
