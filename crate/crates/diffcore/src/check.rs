//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen coordinates per input; `None`
    /// checks all of them.
    pub coords_per_input: Option<usize>,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero analytically are compared on an absolute scale.
    pub floor: f64,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            coords_per_input: None,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-smooth point (ReLU, |x|,
    /// min) and were therefore not comparable.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub op: String,
    pub tol: f64,
    pub inputs: Vec<InputReport>,
}

impl CheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|i| i.max_rel_error).fold(0.0, f64::max)
    }

    /// All inputs below tolerance, each with at least one comparable coordinate.
    pub fn passed(&self) -> bool {
        self.inputs
            .iter()
            .all(|i| i.checked > 0 && i.max_rel_error < self.tol)
    }

    /// Merges reports of repeated trials, keeping per-input maxima.
    pub fn merge(&mut self, other: &CheckReport) {
        for inp in &other.inputs {
            match self.inputs.iter_mut().find(|i| i.name == inp.name) {
                Some(cur) => {
                    cur.max_rel_error = cur.max_rel_error.max(inp.max_rel_error);
                    cur.checked += inp.checked;
                    cur.skipped += inp.skipped;
                }
                None => self.inputs.push(inp.clone()),
            }
        }
    }
}

struct Evaluation {
    loss: f64,
    signature: Vec<bool>,
}

fn evaluate<F>(inputs: &[(String, Tensor)], build: &F, projection: Option<&Tensor>) -> (Graph, Vec<Var>, Var, Evaluation)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = match projection {
        Some(c) => {
            let flat = g.reshape(out, &[g.value(out).numel()]);
            let c = g.constant(c.clone());
            let prod = g.mul(flat, c);
            g.sum(prod)
        }
        None => out,
    };
    let ev = Evaluation {
        loss: g.value(loss).item(),
        signature: g.kink_signature(),
    };
    (g, vars, loss, ev)
}

/// Compares analytic gradients of `build` against central differences.
///
/// Non-scalar outputs are reduced with a fixed random projection so every
/// output element contributes. Relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn check_gradients<F>(op: &str, inputs: &[(String, Tensor)], build: F, cfg: &CheckConfig) -> CheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let projection = {
        let mut probe = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|(_, t)| probe.input(t.clone())).collect();
        let out = build(&mut probe, &vars);
        let n = probe.value(out).numel();
        (n != 1).then(|| Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()))
    };
    let (mut g, vars, loss, base) = evaluate(inputs, &build, projection.as_ref());
    g.backward(loss).expect("gradient check: backward failed");

    let mut reports = Vec::with_capacity(inputs.len());
    for (k, (name, tensor)) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tensor.numel()]);
        let coords: Vec<usize> = match cfg.coords_per_input {
            Some(n) if n < tensor.numel() => {
                let mut c = sample(&mut rng, tensor.numel(), n).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..tensor.numel()).collect(),
        };
        let mut report = InputReport {
            name: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for i in coords {
            let mut shifted = inputs.to_vec();
            shifted[k].1.data_mut()[i] = tensor.data()[i] + cfg.eps;
            let (_, _, _, plus) = evaluate(&shifted, &build, projection.as_ref());
            shifted[k].1.data_mut()[i] = tensor.data()[i] - cfg.eps;
            let (_, _, _, minus) = evaluate(&shifted, &build, projection.as_ref());
            if plus.signature != base.signature || minus.signature != base.signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * cfg.eps);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            report.max_rel_error = report.max_rel_error.max((a - numeric).abs() / denom);
            report.checked += 1;
        }
        reports.push(report);
    }
    let _ = base.loss;
    CheckReport {
        op: op.to_string(),
        tol: cfg.tol,
        inputs: reports,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // relu(x) * x has gradient 2x for x > 0; build an expression whose
        // analytic gradient is deliberately cut by treating one factor as constant.
        let inputs = vec![("x".to_string(), Tensor::vector(vec![0.7, 1.3]))];
        let good = check_gradients(
            "square",
            &inputs,
            |g, v| g.mul(v[0], v[0]),
            &CheckConfig::default(),
        );
        assert!(good.passed(), "{good:?}");
        let bad = check_gradients(
            "detached",
            &inputs,
            |g, v| {
                let c = g.constant(g.value(v[0]).clone());
                g.mul(v[0], c)
            },
            &CheckConfig::default(),
        );
        assert!(!bad.passed());
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let inputs = vec![("x".to_string(), Tensor::vector(vec![1e-7, 1.0]))];
        let r = check_gradients("relu", &inputs, |g, v| g.relu(v[0]), &CheckConfig::default());
        assert_eq!(r.inputs[0].skipped, 1);
        assert_eq!(r.inputs[0].checked, 1);
        assert!(r.passed());
    }
}
