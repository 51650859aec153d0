use std::sync::Arc;

use crate::kernels::{self, Conv2dGeom, TemporalGeom};
use crate::rotation;
use crate::{DiffError, ParamStore, Result, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse per-point blend weights for [`Graph::linear_blend`]: for each point
/// the `(transform index, weight)` pairs with nonzero weight.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeights {
    pub transforms: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl BlendWeights {
    /// Builds the sparse form of a dense `[points, transforms]` weight matrix.
    pub fn from_dense(points: usize, transforms: usize, dense: &[f64]) -> Self {
        assert_eq!(dense.len(), points * transforms);
        let entries = (0..points)
            .map(|i| {
                (0..transforms)
                    .filter_map(|j| {
                        let w = dense[i * transforms + j];
                        (w != 0.0).then_some((j, w))
                    })
                    .collect()
            })
            .collect();
        Self {
            transforms,
            entries,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Slice(Var, usize),
    Concat(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Cols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowMeans(Var),
    Abs(Var),
    Relu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    Min2(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
    },
    TemporalConv {
        x: Var,
        w: Var,
        b: Var,
        geom: TemporalGeom,
    },
    Rodrigues(Var),
    Bilinear {
        xs: Var,
        a: Var,
        xd: Var,
    },
    LinearBlend {
        transforms: Var,
        points: Var,
        weights: Arc<BlendWeights>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::ScaleBy(..) => "scale_by",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Slice(..) => "slice",
            Op::Concat(..) => "concat",
            Op::GatherRows(..) => "gather_rows",
            Op::Cols(..) => "cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowMeans(..) => "row_means",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::Min2(..) => "min2",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::TemporalConv { .. } => "temporal_conv",
            Op::Rodrigues(..) => "rodrigues",
            Op::Bilinear { .. } => "bilinear",
            Op::LinearBlend { .. } => "linear_blend",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Variance floor used by [`Graph::layer_norm_rows`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Operation record for reverse-mode differentiation.
///
/// Shape mismatches between operands are contract violations and panic with
/// the offending shapes; fallible checks belong to callers that accept
/// external input.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n, m] => (*n, *m),
        [n] => (*n, 1),
        _ => panic!("expected a matrix, got shape {shape:?}"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Leaf, false)
    }

    /// Copies a named parameter from `store` into the graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        let v = self.input(t.clone());
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Like [`Graph::param`] but the copy is treated as a constant.
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        Ok(self.constant(t.clone()))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    fn map_binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        self.same_shape(a, b, op.name());
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.derived(value, op, &[a, b])
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(a).iter().map(|x| f(*x)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.derived(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.map_binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.map_binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.map_binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_unary(a, Op::Scale(a, c), |x| x * c)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.map_unary(a, Op::Offset(a), |x| x + c)
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "scale_by: scalar operand expected");
        let c = self.data(s)[0];
        let data = self.data(a).iter().map(|x| x * c).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.derived(value, Op::ScaleBy(a, s), &[a, s])
    }

    fn row_broadcast(&mut self, x: Var, r: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (_, m) = rows_cols(self.shape(x));
        assert_eq!(self.value(r).numel(), m, "{}: row length mismatch", op.name());
        let row = self.data(r).to_vec();
        let data = self
            .data(x)
            .chunks(m)
            .flat_map(|chunk| chunk.iter().zip(&row).map(|(a, b)| f(*a, *b)).collect::<Vec<_>>())
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.derived(value, op, &[x, r])
    }

    /// `x[i, j] + r[j]` for a matrix `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        self.row_broadcast(x, r, Op::AddRow(x, r), |a, b| a + b)
    }

    /// `x[i, j] * r[j]` for a matrix `x`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        self.row_broadcast(x, r, Op::MulRow(x, r), |a, b| a * b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = rows_cols(self.shape(a));
        let (k2, n) = rows_cols(self.shape(b));
        assert_eq!(k, k2, "matmul: inner dimensions {:?} x {:?}", self.shape(a), self.shape(b));
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let value = Tensor::from_parts(vec![m, n], out);
        self.derived(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = rows_cols(self.shape(a));
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::from_parts(vec![n, m], out);
        self.derived(value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(a).numel(), "reshape {:?} -> {shape:?}", self.shape(a));
        let value = Tensor::from_parts(shape.to_vec(), self.data(a).to_vec());
        self.derived(value, Op::Reshape(a), &[a])
    }

    /// Contiguous flat range `start..start + len` as a 1-D tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.value(a).numel(), "slice out of range");
        let value = Tensor::from_parts(vec![len], self.data(a)[start..start + len].to_vec());
        self.derived(value, Op::Slice(a, start), &[a])
    }

    /// Flat concatenation into a 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let data: Vec<f64> = parts.iter().flat_map(|v| self.data(*v).to_vec()).collect();
        let value = Tensor::from_parts(vec![data.len()], data);
        self.derived(value, Op::Concat(parts.to_vec()), parts)
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (n, m) = rows_cols(self.shape(a));
        let src = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            assert!(i < n, "gather_rows: row {i} out of {n}");
            out.extend_from_slice(&src[i * m..(i + 1) * m]);
        }
        let value = Tensor::from_parts(vec![idx.len(), m], out);
        self.derived(value, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Columns `start..start + len` of a matrix.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (n, m) = rows_cols(self.shape(a));
        assert!(start + len <= m, "cols out of range");
        let src = self.data(a);
        let out = (0..n)
            .flat_map(|i| src[i * m + start..i * m + start + len].to_vec())
            .collect();
        let value = Tensor::from_parts(vec![n, len], out);
        self.derived(value, Op::Cols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = rows_cols(self.shape(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|v| {
                let (r, c) = rows_cols(self.shape(*v));
                assert_eq!(r, n, "concat_cols: row count mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (v, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(*v)[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::from_parts(vec![n, total], out);
        self.derived(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.data(a).iter().sum();
        self.derived(Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    /// Mean of each row of a matrix, as a 1-D tensor.
    pub fn row_means(&mut self, a: Var) -> Var {
        let (n, m) = rows_cols(self.shape(a));
        let out = self
            .data(a)
            .chunks(m)
            .map(|c| c.iter().sum::<f64>() / m as f64)
            .collect();
        self.derived(Tensor::from_parts(vec![n], out), Op::RowMeans(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Abs(a), f64::abs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Softplus(a), softplus)
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let (_, m) = rows_cols(&shape);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(m) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.derived(Tensor::from_parts(shape, out), Op::SoftmaxRows(a), &[a])
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let (_, m) = rows_cols(&shape);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(m) {
            let (mu, inv) = row_stats(row);
            for v in row.iter_mut() {
                *v = (*v - mu) * inv;
            }
        }
        self.derived(Tensor::from_parts(shape, out), Op::LayerNormRows(a), &[a])
    }

    /// Minimum of two one-element tensors. Ties select `a`.
    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a).item(), self.value(b).item());
        self.derived(Tensor::scalar(x.min(y)), Op::Min2(a, b), &[a, b])
    }

    /// 2-D convolution of `x: [C, H, W]` with `w: [O, C, k, k]` and bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => panic!("conv2d: input must be [C, H, W], got {s:?}"),
        };
        let (o, k) = match self.shape(w) {
            [o, ci, k, k2] if *ci == c && k == k2 => (*o, *k),
            s => panic!("conv2d: weight shape {s:?} incompatible with {c} input channels"),
        };
        assert_eq!(self.value(b).numel(), o, "conv2d: bias length");
        let geom = Conv2dGeom {
            in_channels: c,
            out_channels: o,
            in_h: h,
            in_w: wd,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (wd + 2 * pad - k) / stride + 1,
            kernel: k,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(w), self.data(b));
        let value = Tensor::from_parts(vec![o, geom.out_h, geom.out_w], out);
        self.derived(value, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    /// Transposed 2-D convolution with `w: [C, O, k, k]`; output side is
    /// `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => panic!("conv_transpose2d: input must be [C, H, W], got {s:?}"),
        };
        let (o, k) = match self.shape(w) {
            [ci, o, k, k2] if *ci == c && k == k2 => (*o, *k),
            s => panic!("conv_transpose2d: weight shape {s:?} incompatible with {c} input channels"),
        };
        assert_eq!(self.value(b).numel(), o, "conv_transpose2d: bias length");
        let geom = Conv2dGeom {
            in_channels: c,
            out_channels: o,
            in_h: h,
            in_w: wd,
            out_h: (h - 1) * stride + k - 2 * pad,
            out_w: (wd - 1) * stride + k - 2 * pad,
            kernel: k,
            stride,
            pad,
        };
        let out = kernels::conv_transpose2d_forward(&geom, self.data(x), self.data(w), self.data(b));
        let value = Tensor::from_parts(vec![o, geom.out_h, geom.out_w], out);
        self.derived(value, Op::ConvTranspose2d { x, w, b, geom }, &[x, w, b])
    }

    /// Length-preserving dilated convolution over time: `x: [T, C]`,
    /// `w: [O, C, k]` with odd `k`, zero padding at both ends.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Var {
        let (t, c) = rows_cols(self.shape(x));
        let (o, k) = match self.shape(w) {
            [o, ci, k] if *ci == c && k % 2 == 1 => (*o, *k),
            s => panic!("temporal_conv: weight shape {s:?} incompatible with {c} channels"),
        };
        assert_eq!(self.value(b).numel(), o, "temporal_conv: bias length");
        let geom = TemporalGeom {
            len: t,
            in_channels: c,
            out_channels: o,
            kernel: k,
            dilation,
        };
        let out = kernels::temporal_conv_forward(&geom, self.data(x), self.data(w), self.data(b));
        let value = Tensor::from_parts(vec![t, o], out);
        self.derived(value, Op::TemporalConv { x, w, b, geom }, &[x, w, b])
    }

    /// Batched Rodrigues map `[n, 3] -> [n, 3, 3]`.
    pub fn rodrigues(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() / 3;
        assert_eq!(n * 3, self.value(a).numel(), "rodrigues: input length must be a multiple of 3");
        let out = self
            .data(a)
            .chunks(3)
            .flat_map(|w| rotation::axis_angle_to_matrix(&[w[0], w[1], w[2]]))
            .collect();
        self.derived(Tensor::from_parts(vec![n, 3, 3], out), Op::Rodrigues(a), &[a])
    }

    /// `y[k] = sum_i sum_j xs[i] * a[k, i, j] * xd[j]`.
    pub fn bilinear(&mut self, xs: Var, a: Var, xd: Var) -> Var {
        let (ds, dd) = (self.value(xs).numel(), self.value(xd).numel());
        let dy = match self.shape(a) {
            [dy, i, j] if *i == ds && *j == dd => *dy,
            s => panic!("bilinear: weight {s:?} incompatible with ({ds}, {dd})"),
        };
        let (xsv, av, xdv) = (self.data(xs), self.data(a), self.data(xd));
        let mut out = vec![0.0; dy];
        for (k, o) in out.iter_mut().enumerate() {
            let block = &av[k * ds * dd..(k + 1) * ds * dd];
            let mut acc = 0.0;
            for (i, &si) in xsv.iter().enumerate() {
                let row = &block[i * dd..(i + 1) * dd];
                let inner: f64 = row.iter().zip(xdv).map(|(w, d)| w * d).sum();
                acc += si * inner;
            }
            *o = acc;
        }
        let value = Tensor::from_parts(vec![dy], out);
        self.derived(value, Op::Bilinear { xs, a, xd }, &[xs, a, xd])
    }

    /// Blends affine transforms `[J, 3, 4]` over points `[V, 3]`:
    /// `out_i = sum_j w_ij (R_j p_i + t_j)`.
    pub fn linear_blend(&mut self, transforms: Var, points: Var, weights: Arc<BlendWeights>) -> Var {
        let nt = self.value(transforms).numel() / 12;
        assert_eq!(nt * 12, self.value(transforms).numel(), "linear_blend: transforms must be [J, 3, 4]");
        assert_eq!(nt, weights.transforms, "linear_blend: transform count mismatch");
        let nv = self.value(points).numel() / 3;
        assert_eq!(nv, weights.entries.len(), "linear_blend: point count mismatch");
        let (tv, pv) = (self.data(transforms), self.data(points));
        let mut out = vec![0.0; nv * 3];
        for (i, ws) in weights.entries.iter().enumerate() {
            let p = &pv[i * 3..i * 3 + 3];
            for &(j, w) in ws {
                let m = &tv[j * 12..j * 12 + 12];
                for r in 0..3 {
                    out[i * 3 + r] += w * (m[r * 4] * p[0] + m[r * 4 + 1] * p[1] + m[r * 4 + 2] * p[2] + m[r * 4 + 3]);
                }
            }
        }
        let value = Tensor::from_parts(vec![nv, 3], out);
        self.derived(
            value,
            Op::LinearBlend {
                transforms,
                points,
                weights,
            },
            &[transforms, points],
        )
    }

    /// First node holding a non-finite value, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Fingerprint of every non-smooth branch decision (ReLU masks, |x| signs,
    /// min selections). Two evaluations with equal signatures lie on the same
    /// smooth piece of the function.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::Abs(a) => sig.extend(self.data(*a).iter().map(|x| *x > 0.0)),
                Op::Min2(a, b) => sig.push(self.value(*a).item() <= self.value(*b).item()),
                _ => {}
            }
        }
        sig
    }

    /// Reverse pass from a one-element `loss`. Returns the loss value.
    pub fn backward(&mut self, loss: Var) -> Result<f64> {
        if self.value(loss).numel() != 1 {
            return Err(DiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if let Some((node, op)) = self.first_non_finite() {
            return Err(DiffError::NonFinite { op, node });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(self.value(loss).item())
    }

    /// Gradient of the last [`Graph::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter leaf into the store's grad slots.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (name, v) in &self.params {
            if let Some(g) = self.grad(*v) {
                store
                    .get_mut(name)
                    .ok_or_else(|| DiffError::UnknownParam(name.clone()))?
                    .accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(&delta) {
                        *a += d;
                    }
                }
                None => grads[v.0] = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
            Op::Offset(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::ScaleBy(a, s) => {
                let c = self.data(*s)[0];
                let ds: f64 = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).sum();
                send(*a, g.iter().map(|x| x * c).collect());
                send(*s, vec![ds]);
            }
            Op::AddRow(x, r) => {
                let m = self.value(*r).numel();
                let mut gr = vec![0.0; m];
                for chunk in g.chunks(m) {
                    for (a, b) in gr.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                send(*x, g.to_vec());
                send(*r, gr);
            }
            Op::MulRow(x, r) => {
                let m = self.value(*r).numel();
                let (xv, rv) = (self.data(*x), self.data(*r));
                let mut gr = vec![0.0; m];
                let mut gx = vec![0.0; g.len()];
                for (i, (gv, xv)) in g.iter().zip(xv).enumerate() {
                    gr[i % m] += gv * xv;
                    gx[i] = gv * rv[i % m];
                }
                send(*x, gx);
                send(*r, gr);
            }
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(self.shape(*a));
                let n = rows_cols(self.shape(*b)).1;
                let (av, bv) = (self.data(*a), self.data(*b));
                if self.nodes[a.0].requires_grad {
                    // g [m, n] * b^T [n, k]
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    // a^T [k, m] * g [m, n]
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av_ip = av[i * k + p];
                            if av_ip == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[p * n..(p + 1) * n];
                            for (d, gv) in dst.iter_mut().zip(grow) {
                                *d += av_ip * gv;
                            }
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = rows_cols(self.shape(*a));
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                send(*a, ga);
            }
            Op::Slice(a, start) => {
                let mut ga = vec![0.0; self.value(*a).numel()];
                ga[*start..*start + g.len()].copy_from_slice(g);
                send(*a, ga);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for v in parts {
                    let n = self.value(*v).numel();
                    send(*v, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let m = rows_cols(self.shape(*a)).1;
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (out_row, &src_row) in idx.iter().enumerate() {
                    for c in 0..m {
                        ga[src_row * m + c] += g[out_row * m + c];
                    }
                }
                send(*a, ga);
            }
            Op::Cols(a, start) => {
                let (n, m) = rows_cols(self.shape(*a));
                let len = g.len() / n;
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    ga[i * m + start..i * m + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                send(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let n = rows_cols(self.shape(parts[0])).0;
                let widths: Vec<usize> = parts.iter().map(|v| rows_cols(self.shape(*v)).1).collect();
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (v, w) in parts.iter().zip(&widths) {
                    let mut gv = Vec::with_capacity(n * w);
                    for i in 0..n {
                        gv.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    send(*v, gv);
                    off += w;
                }
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::RowMeans(a) => {
                let m = rows_cols(self.shape(*a)).1;
                let ga = g.iter().flat_map(|gv| std::iter::repeat(gv / m as f64).take(m)).collect();
                send(*a, ga);
            }
            Op::Abs(a) => {
                let ga = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gv, x)| if *x > 0.0 { *gv } else if *x < 0.0 { -gv } else { 0.0 })
                    .collect();
                send(*a, ga);
            }
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                send(*a, ga);
            }
            Op::Softplus(a) => {
                let ga = g.iter().zip(self.data(*a)).map(|(gv, x)| gv * sigmoid(*x)).collect();
                send(*a, ga);
            }
            Op::SoftmaxRows(a) => {
                let m = rows_cols(&node.value.shape().to_vec()).1;
                let y = node.value.data();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(m).zip(y.chunks(m)).zip(ga.chunks_mut(m)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*a, ga);
            }
            Op::LayerNormRows(a) => {
                let m = rows_cols(self.shape(*a)).1;
                let x = self.data(*a);
                let y = node.value.data();
                let mut ga = vec![0.0; g.len()];
                for r in 0..g.len() / m {
                    let span = r * m..(r + 1) * m;
                    let (_, inv) = row_stats(&x[span.clone()]);
                    let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                    let gmean = gr.iter().sum::<f64>() / m as f64;
                    let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    for j in 0..m {
                        ga[r * m + j] = inv * (gr[j] - gmean - yr[j] * gy);
                    }
                }
                send(*a, ga);
            }
            Op::Min2(a, b) => {
                if self.value(*a).item() <= self.value(*b).item() {
                    send(*a, vec![g[0]]);
                } else {
                    send(*b, vec![g[0]]);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(geom, self.data(*x), self.data(*w), g);
                send(*x, gx);
                send(*w, gw);
                send(*b, gb);
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv_transpose2d_backward(geom, self.data(*x), self.data(*w), g);
                send(*x, gx);
                send(*w, gw);
                send(*b, gb);
            }
            Op::TemporalConv { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::temporal_conv_backward(geom, self.data(*x), self.data(*w), g);
                send(*x, gx);
                send(*w, gw);
                send(*b, gb);
            }
            Op::Rodrigues(a) => {
                let ga = self
                    .data(*a)
                    .chunks(3)
                    .zip(g.chunks(9))
                    .flat_map(|(w, gr)| {
                        let jac = rotation::axis_angle_jacobian(&[w[0], w[1], w[2]]);
                        jac.map(|d| d.iter().zip(gr).map(|(x, y)| x * y).sum::<f64>())
                    })
                    .collect();
                send(*a, ga);
            }
            Op::Bilinear { xs, a, xd } => {
                let (xsv, av, xdv) = (self.data(*xs), self.data(*a), self.data(*xd));
                let (ds, dd) = (xsv.len(), xdv.len());
                let mut gxs = vec![0.0; ds];
                let mut gxd = vec![0.0; dd];
                let mut ga = vec![0.0; av.len()];
                for (k, &gk) in g.iter().enumerate() {
                    let block = &av[k * ds * dd..(k + 1) * ds * dd];
                    for i in 0..ds {
                        let row = &block[i * dd..(i + 1) * dd];
                        let inner: f64 = row.iter().zip(xdv).map(|(w, d)| w * d).sum();
                        gxs[i] += gk * inner;
                        let c = gk * xsv[i];
                        let garow = &mut ga[(k * ds + i) * dd..(k * ds + i + 1) * dd];
                        for j in 0..dd {
                            gxd[j] += c * row[j];
                            garow[j] = c * xdv[j];
                        }
                    }
                }
                send(*xs, gxs);
                send(*a, ga);
                send(*xd, gxd);
            }
            Op::LinearBlend {
                transforms,
                points,
                weights,
            } => {
                let (tv, pv) = (self.data(*transforms), self.data(*points));
                let mut gt = vec![0.0; tv.len()];
                let mut gp = vec![0.0; pv.len()];
                for (i, ws) in weights.entries.iter().enumerate() {
                    let p = &pv[i * 3..i * 3 + 3];
                    let gi = &g[i * 3..i * 3 + 3];
                    for &(j, w) in ws {
                        let m = &tv[j * 12..j * 12 + 12];
                        for r in 0..3 {
                            let gr = w * gi[r];
                            gt[j * 12 + r * 4] += gr * p[0];
                            gt[j * 12 + r * 4 + 1] += gr * p[1];
                            gt[j * 12 + r * 4 + 2] += gr * p[2];
                            gt[j * 12 + r * 4 + 3] += gr;
                            for c in 0..3 {
                                gp[i * 3 + c] += gr * m[r * 4 + c];
                            }
                        }
                    }
                }
                send(*transforms, gt);
                send(*points, gp);
            }
        }
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let m = row.len() as f64;
    let mu = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
    (mu, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (d, bv) in dst.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *d += av * bv;
            }
        }
    }
    out
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
