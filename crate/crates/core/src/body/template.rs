use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body::BETA_DIM;
use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 24;
pub const NUM_POSE_JOINTS: usize = NUM_JOINTS - 1;
pub const NUM_LSP: usize = 14;

/// SMPL joint order.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle", "r_ankle",
    "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head", "l_shoulder",
    "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand",
];

pub const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

/// LSP output joint order.
pub const LSP_NAMES: [&str; NUM_LSP] = [
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "r_wrist", "r_elbow",
    "r_shoulder", "l_shoulder", "l_elbow", "l_wrist", "neck", "head_top",
];

/// Kinematic joint each LSP joint is regressed around; `None` is the head top.
pub const LSP_JOINTS: [Option<usize>; NUM_LSP] = [
    Some(8),
    Some(5),
    Some(2),
    Some(1),
    Some(4),
    Some(7),
    Some(21),
    Some(19),
    Some(17),
    Some(16),
    Some(18),
    Some(20),
    Some(12),
    None,
];

/// T-pose joint locations in meters (y up, +x toward the body's left).
const REST_JOINTS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.09, -0.08, 0.0],
    [-0.09, -0.08, 0.0],
    [0.0, 0.11, -0.01],
    [0.10, -0.48, 0.01],
    [-0.10, -0.48, 0.01],
    [0.0, 0.24, -0.01],
    [0.10, -0.88, -0.02],
    [-0.10, -0.88, -0.02],
    [0.0, 0.30, 0.0],
    [0.10, -0.93, 0.10],
    [-0.10, -0.93, 0.10],
    [0.0, 0.50, -0.01],
    [0.07, 0.42, -0.01],
    [-0.07, 0.42, -0.01],
    [0.0, 0.60, 0.01],
    [0.18, 0.44, -0.01],
    [-0.18, 0.44, -0.01],
    [0.45, 0.44, -0.01],
    [-0.45, 0.44, -0.01],
    [0.70, 0.44, 0.0],
    [-0.70, 0.44, 0.0],
    [0.78, 0.44, 0.0],
    [-0.78, 0.44, 0.0],
];

const HEAD_TOP: [f64; 3] = [0.0, 0.78, 0.01];

/// Capsule radius of the segments leaving each joint.
const RADII: [f64; NUM_JOINTS] = [
    0.11, 0.075, 0.075, 0.12, 0.055, 0.055, 0.13, 0.045, 0.045, 0.12, 0.04, 0.04, 0.05, 0.05,
    0.05, 0.09, 0.045, 0.045, 0.04, 0.04, 0.035, 0.035, 0.03, 0.03,
];

const RING: usize = 6;
/// Blend support radius for the compactly supported inverse-distance weights.
const BLEND_RADIUS: f64 = 0.10;
const REGRESSOR_NEIGHBOURS: usize = 4;
/// Largest per-vertex displacement of the first shape direction (meters per unit beta).
const SHAPE_SCALE: f64 = 0.03;

/// Rest-pose body with its statistical prior: kinematic tree, skinning weights,
/// shape directions and the LSP joint regressor. All arrays are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyTemplate {
    /// `[V, 3]`
    pub template_vertices: Vec<f64>,
    pub parents: [Option<usize>; NUM_JOINTS],
    /// `[24, 3]`
    pub rest_joints: Vec<f64>,
    /// `[V, 24]`
    pub skin_weights: Vec<f64>,
    /// `[V, 3, 10]`
    pub shape_dirs: Vec<f64>,
    /// `[14, V]`
    pub joint_regressor: Vec<f64>,
    pub faces: Vec<[usize; 3]>,
}

struct Segment {
    joint: usize,
    start: [f64; 3],
    end: [f64; 3],
    /// Leaf segments carry an end cap vertex when the budget has spares.
    leaf: bool,
}

fn segments() -> Vec<Segment> {
    let mut segs = Vec::new();
    for (child, parent) in PARENTS.iter().enumerate() {
        if let Some(p) = *parent {
            segs.push(Segment {
                joint: p,
                start: REST_JOINTS[p],
                end: REST_JOINTS[child],
                leaf: false,
            });
        }
    }
    let ends: [(usize, [f64; 3]); 5] = [
        (15, HEAD_TOP),
        (22, [0.86, 0.44, 0.0]),
        (23, [-0.86, 0.44, 0.0]),
        (10, [0.10, -0.95, 0.18]),
        (11, [-0.10, -0.95, 0.18]),
    ];
    for (j, end) in ends {
        segs.push(Segment {
            joint: j,
            start: REST_JOINTS[j],
            end,
            leaf: true,
        });
    }
    segs
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: &[f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn point_segment_distance(p: &[f64; 3], a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let ab = sub(b, a);
    let ap = sub(p, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    norm(&[ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]])
}

/// Two unit vectors orthogonal to `dir` and to each other.
fn ring_basis(dir: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
    let d = {
        let n = norm(dir);
        [dir[0] / n, dir[1] / n, dir[2] / n]
    };
    let helper = if d[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let u = cross(&d, &helper);
    let un = norm(&u);
    let u = [u[0] / un, u[1] / un, u[2] / un];
    let v = cross(&d, &u);
    (u, v)
}

/// Builds the deterministic SMPL-lite template.
///
/// Vertices lie on capsule rings around each bone segment, with rings
/// allotted to segments in proportion to their length. Skinning weights use
/// compactly supported inverse-distance weighting (modified Shepard, power 2)
/// from each vertex's axial anchor to its two nearest bones, so vertices in
/// the middle of a segment are rigidly attached to one joint. Shape directions
/// are seeded smooth sinusoidal fields.
pub fn build_template(seed: u64, vertex_count: usize) -> Result<BodyTemplate> {
    let segs = segments();
    if vertex_count < 100 || vertex_count / RING < segs.len() {
        return Err(Error::TooFewVertices {
            requested: vertex_count,
            minimum: (segs.len() * RING).max(100),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Ring allotment: one per segment, the rest by largest remainder on length.
    let total_rings = vertex_count / RING;
    let lengths: Vec<f64> = segs.iter().map(|s| norm(&sub(&s.end, &s.start))).collect();
    let total_len: f64 = lengths.iter().sum();
    let spare = total_rings - segs.len();
    let shares: Vec<f64> = lengths.iter().map(|l| l / total_len * spare as f64).collect();
    let mut rings: Vec<usize> = shares.iter().map(|s| 1 + s.floor() as usize).collect();
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let assigned: usize = rings.iter().sum();
    for &i in order.iter().take(total_rings - assigned) {
        rings[i] += 1;
    }

    let mut vertices: Vec<[f64; 3]> = Vec::with_capacity(vertex_count);
    let mut anchors: Vec<[f64; 3]> = Vec::with_capacity(vertex_count);
    let mut faces = Vec::new();
    for (seg, &n) in segs.iter().zip(&rings) {
        let dir = sub(&seg.end, &seg.start);
        let (u, v) = ring_basis(&dir);
        let radius = RADII[seg.joint];
        let phase = rng.gen_range(0.0..2.0 * PI / RING as f64);
        let first = vertices.len();
        for k in 0..n {
            let t = (k as f64 + 0.5) / n as f64;
            let c = [
                seg.start[0] + t * dir[0],
                seg.start[1] + t * dir[1],
                seg.start[2] + t * dir[2],
            ];
            for m in 0..RING {
                let a = phase + 2.0 * PI * m as f64 / RING as f64;
                let (s, co) = a.sin_cos();
                vertices.push([
                    c[0] + radius * (co * u[0] + s * v[0]),
                    c[1] + radius * (co * u[1] + s * v[1]),
                    c[2] + radius * (co * u[2] + s * v[2]),
                ]);
                anchors.push(c);
            }
        }
        for k in 0..n.saturating_sub(1) {
            for m in 0..RING {
                let a0 = first + k * RING + m;
                let a1 = first + k * RING + (m + 1) % RING;
                let b0 = a0 + RING;
                let b1 = a1 + RING;
                faces.push([a0, b0, b1]);
                faces.push([a0, b1, a1]);
            }
        }
    }
    // Remaining vertices become end caps of leaf segments, cycling through them.
    let leaves: Vec<&Segment> = segs.iter().filter(|s| s.leaf).collect();
    let mut li = 0;
    while vertices.len() < vertex_count {
        let seg = leaves[li % leaves.len()];
        let dir = sub(&seg.end, &seg.start);
        let n = norm(&dir);
        let r = RADII[seg.joint] * (1.0 + (li / leaves.len()) as f64 * 0.25);
        vertices.push([
            seg.end[0] + r * dir[0] / n,
            seg.end[1] + r * dir[1] / n,
            seg.end[2] + r * dir[2] / n,
        ]);
        anchors.push(seg.end);
        li += 1;
    }

    let skin_weights = skinning_weights(&segs, &anchors);
    let shape_dirs = shape_directions(&mut rng, &vertices);
    let joint_regressor = regressor(&vertices);

    Ok(BodyTemplate {
        template_vertices: vertices.iter().flatten().copied().collect(),
        parents: PARENTS,
        rest_joints: REST_JOINTS.iter().flatten().copied().collect(),
        skin_weights,
        shape_dirs,
        joint_regressor,
        faces,
    })
}

fn skinning_weights(segs: &[Segment], anchors: &[[f64; 3]]) -> Vec<f64> {
    // Anchors sit on bone axes, so distances are softened by roughly a limb
    // radius; a bare floor would leave the owning bone with all the weight.
    const SOFTEN: f64 = 0.03;
    let mut out = vec![0.0; anchors.len() * NUM_JOINTS];
    for (i, p) in anchors.iter().enumerate() {
        let mut dist = [f64::INFINITY; NUM_JOINTS];
        for s in segs {
            dist[s.joint] = dist[s.joint].min(point_segment_distance(p, &s.start, &s.end));
        }
        let mut idx: Vec<usize> = (0..NUM_JOINTS).collect();
        idx.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        let (j1, j2) = (idx[0], idx[1]);
        let shepard = |d: f64| {
            let d = d.hypot(SOFTEN);
            let r = BLEND_RADIUS.hypot(SOFTEN);
            ((r - d).max(0.0) / (r * d)).powi(2)
        };
        let (w1, w2) = (shepard(dist[j1]), shepard(dist[j2]));
        // Shares under 1% are dropped so a dominant weight is either exactly
        // one or at most 0.99; only exact weights give rigid motion.
        if w2 < 0.01 * (w1 + w2) {
            out[i * NUM_JOINTS + j1] = 1.0;
        } else {
            out[i * NUM_JOINTS + j1] = w1 / (w1 + w2);
            out[i * NUM_JOINTS + j2] = w2 / (w1 + w2);
        }
    }
    out
}

fn shape_directions(rng: &mut ChaCha8Rng, vertices: &[[f64; 3]]) -> Vec<f64> {
    let nv = vertices.len();
    let mut dirs = vec![0.0; nv * 3 * BETA_DIM];
    for k in 0..BETA_DIM {
        let mut field = vec![[0.0; 3]; nv];
        for c in 0..3 {
            for _ in 0..3 {
                let freq = [
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-4.0..4.0),
                ];
                let phase = rng.gen_range(0.0..2.0 * PI);
                let amp = rng.gen_range(0.3..1.0);
                for (f, x) in field.iter_mut().zip(vertices) {
                    f[c] += amp * (freq[0] * x[0] + freq[1] * x[1] + freq[2] * x[2] + phase).sin();
                }
            }
        }
        let peak = field.iter().map(norm).fold(0.0, f64::max);
        let target = SHAPE_SCALE / (1.0 + 0.5 * k as f64);
        for (i, f) in field.iter().enumerate() {
            for c in 0..3 {
                dirs[(i * 3 + c) * BETA_DIM + k] = f[c] * target / peak;
            }
        }
    }
    dirs
}

fn regressor(vertices: &[[f64; 3]]) -> Vec<f64> {
    let nv = vertices.len();
    let mut out = vec![0.0; NUM_LSP * nv];
    for (row, joint) in LSP_JOINTS.iter().enumerate() {
        let target = joint.map_or(HEAD_TOP, |j| REST_JOINTS[j]);
        let mut idx: Vec<usize> = (0..nv).collect();
        idx.sort_by(|&a, &b| {
            norm(&sub(&vertices[a], &target))
                .total_cmp(&norm(&sub(&vertices[b], &target)))
                .then(a.cmp(&b))
        });
        for &v in idx.iter().take(REGRESSOR_NEIGHBOURS) {
            out[row * nv + v] = 1.0 / REGRESSOR_NEIGHBOURS as f64;
        }
    }
    out
}

impl BodyTemplate {
    pub fn vertex_count(&self) -> usize {
        self.template_vertices.len() / 3
    }

    pub fn vertex(&self, i: usize) -> [f64; 3] {
        let v = &self.template_vertices[i * 3..i * 3 + 3];
        [v[0], v[1], v[2]]
    }

    pub fn rest_joint(&self, j: usize) -> [f64; 3] {
        let v = &self.rest_joints[j * 3..j * 3 + 3];
        [v[0], v[1], v[2]]
    }

    /// Vertical extent of the rest mesh in meters.
    pub fn body_height(&self) -> f64 {
        let ys = self.template_vertices.iter().skip(1).step_by(3);
        let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| {
            (lo.min(*y), hi.max(*y))
        });
        hi - lo
    }

    /// Checks the structural invariants of the template.
    pub fn validate(&self) -> Result<()> {
        let nv = self.vertex_count();
        let check_rows = |name: &str, data: &[f64], rows: usize, cols: usize| -> Result<()> {
            if data.len() != rows * cols {
                return Err(Error::Shape {
                    what: name.into(),
                    expected: vec![rows, cols],
                    actual: vec![data.len()],
                });
            }
            for r in 0..rows {
                let row = &data[r * cols..(r + 1) * cols];
                if row.iter().any(|w| *w < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidTemplate(format!("{name} row {r} is not a distribution")));
                }
            }
            Ok(())
        };
        check_rows("skin_weights", &self.skin_weights, nv, NUM_JOINTS)?;
        check_rows("joint_regressor", &self.joint_regressor, NUM_LSP, nv)?;
        for (j, p) in self.parents.iter().enumerate() {
            match (j, p) {
                (0, None) => {}
                (j, Some(p)) if *p < j => {}
                _ => return Err(Error::InvalidTemplate(format!("joint {j} has invalid parent {p:?}"))),
            }
        }
        if self.shape_dirs.len() != nv * 3 * BETA_DIM {
            return Err(Error::Shape {
                what: "shape_dirs".into(),
                expected: vec![nv, 3, BETA_DIM],
                actual: vec![self.shape_dirs.len()],
            });
        }
        if self.faces.iter().flatten().any(|&i| i >= nv) {
            return Err(Error::InvalidTemplate("face index out of range".into()));
        }
        Ok(())
    }
}
