use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{project, regress_joints, skin, BodyTemplate, ThetaParams, BETA_DIM, NUM_POSE_JOINTS};
use crate::error::{Error, Result};
use crate::synth::render::{add_noise, rasterize, Observation};

pub const DEFAULT_FPS: f64 = 10.0;
/// Shortest sequence that fills one temporal window.
pub const MIN_FRAMES: usize = 9;
/// Upper bound on the summed sinusoid amplitudes of one joint (radians).
pub const MAX_AMPLITUDE: f64 = 0.6;
pub const FREQ_RANGE: (f64, f64) = (0.15, 0.45);
pub const BETA_RANGE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Walk,
    Wave,
    Sit,
    Mixed,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Walk, Style::Wave, Style::Sit, Style::Mixed];
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Style::Walk => "walk",
            Style::Wave => "wave",
            Style::Sit => "sit",
            Style::Mixed => "mixed",
        };
        f.write_str(s)
    }
}

impl FromStr for Style {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walk" => Ok(Style::Walk),
            "wave" => Ok(Style::Wave),
            "sit" => Ok(Style::Sit),
            "mixed" => Ok(Style::Mixed),
            other => Err(Error::Config(format!("unknown motion style `{other}`"))),
        }
    }
}

/// A generated clip with its ground truth and rendered observations.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub seed: u64,
    pub style: Style,
    pub fps: f64,
    pub gt_params: Vec<ThetaParams>,
    /// `[N, 14, 3]` in meters.
    pub gt_j3d: Vec<f64>,
    /// `[N, 14, 2]` in normalized image units.
    pub gt_j2d: Vec<f64>,
    pub observations: Vec<Observation>,
}

impl MotionSequence {
    pub fn frame_count(&self) -> usize {
        self.gt_params.len()
    }

    pub fn j3d(&self, frame: usize) -> &[f64] {
        &self.gt_j3d[frame * 42..(frame + 1) * 42]
    }

    pub fn j2d(&self, frame: usize) -> &[f64] {
        &self.gt_j2d[frame * 28..(frame + 1) * 28]
    }
}

/// Symmetric per-joint plausibility limit on each axis-angle component, for
/// pose joints 1..=23.
const JOINT_LIMITS: [f64; NUM_POSE_JOINTS] = [
    1.6, 1.6, 0.5, 2.2, 2.2, 0.5, 0.6, 0.6, 0.5, 0.4, 0.4, 0.6, 0.3, 0.3, 0.6, 1.6, 1.6, 2.2, 2.2,
    0.7, 0.7, 0.3, 0.3,
];

/// Slowly varying component of one pose coordinate: a base offset plus a sum
/// of sinusoids.
#[derive(Debug, Clone, Default)]
struct Track {
    base: f64,
    waves: Vec<(f64, f64, f64)>,
}

impl Track {
    fn at(&self, t: f64) -> f64 {
        self.base + self.waves.iter().map(|(a, f, p)| a * (2.0 * PI * f * t + p).sin()).sum::<f64>()
    }
}

struct Plan {
    /// `tracks[joint][axis]`, joint indices are pose joints (0 = hip of SMPL joint 1).
    tracks: Vec<[Track; 3]>,
    global: [Track; 3],
    trans: [Track; 2],
    scale: Track,
}

impl Plan {
    fn pose_at(&self, t: f64) -> [[f64; 3]; NUM_POSE_JOINTS] {
        let mut theta = [[0.0; 3]; NUM_POSE_JOINTS];
        for (j, axes) in self.tracks.iter().enumerate() {
            let lim = JOINT_LIMITS[j];
            for (a, track) in axes.iter().enumerate() {
                theta[j][a] = track.at(t).clamp(-lim, lim);
            }
        }
        theta
    }
}

/// Draws one body pose from the motion prior: a random style, plan and time.
pub fn sample_pose(seed: u64) -> [[f64; 3]; NUM_POSE_JOINTS] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = Style::ALL[rng.gen_range(0..Style::ALL.len())];
    let plan = plan(&mut rng, style);
    plan.pose_at(rng.gen_range(0.0..1.0 / FREQ_RANGE.0))
}

fn pj(smpl_joint: usize) -> usize {
    smpl_joint - 1
}

/// Up to three sinusoids whose amplitudes sum to a random share of `budget`.
fn random_waves(rng: &mut ChaCha8Rng, budget: f64) -> Vec<(f64, f64, f64)> {
    let n = rng.gen_range(1..=3);
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let share = rng.gen_range(0.3..1.0) * budget;
    raw.iter()
        .map(|r| {
            (
                r / total * share,
                rng.gen_range(FREQ_RANGE.0..FREQ_RANGE.1),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect()
}

fn plan(rng: &mut ChaCha8Rng, style: Style) -> Plan {
    let mut tracks: Vec<[Track; 3]> = vec![Default::default(); NUM_POSE_JOINTS];
    let freq = rng.gen_range(FREQ_RANGE.0..FREQ_RANGE.1);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let swing = |a: f64, offset: f64| vec![(a, freq, phase + offset)];
    match style {
        Style::Walk => {
            let a = rng.gen_range(0.3..MAX_AMPLITUDE);
            tracks[pj(1)][0].waves = swing(a, 0.0);
            tracks[pj(2)][0].waves = swing(a, PI);
            tracks[pj(4)][0] = Track {
                base: 0.3,
                waves: swing(0.5 * a, -PI / 2.0),
            };
            tracks[pj(5)][0] = Track {
                base: 0.3,
                waves: swing(0.5 * a, PI / 2.0),
            };
            tracks[pj(16)][2].base = -1.2;
            tracks[pj(17)][2].base = 1.2;
            tracks[pj(16)][0].waves = swing(0.6 * a, PI);
            tracks[pj(17)][0].waves = swing(0.6 * a, 0.0);
            tracks[pj(18)][1].base = -0.3;
            tracks[pj(19)][1].base = 0.3;
        }
        Style::Wave => {
            tracks[pj(17)][2].base = rng.gen_range(-1.4..-0.6);
            tracks[pj(17)][2].waves = random_waves(rng, 0.3);
            tracks[pj(19)][2] = Track {
                base: -0.8,
                waves: swing(rng.gen_range(0.3..MAX_AMPLITUDE), 0.0),
            };
            tracks[pj(16)][2].base = rng.gen_range(-1.4..-0.8);
            tracks[pj(16)][0].waves = random_waves(rng, 0.3);
        }
        Style::Sit => {
            let depth = rng.gen_range(0.6..1.4);
            tracks[pj(1)][0].base = -depth;
            tracks[pj(2)][0].base = -depth;
            tracks[pj(4)][0].base = depth;
            tracks[pj(5)][0].base = depth;
            tracks[pj(3)][0].waves = random_waves(rng, 0.3);
            tracks[pj(16)][2].base = -1.0;
            tracks[pj(17)][2].base = 1.0;
            tracks[pj(18)][1].waves = random_waves(rng, MAX_AMPLITUDE);
            tracks[pj(19)][1].waves = random_waves(rng, MAX_AMPLITUDE);
        }
        Style::Mixed => {
            for j in [1, 2, 3, 4, 5, 6, 9, 12, 15, 16, 17, 18, 19] {
                if rng.gen_bool(0.6) {
                    let axis = rng.gen_range(0..3);
                    tracks[pj(j)][axis].base = rng.gen_range(-0.3..0.3) * JOINT_LIMITS[pj(j)];
                    tracks[pj(j)][axis].waves = random_waves(rng, MAX_AMPLITUDE);
                }
            }
            tracks[pj(16)][2].base += rng.gen_range(-1.2..-0.2);
            tracks[pj(17)][2].base += rng.gen_range(0.2..1.2);
        }
    }
    // Gentle torso and head sway for every style.
    for j in [6, 12, 15] {
        let axis = rng.gen_range(0..3);
        if tracks[pj(j)].iter().all(|t| t.waves.is_empty()) {
            tracks[pj(j)][axis].waves = random_waves(rng, 0.15);
        }
    }
    let global = [
        Track {
            base: rng.gen_range(-0.1..0.1),
            waves: vec![],
        },
        Track {
            base: rng.gen_range(-0.6..0.6),
            waves: random_waves(rng, 0.3),
        },
        Track {
            base: rng.gen_range(-0.1..0.1),
            waves: vec![],
        },
    ];
    let small = |rng: &mut ChaCha8Rng, base: f64, amp: f64| Track {
        base,
        waves: vec![(amp, rng.gen_range(0.05..0.2), rng.gen_range(0.0..2.0 * PI))],
    };
    let tx = rng.gen_range(-0.05..0.05);
    let ty = rng.gen_range(0.03..0.11);
    let s = rng.gen_range(0.78..0.9);
    Plan {
        tracks,
        global,
        trans: [small(rng, tx, 0.02), small(rng, ty, 0.02)],
        scale: small(rng, s, 0.02),
    }
}

/// Generates a clean motion clip.
pub fn generate_motion(template: &BodyTemplate, seed: u64, frames: usize, style: Style) -> Result<MotionSequence> {
    generate_noisy_motion(template, seed, frames, style, 0.0)
}

/// Generates a clip whose silhouettes carry Gaussian pixel noise of standard
/// deviation `noise`. The motion itself does not depend on `noise`.
///
/// Fails with [`Error::OutOfFrame`] if any frame leaves the image.
pub fn generate_noisy_motion(
    template: &BodyTemplate,
    seed: u64,
    frames: usize,
    style: Style,
    noise: f64,
) -> Result<MotionSequence> {
    if frames < MIN_FRAMES {
        return Err(Error::TooFewFrames {
            minimum: MIN_FRAMES,
            actual: frames,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut beta = [0.0; BETA_DIM];
    beta.iter_mut().for_each(|b| *b = rng.gen_range(-BETA_RANGE..=BETA_RANGE));
    let plan = plan(&mut rng, style);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut seq = MotionSequence {
        seed,
        style,
        fps: DEFAULT_FPS,
        gt_params: Vec::with_capacity(frames),
        gt_j3d: Vec::with_capacity(frames * 42),
        gt_j2d: Vec::with_capacity(frames * 28),
        observations: Vec::with_capacity(frames),
    };
    for f in 0..frames {
        let t = f as f64 / DEFAULT_FPS;
        let mut p = ThetaParams {
            beta,
            ..ThetaParams::default()
        };
        p.theta = plan.pose_at(t);
        for a in 0..3 {
            p.global_r[a] = plan.global[a].at(t);
        }
        p.trans = [plan.trans[0].at(t), plan.trans[1].at(t)];
        p.scale = plan.scale.at(t);
        let mesh = skin(template, &p)?;
        let j3d = regress_joints(&mesh, template)?;
        let j2d = project(&j3d, &p.global_r, p.scale, &p.trans)?;
        let mut obs = rasterize(&p, &mesh, &j2d)?;
        add_noise(&mut obs, noise, &mut noise_rng);
        seq.gt_params.push(p);
        seq.gt_j3d.extend(j3d);
        seq.gt_j2d.extend(j2d);
        seq.observations.push(obs);
    }
    Ok(seq)
}
