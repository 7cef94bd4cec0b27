//! Synthetic poses: forward kinematics over the default 16-joint skeleton with
//! fixed bone lengths and bounded joint angles, projected through a pinhole
//! camera.
//!
//! Targets are expressed in camera axes (x right, y down, z forward) relative
//! to the pelvis. The 2D input of a sample is the projection of
//! `target3d + root_translation`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PoseDataset, PoseSample, JOINTS};
use crate::error::{Error, Result};
use crate::skeleton::{Edge, DEFAULT_EDGES};

/// Bone lengths in millimeters, indexed like [`DEFAULT_EDGES`].
pub const BONE_LENGTHS: [f64; 15] = [
    130.0, 450.0, 440.0, // right leg
    130.0, 450.0, 440.0, // left leg
    230.0, 250.0, 200.0, // spine, thorax, head
    150.0, 280.0, 250.0, // left arm
    150.0, 280.0, 250.0, // right arm
];

/// Number of pose families used as action ids.
pub const ACTIONS: u16 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            fx: 1145.0,
            fy: 1145.0,
            cx: 512.0,
            cy: 515.0,
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx.is_finite()
            && self.cy.is_finite())
        {
            return Err(Error::Config("camera parameters must be finite".into()));
        }
        if self.fx == 0.0 || self.fy == 0.0 {
            return Err(Error::Config("camera focal length must be nonzero".into()));
        }
        Ok(())
    }

    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub dataset: PoseDataset,
    /// Camera-space pelvis position of each sample.
    pub root_translations: Vec<[f64; 3]>,
}

type Mat = [[f64; 3]; 3];

fn mul(a: &Mat, b: &Mat) -> Mat {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(m: &Mat, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn rot_x(t: f64) -> Mat {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(t: f64) -> Mat {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(t: f64) -> Mat {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scaled(v: [f64; 3], s: f64) -> [f64; 3] {
    v.map(|x| x * s)
}

/// Joint angle ranges (radians) for one pose family.
struct Ranges {
    hip_flex: (f64, f64),
    knee: (f64, f64),
    torso_bend: (f64, f64),
    arm_flex: (f64, f64),
    arm_abduct: (f64, f64),
    elbow: (f64, f64),
}

const FAMILIES: [Ranges; ACTIONS as usize] = [
    // standing
    Ranges {
        hip_flex: (-0.2, 0.3),
        knee: (0.0, 0.3),
        torso_bend: (-0.1, 0.2),
        arm_flex: (-0.3, 0.5),
        arm_abduct: (0.0, 0.4),
        elbow: (0.0, 0.8),
    },
    // walking
    Ranges {
        hip_flex: (-0.5, 0.6),
        knee: (0.0, 1.0),
        torso_bend: (-0.1, 0.2),
        arm_flex: (-0.6, 0.6),
        arm_abduct: (0.0, 0.3),
        elbow: (0.1, 0.9),
    },
    // sitting
    Ranges {
        hip_flex: (1.1, 1.6),
        knee: (1.2, 1.8),
        torso_bend: (0.0, 0.5),
        arm_flex: (0.0, 1.0),
        arm_abduct: (0.0, 0.5),
        elbow: (0.5, 1.8),
    },
    // reaching
    Ranges {
        hip_flex: (-0.2, 0.5),
        knee: (0.0, 0.6),
        torso_bend: (-0.2, 0.6),
        arm_flex: (0.5, 2.6),
        arm_abduct: (0.0, 1.5),
        elbow: (0.0, 1.2),
    },
];

/// One pose in a y-up body frame, pelvis at the origin.
fn articulate(rng: &mut ChaCha8Rng, r: &Ranges) -> [[f64; 3]; JOINTS] {
    let mut u = |(lo, hi): (f64, f64)| rng.gen_range(lo..=hi);
    let down = [0.0, -1.0, 0.0];
    let up = [0.0, 1.0, 0.0];
    let mut j = [[0.0; 3]; JOINTS];

    let yaw = rot_y(u((-std::f64::consts::PI, std::f64::consts::PI)));
    let pelvis_tilt = mul(&yaw, &rot_z(u((-0.1, 0.1))));
    for (side, hip, knee, ankle) in [(-1.0, 1, 2, 3), (1.0, 4, 5, 6)] {
        j[hip] = apply(&pelvis_tilt, [side * BONE_LENGTHS[0], 0.0, 0.0]);
        let thigh = mul(
            &pelvis_tilt,
            &mul(&rot_x(-u(r.hip_flex)), &rot_z(side * u((-0.1, 0.35)))),
        );
        j[knee] = add(j[hip], scaled(apply(&thigh, down), BONE_LENGTHS[1]));
        let shin = mul(&thigh, &rot_x(u(r.knee)));
        j[ankle] = add(j[knee], scaled(apply(&shin, down), BONE_LENGTHS[2]));
    }

    let torso = mul(
        &pelvis_tilt,
        &mul(
            &rot_x(-u(r.torso_bend)),
            &mul(&rot_z(u((-0.15, 0.15))), &rot_y(u((-0.4, 0.4)))),
        ),
    );
    j[7] = apply(&torso, scaled(up, BONE_LENGTHS[6]));
    let chest = mul(&torso, &rot_x(-u((-0.1, 0.2))));
    j[8] = add(j[7], scaled(apply(&chest, up), BONE_LENGTHS[7]));
    let neck = mul(
        &chest,
        &mul(&rot_x(-u((-0.3, 0.4))), &rot_z(u((-0.3, 0.3)))),
    );
    j[9] = add(j[8], scaled(apply(&neck, up), BONE_LENGTHS[8]));

    for (side, sh, el, wr) in [(1.0, 10, 11, 12), (-1.0, 13, 14, 15)] {
        j[sh] = add(j[8], apply(&chest, [side * BONE_LENGTHS[9], 0.0, 0.0]));
        let upper = mul(
            &chest,
            &mul(&rot_z(side * u(r.arm_abduct)), &rot_x(-u(r.arm_flex))),
        );
        j[el] = add(j[sh], scaled(apply(&upper, down), BONE_LENGTHS[10]));
        let fore = mul(&upper, &rot_x(-u(r.elbow)));
        j[wr] = add(j[el], scaled(apply(&fore, down), BONE_LENGTHS[11]));
    }
    j
}

/// `n` samples, deterministic per `seed`.
pub fn synth_generate(n: usize, seed: u64, camera: Camera) -> Result<SynthOutput> {
    if n == 0 {
        return Err(Error::Config(
            "synthetic dataset needs at least one sample".into(),
        ));
    }
    camera.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut roots = Vec::with_capacity(n);
    for _ in 0..n {
        let action = rng.gen_range(0..ACTIONS);
        let body = articulate(&mut rng, &FAMILIES[action as usize]);
        // y-up body frame to y-down camera axes
        let target3d = body.map(|p| [p[0], -p[1], p[2]]);
        let root = [
            rng.gen_range(-500.0..=500.0),
            rng.gen_range(-300.0..=300.0),
            rng.gen_range(4000.0..=6000.0),
        ];
        let input2d = target3d.map(|p| camera.project(add(p, root)));
        samples.push(PoseSample {
            input2d,
            target3d,
            action: Some(action),
        });
        roots.push(root);
    }
    Ok(SynthOutput {
        dataset: PoseDataset::new(samples),
        root_translations: roots,
    })
}

/// Lengths of `edges` in a pose.
pub fn bone_lengths(pose: &[[f64; 3]; JOINTS], edges: &[Edge]) -> Vec<f64> {
    edges
        .iter()
        .map(|&(a, b)| {
            let d: f64 = (0..3).map(|i| (pose[a][i] - pose[b][i]).powi(2)).sum();
            d.sqrt()
        })
        .collect()
}

/// Mean length of the default skeleton's bones (272 mm).
pub fn mean_bone_length() -> f64 {
    BONE_LENGTHS.iter().sum::<f64>() / BONE_LENGTHS.len() as f64
}

/// The default edges paired with their lengths.
pub fn default_bones() -> impl Iterator<Item = (Edge, f64)> {
    DEFAULT_EDGES.into_iter().zip(BONE_LENGTHS)
}
