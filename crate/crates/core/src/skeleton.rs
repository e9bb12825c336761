//! Parametric 21-joint kinematic hand: forward kinematics from axis-angle
//! pose parameters, the parameter regression head, the 2D projection loss,
//! and total-loss aggregation.

use crate::diff::{Array, DiffError, ParamStore, Tape, Var};
use crate::geometry::{project_points_tape, Camera};
use crate::nn::{linear, register_linear, Init};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub const JOINT_COUNT: usize = 21;
pub const BONE_COUNT: usize = 20;

/// Parent joint per joint; -1 marks the wrist root. Fingers are chains of
/// four joints (MCP, PIP, DIP, TIP) hanging off the wrist, thumb first.
pub const PARENTS: [i32; JOINT_COUNT] = [
    -1, // wrist
    0, 1, 2, 3, // thumb
    0, 5, 6, 7, // index
    0, 9, 10, 11, // middle
    0, 13, 14, 15, // ring
    0, 17, 18, 19, // pinky
];

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("all joints project behind the cameras in every view")]
    AllJointsBehind,
    #[error("loss term {0} is NaN")]
    NanTerm(&'static str),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Rest-pose topology: parents plus one bone vector per non-root joint
/// (joint j's bone is `bones[j-1]`, pointing from its parent).
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTemplate {
    pub bones: [[f64; 3]; BONE_COUNT],
}

impl SkeletonTemplate {
    /// Joint positions with identity rotations and unit scales.
    pub fn rest_joints(&self) -> Vec<Vector3<f64>> {
        let mut joints = vec![Vector3::zeros(); JOINT_COUNT];
        for j in 1..JOINT_COUNT {
            let p = PARENTS[j] as usize;
            joints[j] = joints[p] + Vector3::from(self.bones[j - 1]);
        }
        joints
    }

    pub fn bone_length(&self, bone: usize) -> f64 {
        Vector3::from(self.bones[bone]).norm()
    }
}

/// Desk-scale canonical right hand, palm in the XY plane, fingers along +Y.
/// Millimeters.
pub fn canonical_hand() -> SkeletonTemplate {
    SkeletonTemplate {
        bones: [
            // thumb
            [-35.0, 25.0, 6.0],
            [-18.0, 25.0, 2.0],
            [-12.0, 20.0, 0.0],
            [-8.0, 15.0, 0.0],
            // index
            [-22.0, 85.0, 0.0],
            [-3.0, 38.0, 0.0],
            [-2.0, 24.0, 0.0],
            [-1.0, 18.0, 0.0],
            // middle
            [0.0, 90.0, 0.0],
            [0.0, 42.0, 0.0],
            [0.0, 27.0, 0.0],
            [0.0, 19.0, 0.0],
            // ring
            [20.0, 85.0, 0.0],
            [2.0, 38.0, 0.0],
            [2.0, 24.0, 0.0],
            [1.0, 17.0, 0.0],
            // pinky
            [38.0, 75.0, 0.0],
            [4.0, 30.0, 0.0],
            [3.0, 19.0, 0.0],
            [2.0, 14.0, 0.0],
        ],
    }
}

pub const SCALE_MIN: f64 = 0.5;
pub const SCALE_MAX: f64 = 2.0;

/// Pose parameters: 3 + 3 + 60 + 20 = 86 scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonParams {
    /// Wrist position, mm.
    pub translation: [f64; 3],
    /// Global axis-angle rotation.
    pub global_rot: [f64; 3],
    /// Per-bone axis-angle rotations.
    pub joint_rots: [[f64; 3]; BONE_COUNT],
    /// Per-bone length multipliers in [0.5, 2].
    pub bone_scales: [f64; BONE_COUNT],
}

impl SkeletonParams {
    pub fn identity() -> Self {
        SkeletonParams {
            translation: [0.0; 3],
            global_rot: [0.0; 3],
            joint_rots: [[0.0; 3]; BONE_COUNT],
            bone_scales: [1.0; BONE_COUNT],
        }
    }

    pub const fn param_count() -> usize {
        3 + 3 + 3 * BONE_COUNT + BONE_COUNT
    }
}

/// Rodrigues rotation from an unnormalized axis-angle vector; smooth at the
/// origin through the even-power series in |w|^2.
pub fn rodrigues(w: &[f64; 3]) -> Matrix3<f64> {
    let s2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b) = rodrigues_coeffs(s2);
    let k = Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0);
    Matrix3::identity() + a * k + b * (k * k)
}

const RODRIGUES_TAYLOR_CUTOFF: f64 = 1e-8;

fn rodrigues_coeffs(s2: f64) -> (f64, f64) {
    if s2 < RODRIGUES_TAYLOR_CUTOFF {
        (
            1.0 - s2 / 6.0 + s2 * s2 / 120.0,
            0.5 - s2 / 24.0 + s2 * s2 / 720.0,
        )
    } else {
        let theta = s2.sqrt();
        ((theta.sin()) / theta, (1.0 - theta.cos()) / s2)
    }
}

#[derive(Clone, Debug)]
pub struct FkResult {
    pub joints: Vec<Vector3<f64>>,
    /// Bone scales that were outside [0.5, 2] and got clamped.
    pub clamped_scales: usize,
}

/// Forward kinematics: the root sits at the translation, every other joint
/// adds its accumulated rotation chain applied to the scaled rest bone.
pub fn forward_kinematics(template: &SkeletonTemplate, params: &SkeletonParams) -> FkResult {
    let mut clamped = 0;
    let mut rots = vec![Matrix3::identity(); JOINT_COUNT];
    let mut joints = vec![Vector3::zeros(); JOINT_COUNT];
    rots[0] = rodrigues(&params.global_rot);
    joints[0] = Vector3::from(params.translation);
    for j in 1..JOINT_COUNT {
        let p = PARENTS[j] as usize;
        rots[j] = rots[p] * rodrigues(&params.joint_rots[j - 1]);
        let mut s = params.bone_scales[j - 1];
        if !(SCALE_MIN..=SCALE_MAX).contains(&s) {
            s = s.clamp(SCALE_MIN, SCALE_MAX);
            clamped += 1;
        }
        joints[j] = joints[p] + rots[j] * (s * Vector3::from(template.bones[j - 1]));
    }
    FkResult {
        joints,
        clamped_scales: clamped,
    }
}

// Flattened skew generators: K(w) = w_x Gx + w_y Gy + w_z Gz.
const SKEW_GENERATORS: [f64; 27] = [
    0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0, // Gx
    0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, // Gy
    0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, // Gz
];

/// Tape-side Rodrigues for a `[1, 3]` axis-angle variable. The Taylor branch
/// keeps the map differentiable at the origin, where sqrt is not.
pub fn rodrigues_tape(tape: &mut Tape, w: Var) -> Result<Var, DiffError> {
    let sq = tape.mul(w, w)?;
    let s2 = tape.sum_all(sq);
    let (a, b) = if tape.value(s2).scalar_value() < RODRIGUES_TAYLOR_CUTOFF {
        let s4 = tape.mul(s2, s2)?;
        let a1 = tape.scale(s2, -1.0 / 6.0);
        let a2 = tape.scale(s4, 1.0 / 120.0);
        let a12 = tape.add(a1, a2)?;
        let a = tape.add_const(a12, 1.0);
        let b1 = tape.scale(s2, -1.0 / 24.0);
        let b2 = tape.scale(s4, 1.0 / 720.0);
        let b12 = tape.add(b1, b2)?;
        let b = tape.add_const(b12, 0.5);
        (a, b)
    } else {
        let theta = tape.sqrt(s2);
        let sin_t = tape.sin(theta);
        let a = tape.div(sin_t, theta)?;
        let cos_t = tape.cos(theta);
        let neg = tape.scale(cos_t, -1.0);
        let one_minus = tape.add_const(neg, 1.0);
        let b = tape.div(one_minus, s2)?;
        (a, b)
    };
    let gens = tape.constant(Array::matrix(3, 9, SKEW_GENERATORS.to_vec())?);
    let k_flat = tape.matmul(w, gens)?;
    let k = tape.reshape(k_flat, &[3, 3])?;
    let k2 = tape.matmul(k, k)?;
    let ak = tape.mul(k, a)?;
    let bk2 = tape.mul(k2, b)?;
    let eye = tape.constant(Array::matrix(
        3,
        3,
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    )?);
    let r = tape.add(eye, ak)?;
    tape.add(r, bk2)
}

/// Pose parameter variables produced by the regression head.
pub struct SkeletonVars {
    pub translation: Var,
    pub global_rot: Var,
    pub joint_rots: Var,
    pub bone_scales: Var,
}

/// Differentiable forward kinematics; returns joint positions `[21, 3]`.
pub fn fk_tape(
    tape: &mut Tape,
    template: &SkeletonTemplate,
    vars: &SkeletonVars,
) -> Result<Var, DiffError> {
    let mut rots = Vec::with_capacity(JOINT_COUNT);
    let mut joints: Vec<Var> = Vec::with_capacity(JOINT_COUNT);
    rots.push(rodrigues_tape(tape, vars.global_rot)?);
    joints.push(vars.translation);
    for j in 1..JOINT_COUNT {
        let p = PARENTS[j] as usize;
        let w = tape.gather(vars.joint_rots, &[j - 1])?;
        let local = rodrigues_tape(tape, w)?;
        let r = tape.matmul(rots[p], local)?;
        rots.push(r);
        let bone = tape.constant(Array::matrix(3, 1, template.bones[j - 1].to_vec())?);
        let s = tape.gather(vars.bone_scales, &[j - 1])?;
        let scaled = tape.mul(bone, s)?;
        let rotated = tape.matmul(r, scaled)?;
        let offset = tape.transpose(rotated)?;
        let pos = tape.add(joints[p], offset)?;
        joints.push(pos);
    }
    tape.concat_rows(&joints)
}

/// Register the regression head mapping pooled STPT features to pose
/// parameters. The output layer starts at zero: rest-pose rotations, unit
/// scales, centroid translation.
pub fn register_skeleton_head(
    store: &mut ParamStore,
    d_in: usize,
    hidden: usize,
    init: &mut Init,
) -> Result<(), DiffError> {
    register_linear(store, "skel.head.l1", d_in, hidden, init, false)?;
    register_linear(store, "skel.head.l2", hidden, SkeletonParams::param_count(), init, true)?;
    Ok(())
}

/// Regress pose parameters from a pooled feature row `[1, d_in]` and the
/// query-cloud centroid `[1, 3]` (mm). Bone scales are squashed into
/// (0.5, 2) so the FK preconditions hold by construction.
pub fn regress_params_tape(
    tape: &mut Tape,
    store: &ParamStore,
    pooled: Var,
    centroid: Var,
    translation_scale: f64,
) -> Result<SkeletonVars, DiffError> {
    let h = linear(tape, store, "skel.head.l1", pooled)?;
    let h = tape.relu(h);
    let raw = linear(tape, store, "skel.head.l2", h)?;
    let n = SkeletonParams::param_count();

    let select = |tape: &mut Tape, from: usize, width: usize| -> Result<Var, DiffError> {
        let mut sel = vec![0.0; n * width];
        for c in 0..width {
            sel[(from + c) * width + c] = 1.0;
        }
        let sel = tape.constant(Array::matrix(n, width, sel)?);
        tape.matmul(raw, sel)
    };

    let dt = select(tape, 0, 3)?;
    let dt = tape.scale(dt, translation_scale);
    let translation = tape.add(centroid, dt)?;
    let global_rot = select(tape, 3, 3)?;
    let jr = select(tape, 6, 3 * BONE_COUNT)?;
    let joint_rots = tape.reshape(jr, &[BONE_COUNT, 3])?;
    let sr = select(tape, 6 + 3 * BONE_COUNT, BONE_COUNT)?;
    let sr = tape.reshape(sr, &[BONE_COUNT, 1])?;
    // scale = exp(ln2 * tanh(raw)) in (0.5, 2), exactly 1 at zero.
    let t = tape.tanh(sr);
    let t = tape.scale(t, std::f64::consts::LN_2);
    let bone_scales = tape.exp(t);
    Ok(SkeletonVars {
        translation,
        global_rot,
        joint_rots,
        bone_scales,
    })
}

/// One view's supervision inputs for the projection loss.
pub struct ProjView<'a> {
    pub camera: &'a Camera,
    /// Pseudo-label pixels `[k, 2]` (constant).
    pub pseudo_px: Var,
    /// Per-joint confidence `[k, 1]` (live model confidence).
    pub confidence: Var,
}

/// Confidence-weighted squared pixel error of projected query and skeleton
/// joints against per-view pseudo-labels, both terms averaged over views.
/// Behind-camera joints are excluded; their count is returned.
pub fn loss_proj2d_tape(
    tape: &mut Tape,
    query3d: Var,
    skeleton3d: Var,
    views: &[ProjView<'_>],
) -> Result<(Var, usize), SkeletonError> {
    let k = tape.value(query3d).rows();
    let n_views = views.len() as f64;
    let mut excluded = 0usize;
    let mut included = 0usize;
    let mut total: Option<Var> = None;
    for pv in views {
        for &(points, label) in &[(query3d, "query"), (skeleton3d, "skeleton")] {
            let _ = label;
            let (uv, z) = project_points_tape(tape, points, pv.camera)?;
            let mask_vals: Vec<f64> = tape
                .value(z)
                .data()
                .iter()
                .map(|&d| if d > 1e-6 { 1.0 } else { 0.0 })
                .collect();
            excluded += mask_vals.iter().filter(|&&m| m == 0.0).count();
            included += mask_vals.iter().filter(|&&m| m == 1.0).count();
            let mask = tape.constant(Array::matrix(k, 1, mask_vals)?);
            let d = tape.sub(uv, pv.pseudo_px)?;
            let sq = tape.mul(d, d)?;
            let per_joint = tape.sum_rows(sq);
            let weighted = tape.mul(per_joint, pv.confidence)?;
            let masked = tape.mul(weighted, mask)?;
            let sum = tape.sum_all(masked);
            let term = tape.scale(sum, 1.0 / (k as f64 * n_views));
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
    }
    if included == 0 {
        return Err(SkeletonError::AllJointsBehind);
    }
    Ok((total.expect("at least one view"), excluded))
}

/// Trade-off weights of the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub hmap: f64,
    pub hm2d: f64,
    pub nll: f64,
    pub proj2d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            hmap: 0.001,
            hm2d: 10.0,
            nll: 0.1,
            proj2d: 10.0,
        }
    }
}

/// Weighted sum of the four loss terms. A NaN term aborts with its name.
pub fn total_loss(
    tape: &mut Tape,
    hmap: Var,
    hm2d: Var,
    nll: Var,
    proj2d: Var,
    weights: &LossWeights,
) -> Result<Var, SkeletonError> {
    for (name, v) in [
        ("hmap", hmap),
        ("hm2d", hm2d),
        ("nll", nll),
        ("proj2d", proj2d),
    ] {
        if tape.value(v).scalar_value().is_nan() {
            return Err(SkeletonError::NanTerm(name));
        }
    }
    let a = tape.scale(hmap, weights.hmap);
    let b = tape.scale(hm2d, weights.hm2d);
    let c = tape.scale(nll, weights.nll);
    let d = tape.scale(proj2d, weights.proj2d);
    let ab = tape.add(a, b)?;
    let cd = tape.add(c, d)?;
    Ok(tape.add(ab, cd)?)
}
