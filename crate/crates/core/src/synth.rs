//! Synthetic data: calibrated camera rigs on a sphere, smooth articulated
//! hand motion, and detector-grade label corruption with simulated
//! confidences that anti-correlate with the injected error.

use crate::geometry::{triangulate_dlt, Camera, Rig};
use crate::skeleton::{
    canonical_hand, forward_kinematics, SkeletonParams, SkeletonTemplate, BONE_COUNT, JOINT_COUNT,
};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const FRAME_SIZE: f64 = 256.0;
pub const WORKING_VOLUME_MM: f64 = 400.0;
pub const CAMERA_RADIUS_MM: f64 = 600.0;
/// Maximum inter-frame joint displacement the motion generator may produce.
pub const V_MAX_MM: f64 = 20.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("could not place a valid rig after {0} attempts")]
    RigPlacement(usize),
    #[error("invalid corruption profile: {0}")]
    InvalidProfile(String),
}

/// Detector-emulation noise model applied to ground-truth 2D joints.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionProfile {
    pub name: String,
    /// Gaussian pixel noise sigma.
    pub noise_sigma_px: f64,
    /// Probability of replacing a joint with a uniform draw around it.
    pub outlier_prob: f64,
    /// Half-width of the uniform outlier box, px.
    pub outlier_magnitude_px: f64,
    /// Per view-joint occlusion probability.
    pub occlusion_prob: f64,
    /// Noise inflation factor under occlusion.
    pub occlusion_inflation: f64,
    /// Error scale of the confidence model `conf = exp(-err / scale)`.
    pub conf_error_scale_px: f64,
    /// Additive noise on the simulated confidence.
    pub conf_noise: f64,
}

impl CorruptionProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        let probs_ok = (0.0..=1.0).contains(&self.outlier_prob)
            && (0.0..=1.0).contains(&self.occlusion_prob);
        let sigmas_ok = self.noise_sigma_px >= 0.0
            && self.outlier_magnitude_px >= 0.0
            && self.occlusion_inflation >= 0.0
            && self.conf_error_scale_px > 0.0
            && self.conf_noise >= 0.0;
        if probs_ok && sigmas_ok {
            Ok(())
        } else {
            Err(SynthError::InvalidProfile(self.name.clone()))
        }
    }

    /// Zero corruption: pseudo-labels equal ground truth, confidence 1.
    pub fn gt() -> Self {
        CorruptionProfile {
            name: "gt".into(),
            noise_sigma_px: 0.0,
            outlier_prob: 0.0,
            outlier_magnitude_px: 0.0,
            occlusion_prob: 0.0,
            occlusion_inflation: 1.0,
            conf_error_scale_px: 4.0,
            conf_noise: 0.0,
        }
    }

    /// Low-grade detector: heavy noise, frequent outliers and occlusions.
    pub fn detector_weak() -> Self {
        CorruptionProfile {
            name: "detector-weak".into(),
            noise_sigma_px: 3.0,
            outlier_prob: 0.08,
            outlier_magnitude_px: 200.0,
            occlusion_prob: 0.25,
            occlusion_inflation: 3.0,
            conf_error_scale_px: 4.0,
            conf_noise: 0.05,
        }
    }

    /// High-grade detector: strictly dominates the weak profile.
    pub fn detector_strong() -> Self {
        CorruptionProfile {
            name: "detector-strong".into(),
            noise_sigma_px: 1.0,
            outlier_prob: 0.02,
            outlier_magnitude_px: 60.0,
            occlusion_prob: 0.10,
            occlusion_inflation: 2.0,
            conf_error_scale_px: 4.0,
            conf_noise: 0.05,
        }
    }

    pub fn by_name(name: &str) -> Result<Self, SynthError> {
        match name {
            "gt" => Ok(Self::gt()),
            "detector-weak" => Ok(Self::detector_weak()),
            "detector-strong" => Ok(Self::detector_strong()),
            other => Err(SynthError::InvalidProfile(other.into())),
        }
    }
}

fn look_at(position: Vector3<f64>) -> Matrix3<f64> {
    let forward = (-position).normalize();
    let up_hint = if forward.z.abs() > 0.95 {
        Vector3::new(0.0, 1.0, 0.0)
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    };
    let right = forward.cross(&up_hint).normalize();
    let down = forward.cross(&right);
    Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
}

fn volume_corners() -> Vec<Vector3<f64>> {
    let h = WORKING_VOLUME_MM / 2.0;
    let mut corners = Vec::with_capacity(8);
    for &x in &[-h, h] {
        for &y in &[-h, h] {
            for &z in &[-h, h] {
                corners.push(Vector3::new(x, y, z));
            }
        }
    }
    corners
}

/// Place `views` cameras on a jittered sphere looking at the origin, with
/// intrinsics for a 256x256 frame. Retries the jitter until every camera
/// sees all eight corners of the working volume and a probe point
/// triangulates, then returns the rig.
pub fn generate_rig(views: usize, radius_mm: f64, seed: u64) -> Result<Rig, SynthError> {
    if views < 2 {
        return Err(SynthError::TooFewViews(views));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let corners = volume_corners();
    let margin = 4.0;
    let max_attempts = 64;
    'attempt: for attempt in 0..max_attempts {
        let _ = attempt;
        let mut cameras = Vec::with_capacity(views);
        for i in 0..views {
            let azimuth = i as f64 * std::f64::consts::TAU / views as f64
                + rng.random_range(-0.25..0.25);
            let elevation: f64 = if i % 2 == 0 {
                rng.random_range(0.15..0.55)
            } else {
                rng.random_range(-0.55..-0.15)
            };
            let pos = radius_mm
                * Vector3::new(
                    elevation.cos() * azimuth.cos(),
                    elevation.cos() * azimuth.sin(),
                    elevation.sin(),
                );
            let rotation = look_at(pos);
            let translation = -(rotation * pos);
            let f = rng.random_range(155.0..175.0);
            let cx = FRAME_SIZE / 2.0 + rng.random_range(-3.0..3.0);
            let cy = FRAME_SIZE / 2.0 + rng.random_range(-3.0..3.0);
            let cam = Camera::new(f, f, cx, cy, rotation, translation)
                .expect("look-at rotation is orthonormal");
            for corner in &corners {
                match cam.project(corner) {
                    Ok([u, v])
                        if u >= margin
                            && u <= FRAME_SIZE - margin
                            && v >= margin
                            && v <= FRAME_SIZE - margin => {}
                    _ => continue 'attempt,
                }
            }
            cameras.push(cam);
        }
        // Self-check: a probe point must triangulate back to itself.
        let probe = Vector3::new(30.0, 20.0, 10.0);
        let obs: Vec<[f64; 2]> = cameras.iter().map(|c| c.project(&probe).unwrap()).collect();
        let conf = vec![1.0; views];
        match triangulate_dlt(&obs, &conf, &cameras) {
            Ok(p) if (p - probe).norm() < 1e-6 => return Ok(Rig::new(cameras)),
            _ => continue 'attempt,
        }
    }
    Err(SynthError::RigPlacement(max_attempts))
}

/// A generated motion clip with per-frame pose parameters and ground-truth
/// joints.
#[derive(Clone, Debug)]
pub struct MotionSequence {
    pub id: u32,
    pub seed: u64,
    pub params: Vec<SkeletonParams>,
    pub joints: Vec<Vec<Vector3<f64>>>,
}

struct Oscillator {
    base: f64,
    amp: f64,
    omega: f64,
    phase: f64,
}

impl Oscillator {
    fn sample(rng: &mut ChaCha8Rng, base_range: (f64, f64), amp_max: f64, vel_max: f64) -> Self {
        let base = rng.random_range(base_range.0..base_range.1);
        let omega = rng.random_range(0.05..0.35);
        let amp_cap = (vel_max / omega).min(amp_max);
        let amp = rng.random_range(0.0..amp_cap.max(1e-9));
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        Oscillator { base, amp, omega, phase }
    }

    fn at(&self, t: f64) -> f64 {
        self.base + self.amp * (self.omega * t + self.phase).sin()
    }
}

/// Smooth random joint-angle oscillations plus a hand-centroid orbit inside
/// the working volume. Amplitude-times-frequency bounds keep the per-frame
/// joint displacement under [`V_MAX_MM`].
pub fn generate_motion(
    template: &SkeletonTemplate,
    id: u32,
    n_frames: usize,
    seed: u64,
) -> MotionSequence {
    assert!(n_frames >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545f4914f6cdd1d).wrapping_add(7));

    // Rest centroid offset used to keep the whole hand inside the volume.
    let rest = template.rest_joints();
    let rest_centroid: Vector3<f64> =
        rest.iter().sum::<Vector3<f64>>() / JOINT_COUNT as f64;

    let centroid_orbit: Vec<Oscillator> = (0..3)
        .map(|_| Oscillator::sample(&mut rng, (-35.0, 35.0), 25.0, 4.0))
        .collect();
    let global_rot: Vec<Oscillator> = (0..3)
        .map(|_| {
            let mut o = Oscillator::sample(&mut rng, (-0.5, 0.5), 0.35, 0.02);
            o.base = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            o
        })
        .collect();
    // Finger articulation, mildly flexed around the rest pose.
    let joint_rot: Vec<[Oscillator; 3]> = (0..BONE_COUNT)
        .map(|_| {
            [
                Oscillator::sample(&mut rng, (-0.15, 0.55), 0.3, 0.015),
                Oscillator::sample(&mut rng, (-0.15, 0.15), 0.15, 0.01),
                Oscillator::sample(&mut rng, (-0.15, 0.15), 0.15, 0.01),
            ]
        })
        .collect();
    let scale: f64 = rng.random_range(0.85..1.1);

    let mut params = Vec::with_capacity(n_frames);
    let mut joints = Vec::with_capacity(n_frames);
    for frame in 0..n_frames {
        let t = frame as f64;
        let mut p = SkeletonParams::identity();
        p.global_rot = [global_rot[0].at(t), global_rot[1].at(t), global_rot[2].at(t)];
        for b in 0..BONE_COUNT {
            p.joint_rots[b] = [
                joint_rot[b][0].at(t),
                joint_rot[b][1].at(t),
                joint_rot[b][2].at(t),
            ];
            p.bone_scales[b] = scale;
        }
        // Solve for the wrist location that puts the rotated hand centroid
        // on the sampled orbit.
        let centroid = Vector3::new(
            centroid_orbit[0].at(t),
            centroid_orbit[1].at(t),
            centroid_orbit[2].at(t),
        );
        let r = crate::skeleton::rodrigues(&p.global_rot);
        let wrist = centroid - r * (scale * rest_centroid);
        p.translation = [wrist.x, wrist.y, wrist.z];

        let fk = forward_kinematics(template, &p);
        debug_assert_eq!(fk.clamped_scales, 0);
        params.push(p);
        joints.push(fk.joints);
    }
    MotionSequence { id, seed, params, joints }
}

/// Per-joint pseudo-label and simulated confidence for one view of one frame.
#[derive(Clone, Debug)]
pub struct CorruptedView {
    pub pseudo_px: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

/// Corrupt ground-truth 2D joints following the profile. The random stream
/// is consumed identically regardless of branch outcomes, so two profiles
/// differing only in strength see the same underlying draws.
pub fn corrupt(gt_px: &[[f64; 2]], profile: &CorruptionProfile, rng: &mut ChaCha8Rng) -> CorruptedView {
    use rand_distr::StandardNormal;
    let mut pseudo = Vec::with_capacity(gt_px.len());
    let mut confidence = Vec::with_capacity(gt_px.len());
    for gt in gt_px {
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        let u_occ: f64 = rng.random_range(0.0..1.0);
        let u_out: f64 = rng.random_range(0.0..1.0);
        let du: f64 = rng.random_range(-1.0..1.0);
        let dv: f64 = rng.random_range(-1.0..1.0);
        let n_conf: f64 = rng.sample(StandardNormal);

        let occluded = u_occ < profile.occlusion_prob;
        let sigma = profile.noise_sigma_px
            * if occluded {
                profile.occlusion_inflation
            } else {
                1.0
            };
        let outlier = u_out < profile.outlier_prob;
        let (px, py) = if outlier {
            (
                gt[0] + du * profile.outlier_magnitude_px,
                gt[1] + dv * profile.outlier_magnitude_px,
            )
        } else {
            (gt[0] + sigma * nx, gt[1] + sigma * ny)
        };
        let px = px.clamp(0.0, FRAME_SIZE - 1.0);
        let py = py.clamp(0.0, FRAME_SIZE - 1.0);
        let err = ((px - gt[0]).powi(2) + (py - gt[1]).powi(2)).sqrt();
        let conf = ((-err / profile.conf_error_scale_px).exp() + profile.conf_noise * n_conf)
            .clamp(1e-3, 1.0);
        pseudo.push([px, py]);
        confidence.push(conf);
    }
    CorruptedView {
        pseudo_px: pseudo,
        confidence,
    }
}

/// One corrupted sequence as stored in a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: u32,
    pub seed: u64,
    /// `[frame][joint]` ground-truth 3D, mm.
    pub gt_joints: Vec<Vec<Vector3<f64>>>,
    /// `[frame][view][joint]` pseudo-labels, px.
    pub pseudo_px: Vec<Vec<Vec<[f64; 2]>>>,
    /// `[frame][view][joint]` simulated detector confidence.
    pub confidence: Vec<Vec<Vec<f64>>>,
}

impl Sequence {
    pub fn n_frames(&self) -> usize {
        self.gt_joints.len()
    }
}

/// A full generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub rig: Rig,
    pub template: SkeletonTemplate,
    pub profile: CorruptionProfile,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn views(&self) -> usize {
        self.rig.len()
    }

    /// Ground-truth 2D joints, derived through the shared projection code.
    pub fn gt_px(&self, seq: &Sequence, frame: usize, view: usize) -> Vec<[f64; 2]> {
        seq.gt_joints[frame]
            .iter()
            .map(|p| self.rig.cameras[view].project(p).expect("inside volume"))
            .collect()
    }
}

/// Generate a dataset: one rig, `n_sequences` motion clips, per-frame
/// corrupted labels. Fully determined by (profile, counts, views, seed).
pub fn generate_dataset(
    profile: &CorruptionProfile,
    n_sequences: usize,
    n_frames: usize,
    views: usize,
    seed: u64,
) -> Result<Dataset, SynthError> {
    profile.validate()?;
    let template = canonical_hand();
    let rig = generate_rig(views, CAMERA_RADIUS_MM, seed)?;
    let mut sequences = Vec::with_capacity(n_sequences);
    for i in 0..n_sequences {
        let seq_seed = seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(0x1000 + i as u64);
        let motion = generate_motion(&template, i as u32, n_frames, seq_seed);
        let mut corr_rng =
            ChaCha8Rng::seed_from_u64(seq_seed.wrapping_mul(0xd1342543de82ef95).wrapping_add(3));
        let mut pseudo_px = Vec::with_capacity(n_frames);
        let mut confidence = Vec::with_capacity(n_frames);
        for frame in 0..n_frames {
            let mut frame_pseudo = Vec::with_capacity(views);
            let mut frame_conf = Vec::with_capacity(views);
            for cam in &rig.cameras {
                let gt_px: Vec<[f64; 2]> = motion.joints[frame]
                    .iter()
                    .map(|p| cam.project(p).expect("hand inside working volume"))
                    .collect();
                let cv = corrupt(&gt_px, profile, &mut corr_rng);
                frame_pseudo.push(cv.pseudo_px);
                frame_conf.push(cv.confidence);
            }
            pseudo_px.push(frame_pseudo);
            confidence.push(frame_conf);
        }
        sequences.push(Sequence {
            id: i as u32,
            seed: seq_seed,
            gt_joints: motion.joints,
            pseudo_px,
            confidence,
        });
    }
    Ok(Dataset {
        seed,
        rig,
        template: template.clone(),
        profile: profile.clone(),
        sequences,
    })
}
