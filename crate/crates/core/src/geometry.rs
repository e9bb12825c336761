//! Calibrated pinhole cameras, confidence-weighted DLT triangulation, and
//! Procrustes alignment.
//!
//! Conventions: 3D points in millimeters (world frame), 2D points in pixels.
//! Extrinsics map world to camera: `x_cam = R x_world + t`.

use crate::diff::{DiffError, Tape, Var};
use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("camera has invalid calibration: {0}")]
    InvalidCamera(String),
    #[error("point behind camera (depth {depth:.3e} mm)")]
    BehindCamera { depth: f64 },
    #[error("triangulation needs at least 2 views with positive confidence, got {got}")]
    InsufficientViews { got: usize },
    #[error("degenerate geometry: weighted design matrix is rank deficient")]
    DegenerateGeometry,
    #[error("degenerate reference points (zero variance)")]
    DegenerateReference,
    #[error("mismatched lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Calibrated pinhole camera with zero skew.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const MIN_DEPTH_MM: f64 = 1e-6;

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        let rtr = rotation.transpose() * rotation;
        if (rtr - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(GeometryError::InvalidCamera(
                "rotation is not orthonormal".into(),
            ));
        }
        if (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidCamera(
                "rotation determinant is not +1".into(),
            ));
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        })
    }

    /// 3x4 projection matrix K [R | t].
    pub fn projection_matrix(&self) -> [[f64; 4]; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        let k = [
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ];
        let mut p = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (l, krow) in k[i].iter().enumerate() {
                    p[i][j] += krow * r[(l, j)];
                }
            }
            for (l, krow) in k[i].iter().enumerate() {
                p[i][3] += krow * t[l];
            }
        }
        p
    }

    /// Depth of a world point in the camera frame.
    pub fn depth(&self, point: &Vector3<f64>) -> f64 {
        (self.rotation * point + self.translation).z
    }

    /// Perspective projection of a world point to pixel coordinates.
    pub fn project(&self, point: &Vector3<f64>) -> Result<[f64; 2], GeometryError> {
        let pc = self.rotation * point + self.translation;
        if pc.z <= MIN_DEPTH_MM {
            return Err(GeometryError::BehindCamera { depth: pc.z });
        }
        Ok([
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ])
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// A set of calibrated cameras observing the same scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    pub cameras: Vec<Camera>,
}

impl Rig {
    pub fn new(cameras: Vec<Camera>) -> Self {
        Rig { cameras }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Subset of the rig by view indices.
    pub fn subset(&self, views: &[usize]) -> Rig {
        Rig {
            cameras: views.iter().map(|&v| self.cameras[v].clone()).collect(),
        }
    }
}

/// Confidence-weighted DLT triangulation.
///
/// Each view with positive confidence contributes two rows of the design
/// matrix, scaled by its confidence; the solution is the right singular
/// vector of the smallest singular value, dehomogenized to millimeters.
pub fn triangulate_dlt(
    observations: &[[f64; 2]],
    confidences: &[f64],
    cameras: &[Camera],
) -> Result<Vector3<f64>, GeometryError> {
    if observations.len() != cameras.len() {
        return Err(GeometryError::LengthMismatch(
            observations.len(),
            cameras.len(),
        ));
    }
    if observations.len() != confidences.len() {
        return Err(GeometryError::LengthMismatch(
            observations.len(),
            confidences.len(),
        ));
    }
    let active: Vec<usize> = (0..cameras.len()).filter(|&i| confidences[i] > 0.0).collect();
    if active.len() < 2 {
        return Err(GeometryError::InsufficientViews { got: active.len() });
    }

    let mut a = DMatrix::<f64>::zeros(2 * active.len(), 4);
    for (row_pair, &vi) in active.iter().enumerate() {
        let p = cameras[vi].projection_matrix();
        let [u, v] = observations[vi];
        let w = confidences[vi];
        // Normalize pixel scale so weighting is comparable across cameras.
        let su = 1.0 / cameras[vi].fx;
        let sv = 1.0 / cameras[vi].fy;
        for j in 0..4 {
            a[(2 * row_pair, j)] = w * su * (u * p[2][j] - p[0][j]);
            a[(2 * row_pair + 1, j)] = w * sv * (v * p[2][j] - p[1][j]);
        }
    }

    let svd = a.svd(true, true);
    let v_t = svd.v_t.as_ref().ok_or(GeometryError::DegenerateGeometry)?;
    // Rank gate: the system determines a point only if three directions are
    // constrained above noise.
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    if sv.len() < 3 || sv[2] <= 1e-12 * sv[0] {
        return Err(GeometryError::DegenerateGeometry);
    }
    let last = v_t.nrows() - 1;
    let h = v_t.row(last);
    if h[3].abs() <= 1e-14 * h.norm() {
        return Err(GeometryError::DegenerateGeometry);
    }
    Ok(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Similarity (rotation + uniform scale + translation) alignment of `pred`
/// onto `gt`, minimizing the sum of squared distances.
///
/// Returns the aligned points and per-point residual distances.
pub fn procrustes_align(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
) -> Result<(Vec<Vector3<f64>>, Vec<f64>), GeometryError> {
    if pred.len() != gt.len() {
        return Err(GeometryError::LengthMismatch(pred.len(), gt.len()));
    }
    let k = pred.len();
    if k < 3 {
        return Err(GeometryError::InsufficientViews { got: k });
    }
    let kf = k as f64;
    let mu_p: Vector3<f64> = pred.iter().sum::<Vector3<f64>>() / kf;
    let mu_g: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() / kf;

    let var_p: f64 = pred.iter().map(|p| (p - mu_p).norm_squared()).sum::<f64>() / kf;
    let var_g: f64 = gt.iter().map(|g| (g - mu_g).norm_squared()).sum::<f64>() / kf;
    if var_g <= 1e-18 || var_p <= 1e-18 {
        return Err(GeometryError::DegenerateReference);
    }

    // Umeyama closed form on the cross-covariance.
    let mut sigma = Matrix3::<f64>::zeros();
    for (p, g) in pred.iter().zip(gt.iter()) {
        sigma += (g - mu_g) * (p - mu_p).transpose();
    }
    sigma /= kf;
    let svd = sigma.svd(true, true);
    let u = svd.u.ok_or(GeometryError::DegenerateGeometry)?;
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateGeometry)?;
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let d = Vector3::new(svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]);
    let scale = (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_p;
    let t = mu_g - scale * (r * mu_p);

    let aligned: Vec<Vector3<f64>> = pred.iter().map(|p| scale * (r * p) + t).collect();
    let residuals: Vec<f64> = aligned.iter().zip(gt.iter()).map(|(a, g)| (a - g).norm()).collect();
    Ok((aligned, residuals))
}

/// Differentiable projection of a batch of world points `[n, 3]` through one
/// camera, producing pixel coordinates `[n, 2]` and camera-frame depths
/// `[n, 1]` on the tape. Depth validity is the caller's concern.
pub fn project_points_tape(
    tape: &mut Tape,
    coords: Var,
    camera: &Camera,
) -> Result<(Var, Var), DiffError> {
    use crate::diff::Array;
    let r = &camera.rotation;
    // x_cam = X @ R^T + t
    let r_t = Array::matrix(
        3,
        3,
        vec![
            r[(0, 0)], r[(1, 0)], r[(2, 0)],
            r[(0, 1)], r[(1, 1)], r[(2, 1)],
            r[(0, 2)], r[(1, 2)], r[(2, 2)],
        ],
    )?;
    let r_t = tape.constant(r_t);
    let t = tape.constant(Array::matrix(
        1,
        3,
        vec![camera.translation.x, camera.translation.y, camera.translation.z],
    )?);
    let t_row = tape.reshape(t, &[3])?;
    let cam_pts = tape.matmul(coords, r_t)?;
    let cam_pts = tape.add(cam_pts, t_row)?;

    let select_xy = tape.constant(Array::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0])?);
    let select_z = tape.constant(Array::matrix(3, 1, vec![0.0, 0.0, 1.0])?);
    let xy = tape.matmul(cam_pts, select_xy)?;
    let z = tape.matmul(cam_pts, select_z)?;

    let focal = tape.constant(Array::matrix(1, 2, vec![camera.fx, camera.fy])?);
    let focal = tape.reshape(focal, &[2])?;
    let center = tape.constant(Array::matrix(1, 2, vec![camera.cx, camera.cy])?);
    let center = tape.reshape(center, &[2])?;
    let scaled = tape.mul(xy, focal)?;
    let divided = tape.div(scaled, z)?;
    let uv = tape.add(divided, center)?;
    Ok((uv, z))
}
