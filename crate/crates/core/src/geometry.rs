//! Pinhole camera geometry: world/camera transforms, projection in normalized
//! image coordinates, the analytic 2x3 projection Jacobian, and the
//! observability measure sigma_min (smaller singular value of the Jacobian).
//!
//! Jacobians are reported w.r.t. camera-frame coordinates; the world-frame
//! variant is `J * R`. Singular values are invariant under that rotation, so
//! sigma_min can be computed in either frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Depth below which a projection is considered degenerate.
pub const Z_NEAR: f64 = 1e-3;

pub type Vec3<S> = [S; 3];
pub type Mat3<S> = [[S; 3]; 3];
/// 2x3 Jacobian of normalized (u, v) w.r.t. a 3D point, units 1/m.
pub type Jacobian<S> = [[S; 3]; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel<S> {
    /// Focal lengths in pixels.
    pub fx: S,
    pub fy: S,
    /// Principal point in pixels.
    pub cx: S,
    pub cy: S,
    /// Image dimensions in pixels.
    pub width: u32,
    pub height: u32,
    /// World-to-camera rotation (row-major) and translation (meters).
    pub rotation: Mat3<S>,
    pub translation: Vec3<S>,
}

impl<S: Scalar> CameraModel<S> {
    pub fn new(
        fx: S,
        fy: S,
        cx: S,
        cy: S,
        width: u32,
        height: u32,
        rotation: Mat3<S>,
        translation: Vec3<S>,
    ) -> Result<Self> {
        if !(fx > S::zero() && fy > S::zero()) {
            return Err(Error::InvalidCamera(format!("focal lengths must be positive, got fx={fx}, fy={fy}")));
        }
        if width < 1 || height < 1 {
            return Err(Error::InvalidCamera(format!("image dims must be >= 1, got {width}x{height}")));
        }
        let ortho = orthonormality_defect(&rotation);
        if ortho >= S::c(1e-10) {
            return Err(Error::InvalidCamera(format!("rotation not orthonormal, |R^T R - I|_inf = {ortho}")));
        }
        if det3(&rotation) < S::zero() {
            return Err(Error::InvalidCamera("rotation has negative determinant".into()));
        }
        Ok(Self { fx, fy, cx, cy, width, height, rotation, translation })
    }

    /// Identity extrinsics, useful for tests and single-camera setups.
    pub fn identity_extrinsics(fx: S, fy: S, cx: S, cy: S, width: u32, height: u32) -> Result<Self> {
        Self::new(fx, fy, cx, cy, width, height, mat3_identity(), [S::zero(); 3])
    }

    #[inline]
    pub fn w(&self) -> S {
        S::c(self.width as f64)
    }

    #[inline]
    pub fn h(&self) -> S {
        S::c(self.height as f64)
    }

    /// Camera center in world coordinates: -R^T t.
    pub fn center_world(&self) -> Vec3<S> {
        let rt_t = mat3_t_mul_vec(&self.rotation, &self.translation);
        [-rt_t[0], -rt_t[1], -rt_t[2]]
    }

    /// World-frame Jacobian at a camera-frame point: J_cam * R.
    pub fn world_jacobian(&self, p_cam: &Vec3<S>) -> Result<Jacobian<S>> {
        let j = projection_jacobian(p_cam, self)?;
        Ok(jacobian_mul_mat3(&j, &self.rotation))
    }
}

/// Result of projecting one camera-frame point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionResult<S> {
    /// Normalized image coordinates (pixel coordinate divided by W resp. H).
    pub u: S,
    pub v: S,
    /// Camera-frame depth in meters.
    pub depth: S,
    /// 2x3 Jacobian of (u, v) w.r.t. camera-frame coordinates; zeroed when invalid.
    pub jacobian: Jacobian<S>,
    /// Smaller singular value of the Jacobian; zero when invalid.
    pub sigma_min: S,
    /// Z > Z_NEAR and (u, v) inside the unit square.
    pub valid: bool,
}

pub fn world_to_camera<S: Scalar>(p_world: &Vec3<S>, cam: &CameraModel<S>) -> Vec3<S> {
    let r = &cam.rotation;
    let t = &cam.translation;
    [
        r[0][0] * p_world[0] + r[0][1] * p_world[1] + r[0][2] * p_world[2] + t[0],
        r[1][0] * p_world[0] + r[1][1] * p_world[1] + r[1][2] * p_world[2] + t[1],
        r[2][0] * p_world[0] + r[2][1] * p_world[1] + r[2][2] * p_world[2] + t[2],
    ]
}

/// Pinhole projection of a camera-frame point into normalized image
/// coordinates. Points behind the camera or outside the unit square are
/// flagged invalid rather than reported as an error.
pub fn project<S: Scalar>(p_cam: &Vec3<S>, cam: &CameraModel<S>) -> ProjectionResult<S> {
    let z_near = S::c(Z_NEAR);
    let (x, y, z) = (p_cam[0], p_cam[1], p_cam[2]);
    if z <= z_near {
        return ProjectionResult {
            u: S::zero(),
            v: S::zero(),
            depth: z,
            jacobian: [[S::zero(); 3]; 2],
            sigma_min: S::zero(),
            valid: false,
        };
    }
    let u = (cam.fx * x / z + cam.cx) / cam.w();
    let v = (cam.fy * y / z + cam.cy) / cam.h();
    let jacobian = projection_jacobian(p_cam, cam).expect("z > z_near checked above");
    let sig = sigma_min(&jacobian);
    let one = S::one();
    let in_bounds = u >= S::zero() && u <= one && v >= S::zero() && v <= one;
    ProjectionResult { u, v, depth: z, jacobian, sigma_min: sig, valid: in_bounds }
}

/// Analytic Jacobian of normalized (u, v) w.r.t. camera-frame (X, Y, Z).
pub fn projection_jacobian<S: Scalar>(p_cam: &Vec3<S>, cam: &CameraModel<S>) -> Result<Jacobian<S>> {
    let (x, y, z) = (p_cam[0], p_cam[1], p_cam[2]);
    if z <= S::c(Z_NEAR) {
        return Err(Error::DegenerateDepth { z: z.f64(), z_near: Z_NEAR });
    }
    let zz = z * z;
    let fx_w = cam.fx / cam.w();
    let fy_h = cam.fy / cam.h();
    Ok([
        [fx_w / z, S::zero(), -fx_w * x / zz],
        [S::zero(), fy_h / z, -fy_h * y / zz],
    ])
}

/// Smaller singular value of a 2x3 matrix, in closed form from the 2x2 Gram
/// matrix J J^T. Returns 0 for rank-deficient inputs.
pub fn sigma_min<S: Scalar>(j: &Jacobian<S>) -> S {
    let dot = |a: &[S; 3], b: &[S; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let a = dot(&j[0], &j[0]);
    let b = dot(&j[0], &j[1]);
    let c = dot(&j[1], &j[1]);
    // Eigenvalues of [[a, b], [b, c]]: ((a+c) +- sqrt((a-c)^2 + 4 b^2)) / 2.
    let half = S::c(0.5);
    let diff = a - c;
    let disc = (diff * diff + S::c(4.0) * b * b).sqrt();
    let lam_min = ((a + c) - disc) * half;
    if lam_min <= S::zero() {
        S::zero()
    } else {
        lam_min.sqrt()
    }
}

/// Inverse of `project` at a known depth: normalized (u, v) and Z back to the
/// camera frame.
pub fn unproject<S: Scalar>(u: S, v: S, depth: S, cam: &CameraModel<S>) -> Vec3<S> {
    let x = (u * cam.w() - cam.cx) * depth / cam.fx;
    let y = (v * cam.h() - cam.cy) * depth / cam.fy;
    [x, y, depth]
}

pub fn mat3_identity<S: Scalar>() -> Mat3<S> {
    let (o, z) = (S::one(), S::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

/// Rotation about an arbitrary axis (Rodrigues), angle in radians.
pub fn rotation_axis_angle<S: Scalar>(axis: &Vec3<S>, angle: S) -> Mat3<S> {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (ux, uy, uz) = (axis[0] / n, axis[1] / n, axis[2] / n);
    let (c, s) = (angle.cos(), angle.sin());
    let ic = S::one() - c;
    [
        [c + ux * ux * ic, ux * uy * ic - uz * s, ux * uz * ic + uy * s],
        [uy * ux * ic + uz * s, c + uy * uy * ic, uy * uz * ic - ux * s],
        [uz * ux * ic - uy * s, uz * uy * ic + ux * s, c + uz * uz * ic],
    ]
}

pub fn mat3_mul<S: Scalar>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_mul_vec<S: Scalar>(m: &Mat3<S>, v: &Vec3<S>) -> Vec3<S> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat3_t_mul_vec<S: Scalar>(m: &Mat3<S>, v: &Vec3<S>) -> Vec3<S> {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn jacobian_mul_mat3<S: Scalar>(j: &Jacobian<S>, m: &Mat3<S>) -> Jacobian<S> {
    let mut out = [[S::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            out[r][c] = j[r][0] * m[0][c] + j[r][1] * m[1][c] + j[r][2] * m[2][c];
        }
    }
    out
}

fn det3<S: Scalar>(m: &Mat3<S>) -> S {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn orthonormality_defect<S: Scalar>(m: &Mat3<S>) -> S {
    let mut worst = S::zero();
    for i in 0..3 {
        for j in 0..3 {
            let dot = m[0][i] * m[0][j] + m[1][i] * m[1][j] + m[2][i] * m[2][j];
            let target = if i == j { S::one() } else { S::zero() };
            let d = (dot - target).abs();
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}
