//! Canonical Gaussian scene representation and pinhole camera geometry.

mod io;

pub use io::{read_scene, write_scene, SCENE_FORMAT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{self, Mat3, Quat, Vec3};

/// Number of colour coefficients per Gaussian: 3 DC + 9 degree-one.
pub const SH_COEFFS: usize = 12;

/// Near plane for culling; keeps the projection Jacobian finite.
pub const NEAR_PLANE: f64 = 0.01;

/// Screen-space covariance dilation in pixels².
pub const COV2D_DILATION: f64 = 0.3;

const UNIT_QUAT_TOL: f64 = 1e-6;

/// One scene primitive. Scale and opacity are stored unconstrained
/// (log and logit) and mapped on read.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalGaussian {
    pub mu: Vec3,
    pub rot: Quat,
    pub log_scale: Vec3,
    pub logit_opacity: f64,
    pub sh: [f64; SH_COEFFS],
}

impl CanonicalGaussian {
    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        math::sigmoid(self.logit_opacity)
    }

    pub fn covariance(&self) -> Result<Mat3> {
        covariance_from_rotation_scale(self.rot, self.scale())
    }
}

/// Σ = R·diag(s)²·Rᵀ for a unit quaternion.
pub fn covariance_from_rotation_scale(rot: Quat, scale: Vec3) -> Result<Mat3> {
    let n = math::quat_norm(rot);
    if !((n - 1.0).abs() <= UNIT_QUAT_TOL) {
        return Err(Error::invalid(format!("quaternion norm {n} is not unit")));
    }
    if scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("scale components must be positive"));
    }
    Ok(covariance_unchecked(rot, scale))
}

pub(crate) fn covariance_unchecked(rot: Quat, scale: Vec3) -> Mat3 {
    let r = math::quat_to_mat(rot);
    let s2 = [scale[0] * scale[0], scale[1] * scale[1], scale[2] * scale[2]];
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let v = r[i][0] * s2[0] * r[j][0] + r[i][1] * s2[1] * r[j][1] + r[i][2] * s2[2] * r[j][2];
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    out
}

/// Pinhole camera: x_cam = R·x_world + t, +z looks forward, +y down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        rotation: Mat3,
        translation: Vec3,
        focal: [f64; 2],
        principal: [f64; 2],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            rotation,
            translation,
            focal,
            principal,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = math::normalize(math::sub(target, eye));
        let right = math::normalize(math::cross(forward, up));
        if math::norm(right) < 0.5 {
            return Err(Error::invalid("look_at: up is parallel to the view direction"));
        }
        // Camera y points down in the image.
        let down = math::cross(forward, right);
        let rotation = [right, down, forward];
        let translation = math::scale(math::mat_vec(&rotation, eye), -1.0);
        Self::new(
            rotation,
            translation,
            [focal, focal],
            [width as f64 / 2.0, height as f64 / 2.0],
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera size must be positive"));
        }
        let rtr = math::mat_mul(&math::transpose(&self.rotation), &self.rotation);
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if !((v - want).abs() <= 1e-6) {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        math::add(math::mat_vec(&self.rotation, p), self.translation)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        math::scale(math::mat_t_vec(&self.rotation, self.translation), -1.0)
    }
}

/// A Gaussian projected to the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub mu2d: [f64; 2],
    /// Symmetric 2×2 covariance as `[a, b, c]` for `[[a, b], [b, c]]`.
    pub cov2d: [f64; 3],
    pub depth: f64,
}

/// Projects a (possibly deformed) Gaussian. `None` means culled: the
/// centre is not in front of the near plane.
pub fn project_gaussian(mu: Vec3, cov: &Mat3, cam: &Camera) -> Option<Projected> {
    let t = cam.world_to_camera(mu);
    if !(t[2] > NEAR_PLANE) {
        return None;
    }
    let [fx, fy] = cam.focal;
    let inv_z = 1.0 / t[2];
    let mu2d = [
        fx * t[0] * inv_z + cam.principal[0],
        fy * t[1] * inv_z + cam.principal[1],
    ];
    let j = [
        [fx * inv_z, 0.0, -fx * t[0] * inv_z * inv_z],
        [0.0, fy * inv_z, -fy * t[1] * inv_z * inv_z],
    ];
    let w = &cam.rotation;
    // Σ_cam = W Σ Wᵀ
    let sigma_cam = math::mat_mul(&math::mat_mul(w, cov), &math::transpose(w));
    // cov2d = J Σ_cam Jᵀ
    let mut js = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            js[r][c] = j[r][0] * sigma_cam[0][c] + j[r][1] * sigma_cam[1][c] + j[r][2] * sigma_cam[2][c];
        }
    }
    let dot_row = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let a = dot_row(&js[0], &j[0]) + COV2D_DILATION;
    let b = dot_row(&js[0], &j[1]);
    let c = dot_row(&js[1], &j[1]) + COV2D_DILATION;
    Some(Projected {
        mu2d,
        cov2d: [a, b, c],
        depth: t[2],
    })
}

/// One observation: camera, normalized time and pixels.
#[derive(Clone, Debug)]
pub struct Frame {
    pub camera: Camera,
    pub time: f64,
    pub pixels: Image,
}
