//! Anchor-driven deformation.
//!
//! Every anchor carries a confidence α (the filter), an induced scene flow
//! and a rigid transform predicted from a temporally aggregated feature.
//! Transforms reach the Gaussians through normalized kernel weights over
//! each Gaussian's K nearest anchors. Levels above the base refine the
//! output of the level below; their contributions are fused with
//! per-level softmax weights.
//!
//! The forward pass is written once against the autodiff [`Tape`] and the
//! single-anchor helpers below are thin wrappers over it.

mod model;

pub use model::{
    AnchorMeta, DeformConfig, Deformed, ForwardOptions, GaussianBlocks, Level, Model, NetConfig,
};

use serde::{Deserialize, Serialize};

use crate::math::{self, Quat, Vec3};
use crate::scene::CanonicalGaussian;

/// Upper bound on the rotation angle of an anchor transform.
pub const MAX_ANGLE: f64 = std::f64::consts::PI - 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Transforms scaled by α.
    Soft,
    /// Anchors below the threshold contribute the identity.
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionAnchor {
    pub x: Vec3,
    pub log_rho: f64,
    pub layer: usize,
    pub parent: Option<usize>,
    pub alpha: f64,
}

impl MotionAnchor {
    pub fn rho(&self) -> f64 {
        self.log_rho.exp()
    }
}

/// Translation and axis-angle rotation of one anchor at one time.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AnchorTransform {
    pub dt: Vec3,
    pub dr: Vec3,
}

impl AnchorTransform {
    pub const IDENTITY: Self = Self {
        dt: [0.0; 3],
        dr: [0.0; 3],
    };
}

/// Displacement of an anchor toward the previous (`back`) and next
/// (`fwd`) frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InducedFlow {
    pub back: Vec3,
    pub fwd: Vec3,
}

/// Blends neighbouring anchor transforms onto one Gaussian.
///
/// The position is `μ + Σω·((R−I)(μ−x) + ΔT)`, algebraically the same as
/// `Σω·(R(μ−x) + x + ΔT)` when the weights sum to one but exact for the
/// identity. The rotation is the normalized, hemisphere-aligned weighted
/// quaternion sum composed with the Gaussian's own rotation; a degenerate
/// sum leaves the rotation unchanged.
pub fn blend_gaussian(g: &CanonicalGaussian, neighbors: &[(Vec3, AnchorTransform, f64)]) -> (Vec3, Quat) {
    let mut disp = [0.0; 3];
    let mut qsum = [0.0; 4];
    let mut first: Option<Quat> = None;
    for (x, tr, w) in neighbors {
        let r = math::axis_angle_to_mat(tr.dr);
        let d = math::sub(g.mu, *x);
        let rd = math::mat_vec(&r, d);
        let term = math::add(math::sub(rd, d), tr.dt);
        disp = math::add(disp, math::scale(term, *w));
        let mut q = math::axis_angle_to_quat(tr.dr);
        let reference = *first.get_or_insert(q);
        if math::quat_dot(q, reference) < 0.0 {
            q = q.map(|c| -c);
        }
        for c in 0..4 {
            qsum[c] += w * q[c];
        }
    }
    let position = math::add(g.mu, disp);
    let n = math::quat_norm(qsum);
    let rotation = if n < 1e-8 {
        g.rot
    } else {
        math::quat_mul(qsum.map(|c| c / n), g.rot)
    };
    (position, rotation)
}

#[cfg(test)]
mod tests;
