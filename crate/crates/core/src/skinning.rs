//! Forward kinematics, dual-quaternion skinning and displacement warping.
//!
//! Pose derivatives are analytic: every pose parameter acts on the posed
//! skeleton as an instantaneous screw motion (angular velocity `ω` about a
//! world pivot `p`, or a pure translation), so the derivative of any point
//! rigidly attached below that parameter is `ω × (q − p)`, and the
//! derivative of a joint's dual quaternion is `½ ξ ⊗ q` for the twist `ξ`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion};
use rayon::prelude::*;

use crate::template::{Skeleton, SkinningWeights, DOF_COUNT, MARKER_COUNT};
use crate::{Error, Result, Vec3};

/// Length of the Stage I unknown vector.
pub const POSE_DIM: usize = 36;
pub const ROOT_ROTATION: usize = 0;
pub const ROOT_TRANSLATION: usize = 3;
pub const THETA: usize = 6;
pub const AUX_TRANSLATION: usize = THETA + DOF_COUNT;
/// Parameters that move the skeleton (everything but `t′`).
pub const KINEMATIC_DIM: usize = AUX_TRANSLATION;

/// Middle Euler angle closer than this to ±90° raises the gimbal flag.
const GIMBAL_COS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseParams {
    /// XYZ Euler angles, applied as `Rz · Ry · Rx`.
    pub root_rotation: Vec3,
    pub root_translation: Vec3,
    pub theta: Vec<f64>,
    pub aux_translation: Vec3,
}

impl Default for PoseParams {
    fn default() -> Self {
        PoseParams {
            root_rotation: Vec3::zeros(),
            root_translation: Vec3::zeros(),
            theta: vec![0.0; DOF_COUNT],
            aux_translation: Vec3::zeros(),
        }
    }
}

impl PoseParams {
    pub fn to_vector(&self) -> [f64; POSE_DIM] {
        let mut v = [0.0; POSE_DIM];
        v[ROOT_ROTATION..ROOT_ROTATION + 3].copy_from_slice(self.root_rotation.as_slice());
        v[ROOT_TRANSLATION..ROOT_TRANSLATION + 3].copy_from_slice(self.root_translation.as_slice());
        v[THETA..THETA + DOF_COUNT].copy_from_slice(&self.theta);
        v[AUX_TRANSLATION..].copy_from_slice(self.aux_translation.as_slice());
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != POSE_DIM {
            return Err(Error::Dimension(format!("pose vector has {} entries, expected {POSE_DIM}", v.len())));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("pose vector"));
        }
        let v3 = |i: usize| Vec3::new(v[i], v[i + 1], v[i + 2]);
        Ok(PoseParams {
            root_rotation: v3(ROOT_ROTATION),
            root_translation: v3(ROOT_TRANSLATION),
            theta: v[THETA..THETA + DOF_COUNT].to_vec(),
            aux_translation: v3(AUX_TRANSLATION),
        })
    }

    /// Clamps the joint angles into the skeleton's limits.
    pub fn clamp_to_limits(&mut self, skeleton: &Skeleton) {
        for (t, d) in self.theta.iter_mut().zip(&skeleton.dofs) {
            *t = t.clamp(d.min, d.max);
        }
    }
}

/// One pose per line, 36 whitespace-separated values.
pub fn poses_to_text(poses: &[PoseParams]) -> String {
    let mut s = String::new();
    for p in poses {
        let v = p.to_vector();
        let line: Vec<String> = v.iter().map(|x| format!("{x:.17e}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<PoseParams>> {
    crate::template::data_lines(text)
        .map(|(line, l)| {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(path, line, format!("{e}")))?;
            PoseParams::from_slice(&v).map_err(|e| Error::parse(path, line, e.to_string()))
        })
        .collect()
}

pub fn euler_matrix(e: &Vec3) -> Matrix3<f64> {
    let rx = Rotation3::from_axis_angle(&Vec3::x_axis(), e.x);
    let ry = Rotation3::from_axis_angle(&Vec3::y_axis(), e.y);
    let rz = Rotation3::from_axis_angle(&Vec3::z_axis(), e.z);
    (rz * ry * rx).into_inner()
}

fn axis_rotation(axis: &Vec3, angle: f64) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(axis * angle).into_inner()
}

/// Instantaneous screw motion of one pose parameter: a point `q` moves with
/// velocity `ω × q + v`.
#[derive(Clone, Copy, Debug)]
pub struct Twist {
    pub omega: Vec3,
    pub v: Vec3,
}

impl Twist {
    #[inline]
    pub fn velocity(&self, q: &Vec3) -> Vec3 {
        self.omega.cross(q) + self.v
    }

    fn rotation_about(omega: Vec3, pivot: &Vec3) -> Self {
        Twist {
            omega,
            v: pivot.cross(&omega),
        }
    }
}

#[derive(Clone, Debug)]
pub struct JointTransforms {
    /// Global joint frame rotations.
    pub rotations: Vec<Matrix3<f64>>,
    /// Global joint positions.
    pub positions: Vec<Vec3>,
    pub markers: [Vec3; MARKER_COUNT],
    /// Twist of every kinematic parameter (`KINEMATIC_DIM` entries).
    pub twists: Vec<Twist>,
    /// Rest-pose joint positions, kept for skinning.
    pub rest_positions: Vec<Vec3>,
    /// Root middle Euler angle near ±90°.
    pub gimbal_warning: bool,
}

pub fn forward_kinematics(skeleton: &Skeleton, pose: &PoseParams) -> JointTransforms {
    debug_assert_eq!(pose.theta.len(), DOF_COUNT);
    let nj = skeleton.joint_count();
    let mut rotations = Vec::with_capacity(nj);
    let mut positions = Vec::with_capacity(nj);
    let mut twists = vec![
        Twist {
            omega: Vec3::zeros(),
            v: Vec3::zeros()
        };
        KINEMATIC_DIM
    ];

    let e = pose.root_rotation;
    let root_pos = skeleton.joints[0].offset + pose.root_translation;
    let rz = axis_rotation(&Vec3::z(), e.z);
    let ry = axis_rotation(&Vec3::y(), e.y);
    let root_axes = [rz * ry * Vec3::x(), rz * Vec3::y(), Vec3::z()];
    for (i, w) in root_axes.iter().enumerate() {
        twists[ROOT_ROTATION + i] = Twist::rotation_about(*w, &root_pos);
        twists[ROOT_TRANSLATION + i] = Twist {
            omega: Vec3::zeros(),
            v: Vec3::ith(i, 1.0),
        };
    }

    for (j, joint) in skeleton.joints.iter().enumerate() {
        let (mut r, p) = match joint.parent {
            None => (euler_matrix(&e), root_pos),
            Some(q) => (rotations[q], positions[q] + rotations[q] * joint.offset),
        };
        for &k in skeleton.joint_dofs(j) {
            let dof = &skeleton.dofs[k];
            twists[THETA + k] = Twist::rotation_about(r * dof.axis, &p);
            r *= axis_rotation(&dof.axis, pose.theta[k]);
        }
        rotations.push(r);
        positions.push(p);
    }
    let h = skeleton.head;
    let markers = skeleton.marker_offsets.map(|m| positions[h] + rotations[h] * m);
    JointTransforms {
        rotations,
        positions,
        markers,
        twists,
        rest_positions: skeleton.rest_positions(),
        gimbal_warning: e.y.cos().abs() < GIMBAL_COS,
    }
}

/// Parameters (indices into `0..KINEMATIC_DIM`) that move points attached
/// to `joint`: the root's six plus the angles of the joint and its ancestors.
pub fn influencing_parameters(skeleton: &Skeleton, joint: usize) -> Vec<usize> {
    let mut params: Vec<usize> = (0..THETA).collect();
    let mut j = Some(joint);
    while let Some(k) = j {
        params.extend(skeleton.joint_dofs(k).iter().map(|d| THETA + d));
        j = skeleton.joints[k].parent;
    }
    params.sort_unstable();
    params
}

impl JointTransforms {
    /// Derivatives of the point `q`, rigidly attached to `joint`, with
    /// respect to all kinematic parameters.
    pub fn point_jacobian(&self, params: &[usize], q: &Vec3) -> [Vec3; KINEMATIC_DIM] {
        let mut d = [Vec3::zeros(); KINEMATIC_DIM];
        for &k in params {
            d[k] = self.twists[k].velocity(q);
        }
        d
    }

    /// Unit dual quaternions mapping rest-pose points to posed points.
    pub fn skinning_pose(&self) -> DualQuaternionPose {
        let joints = self
            .rotations
            .iter()
            .zip(&self.positions)
            .zip(&self.rest_positions)
            .map(|((r, p), p0)| {
                let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
                DualQuat::from_rigid(&rot, &(p - rot * p0))
            })
            .collect();
        DualQuaternionPose { joints }
    }
}

/// `real + ε dual`; unit when `|real| = 1` and `real · dual = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualQuat {
    pub real: Quaternion<f64>,
    pub dual: Quaternion<f64>,
}

#[inline]
fn pure(v: &Vec3) -> Quaternion<f64> {
    Quaternion::from_imag(*v)
}

#[inline]
fn qdot(a: &Quaternion<f64>, b: &Quaternion<f64>) -> f64 {
    a.coords.dot(&b.coords)
}

impl DualQuat {
    pub fn identity() -> Self {
        DualQuat {
            real: Quaternion::identity(),
            dual: Quaternion::new(0.0, 0.0, 0.0, 0.0),
        }
    }

    pub fn zero() -> Self {
        let z = Quaternion::new(0.0, 0.0, 0.0, 0.0);
        DualQuat { real: z, dual: z }
    }

    /// `x ↦ r x + t`.
    pub fn from_rigid(r: &UnitQuaternion<f64>, t: &Vec3) -> Self {
        let real = *r.quaternion();
        DualQuat {
            real,
            dual: pure(t) * real * 0.5,
        }
    }

    pub fn mul(&self, o: &DualQuat) -> DualQuat {
        DualQuat {
            real: self.real * o.real,
            dual: self.real * o.dual + self.dual * o.real,
        }
    }

    pub fn scaled(&self, s: f64) -> DualQuat {
        DualQuat {
            real: self.real * s,
            dual: self.dual * s,
        }
    }

    pub fn add_assign(&mut self, o: &DualQuat) {
        self.real += o.real;
        self.dual += o.dual;
    }

    /// Derivative of `self` under a world-frame twist: `½ ξ ⊗ self`.
    pub fn twist_derivative(&self, t: &Twist) -> DualQuat {
        let w = pure(&t.omega);
        let v = pure(&t.v);
        DualQuat {
            real: w * self.real * 0.5,
            dual: (w * self.dual + v * self.real) * 0.5,
        }
    }

    /// Deviation from the unit constraints: `(|real| − 1, real · dual)`.
    pub fn unit_residual(&self) -> (f64, f64) {
        (self.real.norm() - 1.0, qdot(&self.real, &self.dual))
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(self.real)
    }

    pub fn translation(&self) -> Vec3 {
        let n2 = self.real.norm_squared();
        (self.dual * self.real.conjugate()).imag() * (2.0 / n2)
    }

    /// Applies the normalized blend to a point. Exact for non-unit `self`
    /// (both numerator terms scale with `|real|²`).
    pub fn transform_point(&self, v: &Vec3) -> Vec3 {
        let (w, x) = (self.real.w, self.real.imag());
        let (dw, dv) = (self.dual.w, self.dual.imag());
        let n2 = w * w + x.norm_squared();
        let a = v * (w * w - x.norm_squared()) + x * (2.0 * x.dot(v)) + x.cross(v) * (2.0 * w);
        let b = (dv * w - x * dw + x.cross(&dv)) * 2.0;
        (a + b) / n2
    }

    /// Directional derivative of [`transform_point`](Self::transform_point)
    /// along `d` (a perturbation of the blend), rest point held fixed.
    pub fn transform_point_derivative(&self, d: &DualQuat, v: &Vec3) -> Vec3 {
        let (w, x) = (self.real.w, self.real.imag());
        let (dw, dv) = (self.dual.w, self.dual.imag());
        let (w_, x_) = (d.real.w, d.real.imag());
        let (dw_, dv_) = (d.dual.w, d.dual.imag());
        let n2 = w * w + x.norm_squared();
        let dn2 = 2.0 * (w * w_ + x.dot(&x_));
        let a = v * (w * w - x.norm_squared()) + x * (2.0 * x.dot(v)) + x.cross(v) * (2.0 * w);
        let b = (dv * w - x * dw + x.cross(&dv)) * 2.0;
        let da = v * dn2 - v * (4.0 * x.dot(&x_)) + x_ * (2.0 * x.dot(v)) + x * (2.0 * x_.dot(v))
            + x_.cross(v) * (2.0 * w)
            + x.cross(v) * (2.0 * w_);
        let db = (dv_ * w + dv * w_ - x_ * dw - x * dw_ + x_.cross(&dv) + x.cross(&dv_)) * 2.0;
        (da + db) / n2 - (a + b) * (dn2 / (n2 * n2))
    }

    /// Rotation-only action on a direction vector.
    pub fn rotate_vector(&self, v: &Vec3) -> Vec3 {
        let (w, x) = (self.real.w, self.real.imag());
        let n2 = w * w + x.norm_squared();
        (v * (w * w - x.norm_squared()) + x * (2.0 * x.dot(v)) + x.cross(v) * (2.0 * w)) / n2
    }

    /// Inverse of [`rotate_vector`](Self::rotate_vector).
    pub fn inverse_rotate_vector(&self, v: &Vec3) -> Vec3 {
        let c = DualQuat {
            real: self.real.conjugate(),
            dual: self.dual,
        };
        c.rotate_vector(v)
    }
}

#[derive(Clone, Debug)]
pub struct DualQuaternionPose {
    pub joints: Vec<DualQuat>,
}

/// Result of blending one vertex's joint dual quaternions.
#[derive(Clone, Copy, Debug)]
pub struct Blend {
    pub dq: DualQuat,
    /// Sign applied to each influence for hemisphere consistency.
    pub signs: [f64; crate::template::MAX_INFLUENCES],
    /// The blend cancelled and the dominant joint was used instead.
    pub degenerate: bool,
}

/// Sign-consistent weighted blend, aligned with the dominant joint.
pub fn blend(influences: &[(usize, f64)], pose: &DualQuaternionPose) -> Blend {
    let mut dom = 0;
    for (i, &(j, w)) in influences.iter().enumerate() {
        let (dj, dw) = influences[dom];
        if w > dw || (w == dw && j < dj) {
            dom = i;
        }
    }
    let pivot = pose.joints[influences[dom].0].real;
    let mut signs = [1.0; crate::template::MAX_INFLUENCES];
    let mut b = DualQuat::zero();
    for (i, &(j, w)) in influences.iter().enumerate() {
        let q = &pose.joints[j];
        if qdot(&q.real, &pivot) < 0.0 {
            signs[i] = -1.0;
        }
        b.add_assign(&q.scaled(w * signs[i]));
    }
    if b.real.norm() < 1e-12 {
        return Blend {
            dq: pose.joints[influences[dom].0],
            signs,
            degenerate: true,
        };
    }
    Blend {
        dq: b,
        signs,
        degenerate: false,
    }
}

#[derive(Clone, Debug)]
pub struct SkinnedMesh {
    pub positions: Vec<Vec3>,
    /// Vertices whose blend cancelled (dominant-joint fallback).
    pub degenerate: Vec<usize>,
}

/// Dual-quaternion skinning of `rest` points (usually `V̂`, or `V̂ + d̂`).
pub fn dq_skin(rest: &[Vec3], weights: &SkinningWeights, pose: &DualQuaternionPose) -> SkinnedMesh {
    let out: Vec<(Vec3, bool)> = rest
        .par_iter()
        .zip(&weights.influences)
        .map(|(v, inf)| {
            let b = blend(inf, pose);
            (b.dq.transform_point(v), b.degenerate)
        })
        .collect();
    SkinnedMesh {
        degenerate: out.iter().enumerate().filter(|(_, o)| o.1).map(|(i, _)| i).collect(),
        positions: out.into_iter().map(|o| o.0).collect(),
    }
}

/// Skinned position of one vertex and its derivatives with respect to all
/// kinematic parameters. `params` lists the union of parameters affecting
/// the vertex's influences (others are left zero).
pub fn skinned_vertex_jacobian(
    rest: &Vec3,
    influences: &[(usize, f64)],
    transforms: &JointTransforms,
    pose: &DualQuaternionPose,
    joint_params: &[Vec<usize>],
) -> (Vec3, [Vec3; KINEMATIC_DIM]) {
    let b = blend(influences, pose);
    let mut jac = [Vec3::zeros(); KINEMATIC_DIM];
    if b.degenerate {
        // Rigid motion with the dominant joint.
        let (dom, _) = influences
            .iter()
            .copied()
            .fold((usize::MAX, f64::NEG_INFINITY), |a, (j, w)| if w > a.1 { (j, w) } else { a });
        let q = b.dq.transform_point(rest);
        for &k in &joint_params[dom] {
            jac[k] = transforms.twists[k].velocity(&q);
        }
        return (q, jac);
    }
    let mut touched = [false; KINEMATIC_DIM];
    for &(j, _) in influences {
        for &k in &joint_params[j] {
            touched[k] = true;
        }
    }
    for k in (0..KINEMATIC_DIM).filter(|&k| touched[k]) {
        let t = &transforms.twists[k];
        let mut db = DualQuat::zero();
        for (i, &(j, w)) in influences.iter().enumerate() {
            if joint_params[j].binary_search(&k).is_ok() {
                db.add_assign(&pose.joints[j].twist_derivative(t).scaled(w * b.signs[i]));
            }
        }
        jac[k] = b.dq.transform_point_derivative(&db, rest);
    }
    (b.dq.transform_point(rest), jac)
}

/// Transports per-vertex displacements from the previous pose to the new
/// one: rotate back to the rest pose with the previous blended rotation,
/// then forward with the new one. Translations are not applied.
pub fn warp_displacements(
    prev_displacements: &[Vec3],
    weights: &SkinningWeights,
    prev_pose: &DualQuaternionPose,
    new_pose: &DualQuaternionPose,
) -> Vec<Vec3> {
    prev_displacements
        .par_iter()
        .zip(&weights.influences)
        .map(|(d, inf)| {
            let rest = blend(inf, prev_pose).dq.inverse_rotate_vector(d);
            blend(inf, new_pose).dq.rotate_vector(&rest)
        })
        .collect()
}

/// Displacements expressed in the rest pose (the first half of the warp).
pub fn unpose_displacements(displacements: &[Vec3], weights: &SkinningWeights, pose: &DualQuaternionPose) -> Vec<Vec3> {
    displacements
        .par_iter()
        .zip(&weights.influences)
        .map(|(d, inf)| blend(inf, pose).dq.inverse_rotate_vector(d))
        .collect()
}
