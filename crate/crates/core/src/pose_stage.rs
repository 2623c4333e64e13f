//! Stage I: skeletal pose from 2D/3D joint detections and the silhouette,
//! by dense Gauss-Newton over the 36-vector `[R, t, θ, t′]`.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::imageproc::{dt_gradient, sample_scalar, DistanceTransformImage, ForegroundMask};
use crate::raster;
use crate::reduce::Reduction;
use crate::report::SolveReport;
use crate::skinning::{
    forward_kinematics, influencing_parameters, skinned_vertex_jacobian, JointTransforms, PoseParams,
    AUX_TRANSLATION, KINEMATIC_DIM, POSE_DIM, THETA,
};
use crate::solvers::{dense_normal_equations, dense_solve};
use crate::template::{face_normal, Actor, JointKind, Skeleton, TemplateMesh, MARKER_COUNT};
use crate::{Error, Result, Vec2, Vec3};

/// 3D and temporal residuals are measured in millimeters, 2D ones in pixels.
pub const MM_PER_M: f64 = 1000.0;

/// Per-frame joint detections. `joints2d` holds the J joints followed by
/// the four face landmarks; `joints3d` is root-relative and only known up
/// to scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame: usize,
    pub joints2d: Vec<[f64; 2]>,
    pub joints3d: Vec<[f64; 3]>,
    pub valid2d: Vec<bool>,
    pub valid3d: Vec<bool>,
}

impl FrameDetections {
    pub fn validate(&self, joint_count: usize) -> Result<()> {
        let n2 = joint_count + MARKER_COUNT;
        if self.joints2d.len() != n2 || self.valid2d.len() != n2 {
            return Err(Error::Frame {
                index: self.frame,
                msg: format!("expected {n2} 2D detections"),
            });
        }
        if self.joints3d.len() != joint_count || self.valid3d.len() != joint_count {
            return Err(Error::Frame {
                index: self.frame,
                msg: format!("expected {joint_count} 3D detections"),
            });
        }
        let finite = |ok: bool, v: &[f64]| !ok || v.iter().all(|x| x.is_finite());
        if !self.joints2d.iter().zip(&self.valid2d).all(|(p, &ok)| finite(ok, p))
            || !self.joints3d.iter().zip(&self.valid3d).all(|(p, &ok)| finite(ok, p))
        {
            return Err(Error::NonFinite("detections"));
        }
        Ok(())
    }

    pub fn point2d(&self, i: usize) -> Vec2 {
        Vec2::new(self.joints2d[i][0], self.joints2d[i][1])
    }

    pub fn point3d(&self, i: usize) -> Vec3 {
        Vec3::new(self.joints3d[i][0], self.joints3d[i][1], self.joints3d[i][2])
    }
}

/// Detections as JSON lines, one record per frame.
pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<FrameDetections>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}

pub fn detections_to_text(frames: &[FrameDetections]) -> String {
    frames
        .iter()
        .map(|f| serde_json::to_string(f).expect("plain data serializes") + "\n")
        .collect()
}

/// Per-joint temporal smoothness weights by joint category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalWeights {
    pub torso: f64,
    pub head: f64,
    pub shoulder: f64,
    pub elbow: f64,
    pub knee: f64,
    pub hand: f64,
    pub foot: f64,
}

impl Default for TemporalWeights {
    fn default() -> Self {
        TemporalWeights {
            torso: 2.5,
            head: 2.5,
            shoulder: 2.0,
            elbow: 1.5,
            knee: 1.5,
            hand: 1.0,
            foot: 1.0,
        }
    }
}

impl TemporalWeights {
    pub fn of(&self, kind: JointKind) -> f64 {
        match kind {
            JointKind::Torso => self.torso,
            JointKind::Head => self.head,
            JointKind::Shoulder => self.shoulder,
            JointKind::Elbow => self.elbow,
            JointKind::Knee => self.knee,
            JointKind::Hand => self.hand,
            JointKind::Foot => self.foot,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseHyperparams {
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    pub lambda_silhouette: f64,
    pub lambda_temporal: f64,
    pub lambda_anatomic: f64,
    /// Per-detection weight of the four face landmarks.
    pub face_weight: f64,
    /// Per-detection weight of body joints.
    pub joint_weight: f64,
    pub temporal_weights: TemporalWeights,
    pub iterations: usize,
    pub max_step_halvings: usize,
}

impl Default for PoseHyperparams {
    fn default() -> Self {
        PoseHyperparams {
            lambda_2d: 460.0,
            lambda_3d: 28.0,
            lambda_silhouette: 200.0,
            lambda_temporal: 1.5,
            lambda_anatomic: 1e6,
            face_weight: 0.326,
            joint_weight: 1.0,
            temporal_weights: TemporalWeights::default(),
            iterations: 6,
            max_step_halvings: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RescaledDetections {
    pub positions: Vec<Vec3>,
    /// Joints whose bone direction was undefined (zero length or invalid
    /// detection) and fell back to the skeleton's rest direction.
    pub fallback: Vec<usize>,
}

/// Keeps each detected bone direction and replaces its length by the
/// skeleton's, traversing from the root outward.
pub fn rescale_detections(joints3d: &[Vec3], valid: &[bool], skeleton: &Skeleton) -> RescaledDetections {
    let mut out = Vec::with_capacity(skeleton.joint_count());
    let mut fallback = Vec::new();
    for (j, joint) in skeleton.joints.iter().enumerate() {
        let Some(parent) = joint.parent else {
            out.push(if valid[j] { joints3d[j] } else { Vec3::zeros() });
            continue;
        };
        let length = joint.offset.norm();
        let detected = joints3d[j] - joints3d[parent];
        let dir = if valid[j] && valid[parent] {
            detected.try_normalize(1e-12)
        } else {
            None
        };
        let dir = dir.unwrap_or_else(|| {
            fallback.push(j);
            joint.offset.try_normalize(1e-300).unwrap_or_else(Vec3::zeros)
        });
        out.push(out[parent] + dir * length);
    }
    RescaledDetections {
        positions: out,
        fallback,
    }
}

/// Explicit Euler step in parameter space from the last two poses, joint
/// angles clamped to their limits.
pub fn extrapolate_pose(prev: Option<&PoseParams>, prev2: Option<&PoseParams>, skeleton: &Skeleton) -> PoseParams {
    match (prev, prev2) {
        (Some(a), Some(b)) => {
            let (va, vb) = (a.to_vector(), b.to_vector());
            let v: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| 2.0 * x - y).collect();
            let mut p = PoseParams::from_slice(&v).unwrap_or_else(|_| a.clone());
            p.clamp_to_limits(skeleton);
            p
        }
        (Some(a), None) => a.clone(),
        _ => PoseParams::default(),
    }
}

/// A model contour vertex with its outward image-plane normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContourVertex {
    pub vertex: usize,
    pub normal: Vec2,
}

#[derive(Clone, Debug, Default)]
pub struct ContourVertexSet {
    pub members: Vec<ContourVertex>,
}

/// Vertices on an occluding contour (an edge between a front- and a
/// back-facing triangle, or an open boundary edge) that pass the depth
/// test and lie on the outer silhouette of the rendered model, i.e. have
/// a background pixel within one pixel. `positions` are camera-space.
pub fn extract_contour_vertices(mesh: &TemplateMesh, positions: &[Vec3], camera: &CameraIntrinsics) -> ContourVertexSet {
    let facing: Vec<Option<bool>> = mesh
        .triangles
        .par_iter()
        .map(|t| {
            let n = face_normal(positions, t);
            let c = (positions[t[0]] + positions[t[1]] + positions[t[2]]) / 3.0;
            let d = n.dot(&c);
            (n.norm_squared() > 0.0 && d != 0.0).then_some(d < 0.0)
        })
        .collect();
    let mut on_contour = vec![false; positions.len()];
    for (e, faces) in mesh.edge_faces.iter().enumerate() {
        let boundary = faces.len() == 1;
        let front = faces.iter().any(|&f| facing[f] == Some(true));
        let back = faces.iter().any(|&f| facing[f] == Some(false));
        if boundary || (front && back) {
            let [a, b] = mesh.edges[e];
            on_contour[a] = true;
            on_contour[b] = true;
        }
    }
    let r = raster::rasterize(camera, positions, &mesh.triangles);
    let visible = raster::vertex_visibility(camera, &r, positions);
    let mask = r.mask();
    let on_silhouette = |p: &Vec3| {
        let q = camera.project_unchecked(p);
        let (x, y) = (q.x.round() as i64, q.y.round() as i64);
        (-1..=1).any(|dy| (-1..=1).any(|dx| !mask.is_foreground(x + dx, y + dy)))
    };
    let normals = mesh.vertex_normals(positions);
    let members = (0..positions.len())
        .filter(|&v| on_contour[v] && visible[v] && positions[v].z > 0.0 && on_silhouette(&positions[v]))
        .filter_map(|v| {
            let jp = camera.project_jacobian(&positions[v]).ok()?;
            let n = (jp * normals[v]).try_normalize(1e-12)?;
            Some(ContourVertex { vertex: v, normal: n })
        })
        .collect();
    ContourVertexSet { members }
}

/// `−1` when the model normal opposes the direction toward the nearest
/// image contour, `+1` otherwise (including the orthogonal case).
pub fn directional_weight(n: &Vec2, z: &Vec2) -> f64 {
    if n.dot(z) < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Directional weight of a vertex projecting to `px`. Points outside the
/// foreground, or within a pixel of the image contour where the gradient
/// direction is quantization noise, are pulled toward the silhouette.
pub fn silhouette_direction(n: &Vec2, px: &Vec2, mask: &ForegroundMask, dt: &DistanceTransformImage) -> f64 {
    match mask.pixel_at(px) {
        Some((x, y)) if *mask.get(x, y) && sample_scalar(dt, px).value >= 1.0 => {
            directional_weight(n, &-dt_gradient(dt, px).gradient)
        }
        _ => 1.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PoseTerm {
    Detection2d,
    Detection3d,
    Silhouette,
    Temporal,
    Anatomic,
}

impl PoseTerm {
    pub const ALL: [PoseTerm; 5] = [
        PoseTerm::Detection2d,
        PoseTerm::Detection3d,
        PoseTerm::Silhouette,
        PoseTerm::Temporal,
        PoseTerm::Anatomic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoseTerm::Detection2d => "2d",
            PoseTerm::Detection3d => "3d",
            PoseTerm::Silhouette => "silhouette",
            PoseTerm::Temporal => "temporal",
            PoseTerm::Anatomic => "anatomic",
        }
    }
}

/// Everything Stage I needs about one frame.
#[derive(Clone, Debug)]
pub struct PoseFrame<'a> {
    pub index: usize,
    pub camera: &'a CameraIntrinsics,
    pub detections: &'a FrameDetections,
    /// Metric, root-relative 3D targets (see [`rescale_detections`]).
    pub targets3d: Vec<Vec3>,
    pub mask: &'a ForegroundMask,
    pub dt: &'a DistanceTransformImage,
    /// Rest-pose displacements `d̂` added before skinning.
    pub rest_displacements: Option<&'a [Vec3]>,
    /// Joint positions of the previous frame for the temporal term.
    pub prev_joints: Option<&'a [Vec3]>,
}

impl<'a> PoseFrame<'a> {
    pub fn new(
        index: usize,
        camera: &'a CameraIntrinsics,
        detections: &'a FrameDetections,
        skeleton: &Skeleton,
        mask: &'a ForegroundMask,
        dt: &'a DistanceTransformImage,
    ) -> Result<Self> {
        detections.validate(skeleton.joint_count())?;
        let p3: Vec<Vec3> = (0..skeleton.joint_count()).map(|i| detections.point3d(i)).collect();
        let targets3d = rescale_detections(&p3, &detections.valid3d, skeleton).positions;
        Ok(PoseFrame {
            index,
            camera,
            detections,
            targets3d,
            mask,
            dt,
            rest_displacements: None,
            prev_joints: None,
        })
    }
}

/// Per-frame frozen silhouette correspondences.
#[derive(Clone, Debug)]
pub struct SilhouetteSetup {
    pub contour: ContourVertexSet,
    /// Directional weight `b_i` of each contour member.
    pub directions: Vec<f64>,
    /// Rest points `V̂ + d̂` of the contour members.
    pub rest_points: Vec<Vec3>,
}

#[derive(Clone, Debug)]
pub struct PoseResiduals {
    pub f: DVector<f64>,
    pub j: Option<DMatrix<f64>>,
    pub blocks: Vec<(PoseTerm, Range<usize>)>,
    pub behind_camera: usize,
}

impl PoseResiduals {
    pub fn energy(&self) -> f64 {
        self.f.norm_squared()
    }

    pub fn term_energy(&self, term: PoseTerm) -> f64 {
        self.blocks
            .iter()
            .filter(|(t, _)| *t == term)
            .map(|(_, r)| self.f.rows(r.start, r.len()).norm_squared())
            .sum()
    }

    pub fn term_energies(&self) -> BTreeMap<String, f64> {
        PoseTerm::ALL
            .iter()
            .map(|&t| (t.name().to_string(), self.term_energy(t)))
            .collect()
    }
}

struct Row {
    f: f64,
    j: [f64; POSE_DIM],
}

impl Row {
    fn zero() -> Self {
        Row {
            f: 0.0,
            j: [0.0; POSE_DIM],
        }
    }
}

/// Stage I solver bound to one actor.
pub struct PoseSolver<'a> {
    pub actor: &'a Actor,
    pub hyper: PoseHyperparams,
    pub reduction: Reduction,
    joint_params: Vec<Vec<usize>>,
    temporal: Vec<f64>,
}

impl<'a> PoseSolver<'a> {
    pub fn new(actor: &'a Actor, hyper: PoseHyperparams, reduction: Reduction) -> Self {
        let s = &actor.skeleton;
        let joint_params = (0..s.joint_count()).map(|j| influencing_parameters(s, j)).collect();
        let temporal = s.joints.iter().map(|j| hyper.temporal_weights.of(j.kind)).collect();
        PoseSolver {
            actor,
            hyper,
            reduction,
            joint_params,
            temporal,
        }
    }

    fn rest_points(&self, frame: &PoseFrame) -> Vec<Vec3> {
        let rest = &self.actor.mesh.rest_vertices;
        match frame.rest_displacements {
            Some(d) => rest.iter().zip(d).map(|(v, d)| v + d).collect(),
            None => rest.clone(),
        }
    }

    /// Extracts the contour set of the displaced model at `pose` and fixes
    /// the directional weights for this frame.
    pub fn prepare(&self, frame: &PoseFrame, pose: &PoseParams) -> SilhouetteSetup {
        let rest = self.rest_points(frame);
        let t = forward_kinematics(&self.actor.skeleton, pose);
        let posed = crate::skinning::dq_skin(&rest, &self.actor.weights, &t.skinning_pose()).positions;
        let contour = extract_contour_vertices(&self.actor.mesh, &posed, frame.camera);
        let directions = contour
            .members
            .iter()
            .map(|c| {
                let px = frame.camera.project_unchecked(&posed[c.vertex]);
                silhouette_direction(&c.normal, &px, frame.mask, frame.dt)
            })
            .collect();
        let rest_points = contour.members.iter().map(|c| rest[c.vertex]).collect();
        SilhouetteSetup {
            contour,
            directions,
            rest_points,
        }
    }

    /// Stacked, weight-scaled residuals and (optionally) their Jacobian.
    /// With `directional` the silhouette rows' gradients are multiplied by
    /// `b_i`; without it the Jacobian is the exact derivative of `F`.
    pub fn residuals(
        &self,
        frame: &PoseFrame,
        setup: &SilhouetteSetup,
        pose: &PoseParams,
        jacobian: bool,
        directional: bool,
    ) -> PoseResiduals {
        let s = &self.actor.skeleton;
        let h = &self.hyper;
        let cam = frame.camera;
        let nj = s.joint_count();
        let t = forward_kinematics(s, pose);
        let mut behind = 0usize;
        let mut groups: Vec<(PoseTerm, Vec<Row>)> = Vec::with_capacity(5);

        // 2D joints and face landmarks.
        let mut rows = Vec::new();
        for i in 0..nj + MARKER_COUNT {
            if !frame.detections.valid2d[i] {
                continue;
            }
            let (p, joint) = if i < nj { (t.positions[i], i) } else { (t.markers[i - nj], s.head) };
            let w = (h.lambda_2d * if i < nj { h.joint_weight } else { h.face_weight }).sqrt();
            let (Ok(px), Ok(jp)) = (cam.project(&p), cam.project_jacobian(&p)) else {
                behind += 1;
                rows.push(Row::zero());
                rows.push(Row::zero());
                continue;
            };
            let target = frame.detections.point2d(i);
            let dp = jacobian.then(|| t.point_jacobian(&self.joint_params[joint], &p));
            for c in 0..2 {
                let mut row = Row::zero();
                row.f = w * (px[c] - target[c]);
                if let Some(dp) = &dp {
                    for k in 0..KINEMATIC_DIM {
                        row.j[k] = w * (jp.row(c) * dp[k])[0];
                    }
                }
                rows.push(row);
            }
        }
        groups.push((PoseTerm::Detection2d, rows));

        // 3D joints against rescaled detections shifted by t′.
        let mut rows = Vec::new();
        let w = h.lambda_3d.sqrt() * MM_PER_M;
        for i in 0..nj {
            if !frame.detections.valid3d[i] {
                continue;
            }
            let r = t.positions[i] - (frame.targets3d[i] + pose.aux_translation);
            let dp = jacobian.then(|| t.point_jacobian(&self.joint_params[i], &t.positions[i]));
            for c in 0..3 {
                let mut row = Row::zero();
                row.f = w * r[c];
                if let Some(dp) = &dp {
                    for k in 0..KINEMATIC_DIM {
                        row.j[k] = w * dp[k][c];
                    }
                    row.j[AUX_TRANSLATION + c] = -w;
                }
                rows.push(row);
            }
        }
        groups.push((PoseTerm::Detection3d, rows));

        // Silhouette: frozen contour set on the displaced model.
        let w = h.lambda_silhouette.sqrt();
        let dq = t.skinning_pose();
        let sil: Vec<(Row, bool)> = setup
            .contour
            .members
            .par_iter()
            .zip(setup.rest_points.par_iter())
            .zip(setup.directions.par_iter())
            .map(|((c, rest), &b)| {
                let inf = &self.actor.weights.influences[c.vertex];
                let (v, dv) = if jacobian {
                    skinned_vertex_jacobian(rest, inf, &t, &dq, &self.joint_params)
                } else {
                    let bl = crate::skinning::blend(inf, &dq);
                    (bl.dq.transform_point(rest), [Vec3::zeros(); KINEMATIC_DIM])
                };
                let (Ok(px), Ok(jp)) = (cam.project(&v), cam.project_jacobian(&v)) else {
                    return (Row::zero(), true);
                };
                let sample = sample_scalar(frame.dt, &px);
                let mut row = Row::zero();
                row.f = w * sample.value;
                if jacobian {
                    let g = sample.gradient.transpose() * jp * w * if directional { b } else { 1.0 };
                    for k in 0..KINEMATIC_DIM {
                        row.j[k] = (g * dv[k])[0];
                    }
                }
                (row, false)
            })
            .collect();
        behind += sil.iter().filter(|r| r.1).count();
        groups.push((PoseTerm::Silhouette, sil.into_iter().map(|r| r.0).collect()));

        // Temporal: joints only, face markers excluded.
        let mut rows = Vec::new();
        if let Some(prev) = frame.prev_joints {
            for i in 0..nj {
                let w = (h.lambda_temporal * self.temporal[i]).sqrt() * MM_PER_M;
                let r = t.positions[i] - prev[i];
                let dp = jacobian.then(|| t.point_jacobian(&self.joint_params[i], &t.positions[i]));
                for c in 0..3 {
                    let mut row = Row::zero();
                    row.f = w * r[c];
                    if let Some(dp) = &dp {
                        for k in 0..KINEMATIC_DIM {
                            row.j[k] = w * dp[k][c];
                        }
                    }
                    rows.push(row);
                }
            }
        }
        groups.push((PoseTerm::Temporal, rows));

        // Anatomic: one-sided quadratic barrier per joint angle.
        let w = h.lambda_anatomic.sqrt();
        let rows = s
            .dofs
            .iter()
            .zip(&pose.theta)
            .enumerate()
            .map(|(k, (d, &x))| {
                let mut row = Row::zero();
                if x > d.max {
                    row.f = w * (x - d.max);
                    row.j[THETA + k] = w;
                } else if x < d.min {
                    row.f = w * (d.min - x);
                    row.j[THETA + k] = -w;
                }
                row
            })
            .collect();
        groups.push((PoseTerm::Anatomic, rows));

        let total: usize = groups.iter().map(|g| g.1.len()).sum();
        let mut f = DVector::zeros(total);
        let mut j = jacobian.then(|| DMatrix::zeros(total, POSE_DIM));
        let mut blocks = Vec::with_capacity(groups.len());
        let mut at = 0;
        for (term, rows) in groups {
            blocks.push((term, at..at + rows.len()));
            for row in rows {
                f[at] = row.f;
                if let Some(j) = j.as_mut() {
                    for (k, v) in row.j.iter().enumerate() {
                        j[(at, k)] = *v;
                    }
                }
                at += 1;
            }
        }
        PoseResiduals {
            f,
            j,
            blocks,
            behind_camera: behind,
        }
    }

    /// Runs `iterations` damped Gauss-Newton steps from `init` with the
    /// contour set extracted once at `init`.
    pub fn solve(&self, frame: &PoseFrame, init: &PoseParams, iterations: usize) -> Result<(PoseParams, SolveReport)> {
        let start = Instant::now();
        let mut report = SolveReport::new("pose", frame.index);
        let mut pose = init.clone();
        let setup = self.prepare(frame, &pose);
        if setup.contour.members.is_empty() {
            report.flag("empty_contour");
        }
        report.flag_n("directional_flip", setup.directions.iter().filter(|&&b| b < 0.0).count());
        let t0 = forward_kinematics(&self.actor.skeleton, &pose);
        if t0.gimbal_warning {
            report.flag("gimbal");
        }
        let initial = self.residuals(frame, &setup, &pose, false, true);
        report.record(initial.energy(), initial.term_energies());
        for _ in 0..iterations {
            let r = self.residuals(frame, &setup, &pose, true, true);
            report.flag_n("behind_camera", r.behind_camera);
            let e0 = r.energy();
            let sys = dense_normal_equations(r.j.as_ref().expect("requested"), &r.f, self.reduction);
            let sol = dense_solve(&sys)?;
            if sol.damping > 0.0 {
                report.flag("damped");
            }
            report.step_norms.push(sol.delta.norm());
            let base = pose.to_vector();
            let mut step = sol.delta;
            let mut accepted = None;
            for _ in 0..=self.hyper.max_step_halvings {
                let cand: Vec<f64> = base.iter().zip(step.iter()).map(|(a, d)| a + d).collect();
                let cand = PoseParams::from_slice(&cand)?;
                let e = self.residuals(frame, &setup, &cand, false, true);
                if e.energy() <= e0 {
                    accepted = Some((cand, e));
                    break;
                }
                report.flag("step_halved");
                step *= 0.5;
            }
            match accepted {
                Some((p, e)) => {
                    pose = p;
                    report.record(e.energy(), e.term_energies());
                }
                None => {
                    report.flag("step_rejected");
                    report.record(e0, r.term_energies());
                }
            }
        }
        if forward_kinematics(&self.actor.skeleton, &pose).gimbal_warning {
            report.flag("gimbal");
        }
        report.seconds = start.elapsed().as_secs_f64();
        Ok((pose, report))
    }

    /// Largest per-block relative Frobenius error between the analytic
    /// Jacobian (without directional flips) and central differences.
    pub fn gradcheck(&self, frame: &PoseFrame, setup: &SilhouetteSetup, pose: &PoseParams, h: f64) -> Vec<(PoseTerm, f64)> {
        let r = self.residuals(frame, setup, pose, true, false);
        let j = r.j.expect("requested");
        let base = pose.to_vector();
        let mut fd = DMatrix::zeros(j.nrows(), POSE_DIM);
        for k in 0..POSE_DIM {
            let eval = |s: f64| {
                let mut v = base;
                v[k] += s * h;
                self.residuals(frame, setup, &PoseParams::from_slice(&v).expect("finite"), false, false).f
            };
            let col = (eval(1.0) - eval(-1.0)) / (2.0 * h);
            fd.set_column(k, &col);
        }
        r.blocks
            .iter()
            .filter(|(_, rows)| !rows.is_empty())
            .map(|(term, rows)| {
                let a = j.rows(rows.start, rows.len());
                let b = fd.rows(rows.start, rows.len());
                let scale = a.norm().max(b.norm());
                let err = if scale < 1e-12 { 0.0 } else { (a - b).norm() / scale };
                (*term, err)
            })
            .collect()
    }
}

/// Joint positions of a pose (for temporal terms and metrics).
pub fn joint_positions(skeleton: &Skeleton, pose: &PoseParams) -> Vec<Vec3> {
    forward_kinematics(skeleton, pose).positions
}

/// Exact detections of a posed skeleton: projected joints and markers, and
/// root-relative 3D joints.
pub fn exact_detections(frame: usize, transforms: &JointTransforms, camera: &CameraIntrinsics) -> FrameDetections {
    let pts: Vec<Vec3> = transforms.positions.iter().chain(transforms.markers.iter()).copied().collect();
    let root = transforms.positions[0];
    FrameDetections {
        frame,
        joints2d: pts.iter().map(|p| camera.project_unchecked(p)).map(|q| [q.x, q.y]).collect(),
        joints3d: transforms.positions.iter().map(|p| p - root).map(|p| [p.x, p.y, p.z]).collect(),
        valid2d: vec![true; pts.len()],
        valid3d: vec![true; transforms.positions.len()],
    }
}
