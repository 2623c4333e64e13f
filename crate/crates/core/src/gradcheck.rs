//! Finite-difference checks of every residual block of both stages on
//! random configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraIntrinsics;
use crate::humanoid::{default_camera, default_skeleton, humanoid, HumanoidOptions};
use crate::imageproc::{euclidean_dt, gaussian_pyramid};
use crate::nonrigid_stage::{NonrigidFrame, NonrigidHyperparams, NonrigidSolver, SurfaceState};
use crate::pose_stage::{exact_detections, PoseFrame, PoseHyperparams, PoseSolver};
use crate::raster;
use crate::reduce::Reduction;
use crate::shapes;
use crate::skinning::{dq_skin, forward_kinematics, PoseParams, THETA};
use crate::template::{Actor, MaterialClass, SkinningWeights, TemplateMesh};
use crate::{Result, Vec3};

/// Worst relative Jacobian error of one residual block over all checked
/// configurations.
#[derive(Clone, Debug, PartialEq)]
pub struct TermCheck {
    pub stage: &'static str,
    pub term: String,
    pub worst: f64,
    pub checks: usize,
}

fn record(out: &mut Vec<TermCheck>, stage: &'static str, term: String, err: f64) {
    match out.iter_mut().find(|c| c.stage == stage && c.term == term) {
        Some(c) => {
            c.worst = c.worst.max(err);
            c.checks += 1;
        }
        None => out.push(TermCheck {
            stage,
            term,
            worst: err,
            checks: 1,
        }),
    }
}

/// Vertex-colored 50-vertex sphere rigidly bound to the root joint.
pub fn gradcheck_sphere() -> Result<Actor> {
    let (v, t) = shapes::uv_sphere(Vec3::new(0.0, 0.0, 2.0), 0.4, 7, 8);
    let n = v.len();
    let colors = v.iter().map(|p| Vec3::new(0.5 + 0.5 * p.x, 0.5 + 0.5 * p.y, 0.4)).collect();
    let mesh = TemplateMesh::new(v, t, colors, vec![MaterialClass::new(3)?; n])?;
    let skel = default_skeleton(3.0);
    let weights = SkinningWeights::new(vec![vec![(0, 1.0)]; n], skel.joint_count())?;
    Actor::new(mesh, skel, weights)
}

fn jitter(rng: &mut ChaCha8Rng, v: &[Vec3], amount: f64) -> Vec<Vec3> {
    v.iter()
        .map(|p| p + Vec3::from_fn(|_, _| rng.random_range(-amount..amount)))
        .collect()
}

fn check_nonrigid(actor: &Actor, rng: &mut ChaCha8Rng, h: f64, out: &mut Vec<TermCheck>) -> Result<()> {
    let cam = CameraIntrinsics::new(120.0, 120.0, 40.0, 40.0, 80, 80)?;
    let c = Vec3::new(0.0, 0.0, 2.0);
    let scale = rng.random_range(1.02..1.08);
    let observed: Vec<Vec3> = actor.mesh.rest_vertices.iter().map(|p| c + (p - c) * scale).collect();
    let r = raster::rasterize(&cam, &observed, &actor.mesh.triangles);
    let img = r.shade(&actor.mesh.triangles, &actor.mesh.vertex_colors, Vec3::zeros());
    let mask = r.mask();
    let dt = euclidean_dt(&mask)?;
    let pyramid = gaussian_pyramid(&img);
    let frame = NonrigidFrame {
        index: 0,
        camera: &cam,
        pyramid: &pyramid,
        mask: &mask,
        dt: &dt,
        part_mask: None,
    };
    let rest = &actor.mesh.rest_vertices;
    let zeros = vec![Vec3::zeros(); rest.len()];
    let state = SurfaceState::new(
        jitter(rng, rest, 0.01),
        jitter(rng, &zeros, 0.01),
        Some(jitter(rng, rest, 0.01)),
        Some(jitter(rng, rest, 0.01)),
    )?;
    let solver = NonrigidSolver::new(actor, NonrigidHyperparams::default(), Reduction::Deterministic);
    let corr = solver.correspondences(&frame, &state);
    for level in 0..3 {
        for (term, err) in solver.gradcheck(&frame, &state, &corr, level, h) {
            record(out, "nonrigid", format!("{term:?}"), err);
        }
    }
    Ok(())
}

fn check_pose(actor: &Actor, rng: &mut ChaCha8Rng, h: f64, out: &mut Vec<TermCheck>) -> Result<()> {
    let cam = default_camera(320, 240);
    let skel = &actor.skeleton;
    let mut gt = PoseParams::default();
    for (k, d) in skel.dofs.iter().enumerate() {
        gt.theta[k] = rng.random_range(d.min.max(-0.4)..d.max.min(0.4));
    }
    gt.root_rotation = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.3..0.3), rng.random_range(-0.1..0.1));
    gt.root_translation = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.2..0.2));
    let t = forward_kinematics(skel, &gt);
    let posed = dq_skin(&actor.mesh.rest_vertices, &actor.weights, &t.skinning_pose()).positions;
    let mask = raster::rasterize(&cam, &posed, &actor.mesh.triangles).mask();
    let dt = euclidean_dt(&mask)?;
    let det = exact_detections(0, &t, &cam);
    let prev = forward_kinematics(skel, &PoseParams::default()).positions;
    let mut frame = PoseFrame::new(0, &cam, &det, skel, &mask, &dt)?;
    frame.prev_joints = Some(&prev);
    gt.aux_translation = t.positions[0];
    let mut p = gt.to_vector();
    for x in p.iter_mut() {
        *x += rng.random_range(-0.05..0.05);
    }
    // One angle past its limit exercises the barrier.
    let k = rng.random_range(0..skel.dofs.len());
    p[THETA + k] = skel.dofs[k].max + 0.05;
    let p = PoseParams::from_slice(&p)?;
    let solver = PoseSolver::new(actor, PoseHyperparams::default(), Reduction::Deterministic);
    let setup = solver.prepare(&frame, &p);
    for (term, err) in solver.gradcheck(&frame, &setup, &p, h) {
        record(out, "pose", format!("{term:?}"), err);
    }
    Ok(())
}

/// Runs `configs` random configurations of each stage with central
/// differences of step `h`.
pub fn run_gradcheck(configs: usize, seed: u64, h: f64) -> Result<Vec<TermCheck>> {
    let sphere = gradcheck_sphere()?;
    let body = humanoid(&HumanoidOptions::coarse())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..configs {
        check_nonrigid(&sphere, &mut rng, h, &mut out)?;
        check_pose(&body, &mut rng, h, &mut out)?;
    }
    Ok(out)
}
