//! Scripted synthetic sequences with ground truth, for tests and demos.

use std::f64::consts::TAU;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::pose_stage::{detections_to_text, exact_detections, FrameDetections};
use crate::raster;
use crate::skinning::{dq_skin, forward_kinematics, poses_to_text, PoseParams, POSE_DIM, THETA};
use crate::template::{save_actor, write_obj, Actor, Skeleton};
use crate::{Error, Result, Vec3};

use super::config::SequenceConfig;
use super::driver::{GroundTruth, ImageSource, InputFrame, SequenceInput};
use super::io::{frame_file, write_file};

/// `offset + amplitude * sin(2π t / period + phase)` added to one pose
/// parameter. A zero period gives a constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DofCurve {
    /// `root.rx|ry|rz|tx|ty|tz` or `<joint>.<k>` for the k-th DoF of a joint.
    pub dof: String,
    pub offset: f64,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

impl DofCurve {
    pub fn constant(dof: &str, value: f64) -> Self {
        DofCurve {
            dof: dof.into(),
            offset: value,
            amplitude: 0.0,
            period: 0.0,
            phase: 0.0,
        }
    }

    pub fn wave(dof: &str, offset: f64, amplitude: f64, period: f64, phase: f64) -> Self {
        DofCurve {
            dof: dof.into(),
            offset,
            amplitude,
            period,
            phase,
        }
    }

    fn value(&self, t: f64) -> f64 {
        if self.period == 0.0 {
            self.offset
        } else {
            self.offset + self.amplitude * (TAU * t / self.period + self.phase).sin()
        }
    }
}

/// Procedural rest-space displacement of one material class: a sideways
/// swing growing linearly from the top of the region to its bottom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClothSwing {
    pub class_id: u8,
    /// Peak displacement at the bottom edge, in meters.
    pub amplitude: f64,
    pub period: f64,
    /// Radial flare at the bottom edge, in meters, `0.5(1 - cos)` in time.
    pub flare: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionScript {
    pub frames: usize,
    pub curves: Vec<DofCurve>,
    pub cloth: Option<ClothSwing>,
    /// Detection noise: 2D in pixels, 3D in millimeters.
    pub noise_2d: f64,
    pub noise_3d: f64,
    pub seed: u64,
    pub background: [f64; 3],
}

impl MotionScript {
    pub fn still(frames: usize) -> Self {
        MotionScript {
            frames,
            curves: Vec::new(),
            cloth: None,
            noise_2d: 0.0,
            noise_3d: 0.0,
            seed: 0,
            background: [0.1, 0.1, 0.1],
        }
    }

    /// Limb joints kept bent so that every twist stays observable.
    fn bent_limbs() -> Vec<DofCurve> {
        vec![
            DofCurve::constant("r_elbow.0", -0.4),
            DofCurve::constant("l_elbow.0", 0.4),
            DofCurve::constant("r_knee.0", 0.3),
            DofCurve::constant("l_knee.0", 0.3),
        ]
    }

    /// Slow arm waving and body sway with a swinging skirt.
    pub fn skirt(frames: usize) -> Self {
        let mut curves = Self::bent_limbs();
        curves.extend([
            DofCurve::wave("root.ry", 0.0, 0.15, 60.0, 0.0),
            DofCurve::wave("root.tx", 0.0, 0.05, 80.0, 0.5),
            DofCurve::wave("r_shoulder.2", 0.5, 0.3, 40.0, 0.0),
            DofCurve::wave("l_shoulder.2", -0.5, 0.3, 50.0, 1.0),
            DofCurve::wave("r_hip.0", -0.1, 0.1, 30.0, 0.0),
            DofCurve::wave("l_hip.0", -0.1, 0.1, 30.0, 3.0),
            DofCurve::wave("spine.2", 0.0, 0.08, 45.0, 0.3),
        ]);
        MotionScript {
            curves,
            cloth: Some(ClothSwing {
                class_id: 1,
                amplitude: 0.12,
                period: 96.0,
                flare: 0.0,
            }),
            noise_2d: 1.0,
            noise_3d: 10.0,
            ..Self::still(frames)
        }
    }

    /// Arms lowered next to the torso over a shirt that flares out towards
    /// them, closing the gap the rest-shape template still has.
    pub fn arms_near_torso(frames: usize) -> Self {
        let mut curves = Self::bent_limbs();
        curves.extend([
            DofCurve::wave("r_shoulder.2", -1.3, 0.1, 30.0, 0.0),
            DofCurve::wave("l_shoulder.2", 1.3, 0.1, 30.0, 1.5),
            DofCurve::wave("root.ry", 0.0, 0.1, 50.0, 0.0),
        ]);
        MotionScript {
            curves,
            cloth: Some(ClothSwing {
                class_id: 2,
                amplitude: 0.0,
                period: 48.0,
                flare: 0.05,
            }),
            noise_2d: 1.0,
            noise_3d: 10.0,
            ..Self::still(frames)
        }
    }
}

/// Index into the 36-vector of a named pose parameter.
pub fn resolve_dof(skeleton: &Skeleton, name: &str) -> Result<usize> {
    let unknown = || Error::UnknownDof(name.to_string());
    let (joint, k) = name.rsplit_once('.').ok_or_else(unknown)?;
    if joint == "root" {
        let i = ["rx", "ry", "rz", "tx", "ty", "tz"].iter().position(|&c| c == k).ok_or_else(unknown)?;
        return Ok(i);
    }
    let j = skeleton.joint_index(joint).ok_or_else(unknown)?;
    let k: usize = k.parse().map_err(|_| unknown())?;
    let d = *skeleton.joint_dofs(j).get(k).ok_or_else(unknown)?;
    Ok(THETA + d)
}

pub fn scripted_poses(skeleton: &Skeleton, script: &MotionScript) -> Result<Vec<PoseParams>> {
    let idx: Vec<usize> = script
        .curves
        .iter()
        .map(|c| resolve_dof(skeleton, &c.dof))
        .collect::<Result<_>>()?;
    (0..script.frames)
        .map(|t| {
            let mut v = [0.0; POSE_DIM];
            for (c, &i) in script.curves.iter().zip(&idx) {
                v[i] += c.value(t as f64);
            }
            let mut p = PoseParams::from_slice(&v)?;
            p.clamp_to_limits(skeleton);
            Ok(p)
        })
        .collect()
}

/// Rest-space cloth displacements at frame `t`.
pub fn cloth_displacements(actor: &Actor, swing: &ClothSwing, t: f64) -> Vec<Vec3> {
    let mesh = &actor.mesh;
    let members: Vec<usize> = (0..mesh.vertex_count())
        .filter(|&v| mesh.vertex_labels[v].id() == swing.class_id)
        .collect();
    let mut d = vec![Vec3::zeros(); mesh.vertex_count()];
    if members.is_empty() {
        return d;
    }
    let ys = members.iter().map(|&v| mesh.rest_vertices[v].y);
    let (top, bottom) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let axis = members.iter().map(|&v| mesh.rest_vertices[v]).sum::<Vec3>() / members.len() as f64;
    let swing_now = swing.amplitude * (TAU * t / swing.period).sin();
    let flare_now = swing.flare * 0.5 * (1.0 - (TAU * t / swing.period).cos());
    for &v in &members {
        let p = mesh.rest_vertices[v];
        let h = if bottom > top { (p.y - top) / (bottom - top) } else { 1.0 };
        let radial = Vec3::new(p.x - axis.x, 0.0, p.z - axis.z).try_normalize(1e-12).unwrap_or_else(Vec3::zeros);
        d[v] = (Vec3::x() * swing_now + radial * flare_now) * h;
    }
    d
}

#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub camera: CameraIntrinsics,
    pub frames: Vec<InputFrame>,
    pub detections: Vec<FrameDetections>,
    pub gt_poses: Vec<PoseParams>,
    pub gt_meshes: Vec<Vec<Vec3>>,
    pub gt_joints: Vec<Vec<Vec3>>,
}

/// Renders a scripted motion: skinned (and displaced) meshes, Gouraud
/// images quantized to 8 bits, masks from the shared rasterizer, and noisy
/// detections.
pub fn generate_synthetic_sequence(actor: &Actor, camera: &CameraIntrinsics, script: &MotionScript) -> Result<SyntheticSequence> {
    let poses = scripted_poses(&actor.skeleton, script)?;
    let noise2 = Normal::new(0.0, script.noise_2d).map_err(|e| Error::Config(e.to_string()))?;
    let noise3 = Normal::new(0.0, script.noise_3d / 1000.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let background = Vec3::from(script.background);
    let mut seq = SyntheticSequence {
        camera: *camera,
        frames: Vec::with_capacity(script.frames),
        detections: Vec::with_capacity(script.frames),
        gt_poses: Vec::with_capacity(script.frames),
        gt_meshes: Vec::with_capacity(script.frames),
        gt_joints: Vec::with_capacity(script.frames),
    };
    for (t, pose) in poses.into_iter().enumerate() {
        let transforms = forward_kinematics(&actor.skeleton, &pose);
        let rest: Vec<Vec3> = match &script.cloth {
            Some(c) => {
                let d = cloth_displacements(actor, c, t as f64);
                actor.mesh.rest_vertices.iter().zip(&d).map(|(v, d)| v + d).collect()
            }
            None => actor.mesh.rest_vertices.clone(),
        };
        let mesh = dq_skin(&rest, &actor.weights, &transforms.skinning_pose()).positions;
        let r = raster::rasterize(camera, &mesh, &actor.mesh.triangles);
        let color = r.shade(&actor.mesh.triangles, &actor.mesh.vertex_colors, background).quantized();
        let mask = r.mask();
        let mut det = exact_detections(t, &transforms, camera);
        if script.noise_2d > 0.0 {
            for p in &mut det.joints2d {
                p[0] += noise2.sample(&mut rng);
                p[1] += noise2.sample(&mut rng);
            }
        }
        if script.noise_3d > 0.0 {
            for p in det.joints3d.iter_mut().skip(1) {
                p.iter_mut().for_each(|c| *c += noise3.sample(&mut rng));
            }
        }
        seq.frames.push(InputFrame { color, mask });
        seq.detections.push(det);
        seq.gt_joints.push(transforms.positions);
        seq.gt_meshes.push(mesh);
        seq.gt_poses.push(pose);
    }
    Ok(seq)
}

impl SyntheticSequence {
    pub fn input(&self) -> SequenceInput<'_> {
        SequenceInput {
            camera: self.camera,
            images: ImageSource::Memory(&self.frames),
            detections: self.detections.clone(),
        }
    }

    pub fn ground_truth(&self) -> GroundTruth<'_> {
        GroundTruth {
            meshes: &self.gt_meshes,
            joints: &self.gt_joints,
        }
    }
}

/// Writes a sequence in the on-disk input layout and returns a config
/// pointing at it (paths relative to `dir`, also saved as `config.toml`).
pub fn write_synthetic_sequence(seq: &SyntheticSequence, actor: &Actor, dir: &Path) -> Result<SequenceConfig> {
    let mut config = SequenceConfig::default();
    let p = &mut config.paths;
    p.template = "template.obj".into();
    p.skeleton = "skeleton.txt".into();
    p.skinning = "skinning.txt".into();
    p.calibration = "camera.txt".into();
    p.frames = "frames".into();
    p.masks = "masks".into();
    p.detections = "detections.jsonl".into();
    p.output = "output".into();
    for sub in ["frames", "masks", "ground_truth"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    save_actor(actor, &dir.join(&p.template), &dir.join(&p.skeleton), &dir.join(&p.skinning))?;
    write_file(&dir.join(&p.calibration), &seq.camera.to_text())?;
    write_file(&dir.join(&p.detections), &detections_to_text(&seq.detections))?;
    for (t, f) in seq.frames.iter().enumerate() {
        f.color.save(&frame_file(&dir.join("frames"), t))?;
        f.mask.save(&frame_file(&dir.join("masks"), t))?;
        write_file(
            &frame_file(&dir.join("ground_truth"), t).with_extension("obj"),
            &write_obj(&seq.gt_meshes[t], &actor.mesh.triangles),
        )?;
    }
    write_file(&dir.join("ground_truth").join("poses.txt"), &poses_to_text(&seq.gt_poses))?;
    write_file(&dir.join("config.toml"), &config.to_toml())?;
    config.paths.resolve(dir);
    Ok(config)
}
