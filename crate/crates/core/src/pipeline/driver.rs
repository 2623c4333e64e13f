//! The per-frame tracker and the three-stage frame pipeline.
//!
//! Stage A preprocesses a frame (load, distance transform, pyramid), stage
//! B ingests its detections and stage C solves pose and surface. In
//! pipelined mode the stages run on their own threads in lockstep: at tick
//! `k` stage A works on frame `k`, B on `k - 1` and C on `k - 2`, so the
//! result of frame `t` is emitted once frame `t + 2` has been ingested.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, TryRecvError};
use std::sync::Barrier;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::imageproc::{
    euclidean_dt, gaussian_pyramid_with, ColorImage, DistanceTransformImage, ForegroundMask, ImagePyramid,
};
use crate::nonrigid_stage::{build_body_part_mask, snap_vertices, NonrigidFrame, NonrigidSolver, SurfaceState};
use crate::pose_stage::{extrapolate_pose, FrameDetections, PoseFrame, PoseSolver};
use crate::raster;
use crate::reduce::Reduction;
use crate::report::SolveReport;
use crate::skinning::{
    dq_skin, forward_kinematics, unpose_displacements, warp_displacements, DualQuaternionPose, PoseParams,
};
use crate::template::{edge_weights_from_table, Actor};
use crate::{Error, Result, Vec3};

use super::config::SequenceConfig;
use super::io::frame_file;
use super::metrics::{metric_iou, metric_joint_error, smooth_trajectories, vertex_errors, Iou};

/// Frames between ingest and result in pipelined mode.
pub const PIPELINE_DELAY: usize = 2;
/// Capacity of the queues between stages.
pub const QUEUE_CAPACITY: usize = 2;

/// One input frame held in memory.
#[derive(Clone, Debug)]
pub struct InputFrame {
    pub color: ColorImage,
    pub mask: ForegroundMask,
}

#[derive(Clone, Debug)]
pub enum ImageSource<'a> {
    Memory(&'a [InputFrame]),
    /// Directories of `NNNNN.png` color frames and masks.
    Disk { frames: PathBuf, masks: PathBuf },
}

#[derive(Clone, Debug)]
pub struct SequenceInput<'a> {
    pub camera: CameraIntrinsics,
    pub images: ImageSource<'a>,
    /// One record per frame; sets the frame count.
    pub detections: Vec<FrameDetections>,
}

impl SequenceInput<'_> {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    fn load(&self, index: usize) -> Result<InputFrame> {
        let missing = |msg: String| Error::Frame { index, msg };
        let frame = match &self.images {
            ImageSource::Memory(frames) => frames
                .get(index)
                .cloned()
                .ok_or_else(|| missing("no image in memory".into()))?,
            ImageSource::Disk { frames, masks } => {
                let (c, m) = (frame_file(frames, index), frame_file(masks, index));
                for p in [&c, &m] {
                    if !p.exists() {
                        return Err(missing(format!("missing {}", p.display())));
                    }
                }
                InputFrame {
                    color: ColorImage::load(&c)?,
                    mask: ForegroundMask::load(&m)?,
                }
            }
        };
        let cam = &self.camera;
        let dims = [(frame.color.width, frame.color.height), (frame.mask.width, frame.mask.height)];
        if dims.iter().any(|&d| d != (cam.width, cam.height)) {
            return Err(missing(format!("image size differs from the {}x{} camera", cam.width, cam.height)));
        }
        Ok(frame)
    }
}

/// Wall-clock seconds per stage for one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess: f64,
    pub detections: f64,
    pub pose: f64,
    pub nonrigid: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.preprocess + self.detections + self.pose + self.nonrigid
    }
}

/// Output of stage A.
#[derive(Clone, Debug)]
struct Preprocessed {
    index: usize,
    color: ColorImage,
    mask: ForegroundMask,
    dt: DistanceTransformImage,
    pyramid: ImagePyramid,
    seconds: f64,
}

/// Everything the solver stage needs about one frame.
#[derive(Clone, Debug)]
pub struct FramePacket {
    pub index: usize,
    pub color: ColorImage,
    pub mask: ForegroundMask,
    pub dt: DistanceTransformImage,
    pub pyramid: ImagePyramid,
    pub detections: FrameDetections,
    pub timings: StageTimings,
}

fn preprocess(input: &SequenceInput, index: usize, kernels: [usize; 3]) -> Result<Preprocessed> {
    let start = Instant::now();
    let InputFrame { color, mask } = input.load(index)?;
    let dt = euclidean_dt(&mask).map_err(|e| Error::Frame {
        index,
        msg: e.to_string(),
    })?;
    let pyramid = gaussian_pyramid_with(&color, kernels);
    Ok(Preprocessed {
        index,
        color,
        mask,
        dt,
        pyramid,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn ingest(pre: Preprocessed, input: &SequenceInput, joint_count: usize) -> Result<FramePacket> {
    let start = Instant::now();
    let detections = input.detections[pre.index].clone();
    detections.validate(joint_count)?;
    if detections.frame != pre.index {
        return Err(Error::Frame {
            index: pre.index,
            msg: format!("detection record is labeled frame {}", detections.frame),
        });
    }
    Ok(FramePacket {
        index: pre.index,
        color: pre.color,
        mask: pre.mask,
        dt: pre.dt,
        pyramid: pre.pyramid,
        detections,
        timings: StageTimings {
            preprocess: pre.seconds,
            detections: start.elapsed().as_secs_f64(),
            ..Default::default()
        },
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SnapStats {
    pub snapped: usize,
    pub failed: usize,
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub index: usize,
    pub pose: PoseParams,
    pub vertices: Vec<Vec3>,
    /// Stage I solves (two on the first frame), then Stage II if enabled.
    pub reports: Vec<SolveReport>,
    pub snap: Option<SnapStats>,
    /// Overlap of the rendered result with the input mask.
    pub iou: Iou,
    pub timings: StageTimings,
}

/// Stage C: solves frames in order and carries the temporal state.
pub struct Tracker<'a> {
    actor: Actor,
    camera: &'a CameraIntrinsics,
    config: &'a SequenceConfig,
    reduction: Reduction,
    /// Last two poses, oldest first.
    poses: Vec<PoseParams>,
    prev_joints: Option<Vec<Vec3>>,
    prev_skinning: Option<DualQuaternionPose>,
    /// Posed displacements `d^{t-1}`.
    displacements: Vec<Vec3>,
    /// Last two result surfaces, oldest first.
    surfaces: Vec<Vec<Vec3>>,
}

impl<'a> Tracker<'a> {
    /// Copies the actor with edge weights taken from the configured class
    /// weight table.
    pub fn new(actor: &Actor, camera: &'a CameraIntrinsics, config: &'a SequenceConfig) -> Self {
        let mut actor = actor.clone();
        actor.mesh.edge_weights = edge_weights_from_table(&actor.mesh, &config.material_weights);
        let n = actor.mesh.vertex_count();
        Tracker {
            actor,
            camera,
            config,
            reduction: Reduction::from_flag(config.flags.reproducible),
            poses: Vec::new(),
            prev_joints: None,
            prev_skinning: None,
            displacements: vec![Vec3::zeros(); n],
            surfaces: Vec::new(),
        }
    }

    fn push<T>(history: &mut Vec<T>, v: T) {
        if history.len() == 2 {
            history.remove(0);
        }
        history.push(v);
    }

    pub fn track(&mut self, packet: &FramePacket) -> Result<FrameOutput> {
        let cfg = self.config;
        let actor = &self.actor;
        let skel = &actor.skeleton;
        let warping = cfg.flags.displacement_warping;
        let mut timings = packet.timings;
        let mut reports = Vec::new();

        let start = Instant::now();
        let rest_displacements = match (&self.prev_skinning, warping) {
            (Some(dq), true) => Some(unpose_displacements(&self.displacements, &actor.weights, dq)),
            _ => None,
        };
        let mut frame = PoseFrame::new(packet.index, self.camera, &packet.detections, skel, &packet.mask, &packet.dt)?;
        frame.rest_displacements = rest_displacements.as_deref();
        let pose_solver = PoseSolver::new(actor, cfg.pose.clone(), self.reduction);
        let pose = if self.poses.is_empty() {
            let mut p = PoseParams::default();
            for _ in 0..cfg.first_frame_rounds {
                let (q, r) = pose_solver.solve(&frame, &p, 2 * cfg.pose.iterations)?;
                p = q;
                reports.push(r);
            }
            p
        } else {
            frame.prev_joints = self.prev_joints.as_deref();
            let n = self.poses.len();
            let prev2 = (n == 2).then(|| &self.poses[0]);
            let init = extrapolate_pose(self.poses.last(), prev2, skel);
            let (p, r) = pose_solver.solve(&frame, &init, cfg.pose.iterations)?;
            reports.push(r);
            p
        };
        timings.pose = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let transforms = forward_kinematics(skel, &pose);
        let dq = transforms.skinning_pose();
        let skinned = dq_skin(&actor.mesh.rest_vertices, &actor.weights, &dq).positions;
        let carried = match (&self.prev_skinning, warping) {
            (Some(prev), true) => warp_displacements(&self.displacements, &actor.weights, prev, &dq),
            _ => vec![Vec3::zeros(); skinned.len()],
        };
        let mut snap = None;
        let (vertices, displacements) = if cfg.flags.nonrigid {
            let n = self.surfaces.len();
            let prev = self.surfaces.last().cloned();
            let prev2 = (n == 2).then(|| self.surfaces[0].clone());
            let mut state = SurfaceState::new(skinned, carried, prev, prev2)?;
            let solver = NonrigidSolver::new(actor, cfg.nonrigid.clone(), self.reduction);
            let part_mask = cfg.flags.body_part_mask.then(|| {
                build_body_part_mask(
                    self.camera,
                    &state.skinned,
                    &actor.mesh.triangles,
                    solver.vertex_parts(),
                    cfg.nonrigid.dilation,
                )
            });
            let nf = NonrigidFrame {
                index: packet.index,
                camera: self.camera,
                pyramid: &packet.pyramid,
                mask: &packet.mask,
                dt: &packet.dt,
                part_mask: part_mask.as_ref(),
            };
            let corr = solver.correspondences(&nf, &state);
            reports.push(solver.solve(&nf, &mut state, &corr)?);
            if cfg.flags.snapping {
                let s = snap_vertices(
                    &mut state.current,
                    &actor.mesh,
                    self.camera,
                    &packet.dt,
                    &corr.boundary,
                    &cfg.nonrigid.snap,
                );
                snap = Some(SnapStats {
                    snapped: s.snapped.len(),
                    failed: s.failed.len(),
                });
            }
            state.update_displacements();
            (state.current, state.displacements)
        } else {
            let v = skinned.iter().zip(&carried).map(|(s, d)| s + d).collect();
            (v, carried)
        };
        timings.nonrigid = start.elapsed().as_secs_f64();

        let rendered = raster::rasterize(self.camera, &vertices, &actor.mesh.triangles).mask();
        let iou = metric_iou(&rendered, &packet.mask)?;
        log::debug!(
            "frame {}: IoU {:.4}, pose {:.1} ms, non-rigid {:.1} ms, snap {:?}",
            packet.index,
            iou.value,
            1e3 * timings.pose,
            1e3 * timings.nonrigid,
            snap
        );

        Self::push(&mut self.poses, pose.clone());
        Self::push(&mut self.surfaces, vertices.clone());
        self.prev_joints = Some(transforms.positions);
        self.prev_skinning = Some(dq);
        self.displacements = displacements;
        Ok(FrameOutput {
            index: packet.index,
            pose,
            vertices,
            reports,
            snap,
            iou,
            timings,
        })
    }
}

/// Observable order of frame ingest and result emission.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PipelineEvent {
    Ingested(usize),
    Emitted(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub iou: f64,
    pub iou_both_empty: bool,
    pub vertex_error_mm: Option<f64>,
    pub joint_error_mm: Option<f64>,
    /// Initial and final Stage I energy of the last pose solve.
    pub pose_energy: [f64; 2],
    pub nonrigid_energy: Option<[f64; 2]>,
    pub snap: Option<SnapStats>,
    pub flags: BTreeMap<String, usize>,
    pub timings: StageTimings,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub pipelined: bool,
    pub frames: Vec<FrameRecord>,
    pub mean_iou: f64,
    pub mean_vertex_error_mm: Option<f64>,
    pub mean_joint_error_mm: Option<f64>,
    pub mean_timings: StageTimings,
    pub wall_seconds: f64,
    pub frames_per_second: f64,
    pub events: Vec<PipelineEvent>,
}

#[derive(Clone, Debug)]
pub struct SequenceResult {
    pub outputs: Vec<FrameOutput>,
    pub report: SequenceReport,
}

/// Reference surfaces and joints for error metrics.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruth<'a> {
    pub meshes: &'a [Vec<Vec3>],
    pub joints: &'a [Vec<Vec3>],
}

impl SequenceResult {
    /// Fills per-frame vertex and joint errors from ground truth.
    pub fn evaluate(&mut self, actor: &Actor, gt: GroundTruth) -> Result<()> {
        if gt.meshes.len() != self.outputs.len() || gt.joints.len() != self.outputs.len() {
            return Err(Error::Dimension("ground truth frame count".into()));
        }
        for (o, rec) in self.outputs.iter().zip(&mut self.report.frames) {
            let errs = vertex_errors(&o.vertices, &gt.meshes[o.index])?;
            rec.vertex_error_mm = Some(errs.iter().sum::<f64>() / errs.len() as f64);
            let joints = forward_kinematics(&actor.skeleton, &o.pose).positions;
            rec.joint_error_mm = Some(metric_joint_error(&joints, &gt.joints[o.index])?);
        }
        let mean = |f: &dyn Fn(&FrameRecord) -> Option<f64>| {
            let v: Vec<f64> = self.report.frames.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        self.report.mean_vertex_error_mm = mean(&|r| r.vertex_error_mm);
        self.report.mean_joint_error_mm = mean(&|r| r.joint_error_mm);
        Ok(())
    }

    /// Mean over frames of the per-vertex error restricted to `subset`.
    pub fn subset_error_mm(&self, gt: &[Vec<Vec3>], subset: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for o in &self.outputs {
            let errs = vertex_errors(&o.vertices, &gt[o.index])?;
            total += subset.iter().map(|&v| errs[v]).sum::<f64>() / subset.len() as f64;
        }
        Ok(total / self.outputs.len() as f64)
    }
}

fn run_sequential(tracker: &mut Tracker, input: &SequenceInput, config: &SequenceConfig) -> Result<(Vec<FrameOutput>, Vec<PipelineEvent>)> {
    let joint_count = tracker.actor.skeleton.joint_count();
    let mut outputs = Vec::with_capacity(input.len());
    let mut events = Vec::with_capacity(2 * input.len());
    for k in 0..input.len() {
        events.push(PipelineEvent::Ingested(k));
        let pre = preprocess(input, k, config.pyramid_kernels)?;
        let packet = ingest(pre, input, joint_count)?;
        outputs.push(tracker.track(&packet)?);
        events.push(PipelineEvent::Emitted(k));
    }
    Ok((outputs, events))
}

/// Runs `work` on the ticks where this stage has a frame (`tick - delay`
/// in range), synchronized with the other stages at every tick boundary.
fn clocked(ticks: usize, delay: usize, frames: usize, start: &Barrier, end: &Barrier, stop: &AtomicBool, mut work: impl FnMut()) {
    for k in 0..ticks {
        start.wait();
        if !stop.load(Ordering::Acquire) && k >= delay && k - delay < frames {
            work();
        }
        end.wait();
    }
}

fn run_pipelined(tracker: &mut Tracker, input: &SequenceInput, config: &SequenceConfig) -> Result<(Vec<FrameOutput>, Vec<PipelineEvent>)> {
    let n = input.len();
    let ticks = n + PIPELINE_DELAY;
    let joint_count = tracker.actor.skeleton.joint_count();
    let kernels = config.pyramid_kernels;
    let (start, end, stop) = (Barrier::new(4), Barrier::new(4), AtomicBool::new(false));
    let (start, end, stop) = (&start, &end, &stop);
    let (tx_in, rx_in) = sync_channel::<usize>(QUEUE_CAPACITY);
    let (tx_a, rx_a) = sync_channel::<Result<Preprocessed>>(QUEUE_CAPACITY);
    let (tx_b, rx_b) = sync_channel::<Result<FramePacket>>(QUEUE_CAPACITY);
    let (tx_c, rx_c) = sync_channel::<Result<FrameOutput>>(QUEUE_CAPACITY);
    std::thread::scope(|s| {
        s.spawn(move || {
            clocked(ticks, 0, n, start, end, stop, || {
                let k = rx_in.recv().expect("driver sends one index per tick");
                let _ = tx_a.send(preprocess(input, k, kernels));
            })
        });
        s.spawn(move || {
            clocked(ticks, 1, n, start, end, stop, || {
                let pre = rx_a.recv().expect("stage A sends one frame per tick");
                let _ = tx_b.send(pre.and_then(|p| ingest(p, input, joint_count)));
            })
        });
        s.spawn(move || {
            clocked(ticks, PIPELINE_DELAY, n, start, end, stop, || {
                let packet = rx_b.recv().expect("stage B sends one frame per tick");
                let _ = tx_c.send(packet.and_then(|p| tracker.track(&p)));
            })
        });
        let mut outputs = Vec::with_capacity(n);
        let mut events = Vec::with_capacity(2 * n);
        let mut failure = None;
        for k in 0..ticks {
            if k < n && failure.is_none() {
                tx_in.send(k).expect("stage A is alive");
                events.push(PipelineEvent::Ingested(k));
            }
            start.wait();
            end.wait();
            if k >= PIPELINE_DELAY && failure.is_none() {
                match rx_c.try_recv() {
                    Ok(Ok(o)) => {
                        events.push(PipelineEvent::Emitted(o.index));
                        outputs.push(o);
                    }
                    Ok(Err(e)) => failure = Some(e),
                    Err(TryRecvError::Empty | TryRecvError::Disconnected) => {
                        failure = Some(Error::Frame {
                            index: k - PIPELINE_DELAY,
                            msg: "pipeline produced no result".into(),
                        })
                    }
                }
                if failure.is_some() {
                    stop.store(true, Ordering::Release);
                }
            }
        }
        match failure {
            Some(e) => Err(e),
            None => Ok((outputs, events)),
        }
    })
}

/// Tracks every frame of `input` with `actor` (no file I/O).
pub fn track_sequence(actor: &Actor, input: &SequenceInput, config: &SequenceConfig) -> Result<SequenceResult> {
    config.validate()?;
    if input.is_empty() {
        return Err(Error::Config("sequence has no frames".into()));
    }
    let wall = Instant::now();
    let mut tracker = Tracker::new(actor, &input.camera, config);
    let (mut outputs, events) = if config.flags.pipelined {
        run_pipelined(&mut tracker, input, config)?
    } else {
        run_sequential(&mut tracker, input, config)?
    };
    if config.flags.smoothing {
        let traj: Vec<Vec<Vec3>> = outputs.iter().map(|o| o.vertices.clone()).collect();
        for (o, v) in outputs.iter_mut().zip(smooth_trajectories(&traj, config.smoothing_stencil)) {
            o.vertices = v;
        }
    }
    let wall_seconds = wall.elapsed().as_secs_f64();
    let n = outputs.len() as f64;
    let mut mean_timings = StageTimings::default();
    let frames: Vec<FrameRecord> = outputs
        .iter()
        .map(|o| {
            let t = &o.timings;
            mean_timings.preprocess += t.preprocess / n;
            mean_timings.detections += t.detections / n;
            mean_timings.pose += t.pose / n;
            mean_timings.nonrigid += t.nonrigid / n;
            let mut flags = BTreeMap::new();
            for r in &o.reports {
                for (k, v) in &r.flags {
                    *flags.entry(format!("{}.{k}", r.stage)).or_insert(0) += v;
                }
            }
            let pose = o.reports.iter().rev().find(|r| r.stage == "pose").expect("pose solve ran");
            FrameRecord {
                index: o.index,
                iou: o.iou.value,
                iou_both_empty: o.iou.both_empty,
                vertex_error_mm: None,
                joint_error_mm: None,
                pose_energy: [pose.initial_energy(), pose.final_energy()],
                nonrigid_energy: o
                    .reports
                    .iter()
                    .find(|r| r.stage == "nonrigid")
                    .map(|r| [r.initial_energy(), r.final_energy()]),
                snap: o.snap,
                flags,
                timings: o.timings,
            }
        })
        .collect();
    let report = SequenceReport {
        pipelined: config.flags.pipelined,
        mean_iou: frames.iter().map(|f| f.iou).sum::<f64>() / n,
        frames,
        mean_vertex_error_mm: None,
        mean_joint_error_mm: None,
        mean_timings,
        wall_seconds,
        frames_per_second: n / wall_seconds,
        events,
    };
    Ok(SequenceResult { outputs, report })
}
