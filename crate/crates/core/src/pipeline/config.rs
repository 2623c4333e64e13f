//! Sequence configuration with the published default parameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::imageproc::PYRAMID_KERNELS;
use crate::nonrigid_stage::NonrigidHyperparams;
use crate::pose_stage::PoseHyperparams;
use crate::template::NON_RIGIDITY_WEIGHTS;
use crate::{Error, Result};

/// Input and output locations. Relative paths are resolved against the
/// directory of the config file by [`SequenceConfig::load`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequencePaths {
    /// Template OBJ; per-vertex attributes live next to it.
    pub template: PathBuf,
    pub skeleton: PathBuf,
    pub skinning: PathBuf,
    pub calibration: PathBuf,
    /// Directory of `NNNNN.png` color frames.
    pub frames: PathBuf,
    /// Directory of `NNNNN.png` foreground masks.
    pub masks: PathBuf,
    /// JSON-lines detections, one record per frame.
    pub detections: PathBuf,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineFlags {
    /// Deterministic reductions; required for bit-identical reruns.
    pub reproducible: bool,
    /// Overlap preprocessing, detection ingest and solving across frames.
    pub pipelined: bool,
    /// Run Stage II. Off gives pose-only tracking.
    pub nonrigid: bool,
    pub snapping: bool,
    pub displacement_warping: bool,
    pub body_part_mask: bool,
    /// Offline temporal smoothing of the output vertex trajectories.
    pub smoothing: bool,
}

impl Default for PipelineFlags {
    fn default() -> Self {
        PipelineFlags {
            reproducible: true,
            pipelined: true,
            nonrigid: true,
            snapping: true,
            displacement_warping: true,
            body_part_mask: true,
            smoothing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub paths: SequencePaths,
    pub flags: PipelineFlags,
    pub pose: PoseHyperparams,
    pub nonrigid: NonrigidHyperparams,
    /// Non-rigidity weight of material classes 1 to 7.
    pub material_weights: [f64; 7],
    /// Photometric pyramid blur kernels, coarse to fine.
    pub pyramid_kernels: [usize; 3],
    /// Temporal smoothing stencil over frames `t-1, t, t+1`.
    pub smoothing_stencil: [f64; 3],
    /// Pose-only solves on the first frame, each with twice the iterations.
    pub first_frame_rounds: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            paths: SequencePaths::default(),
            flags: PipelineFlags::default(),
            pose: PoseHyperparams::default(),
            nonrigid: NonrigidHyperparams::default(),
            material_weights: NON_RIGIDITY_WEIGHTS,
            pyramid_kernels: PYRAMID_KERNELS,
            smoothing_stencil: [0.15, 0.7, 0.15],
            first_frame_rounds: 2,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.pyramid_kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("pyramid kernels must be odd, got {:?}", self.pyramid_kernels));
        }
        if self.material_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return bad("material weights must be positive".into());
        }
        let s = self.smoothing_stencil;
        if s.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("smoothing stencil {s:?} must be non-negative and sum to 1"));
        }
        if self.first_frame_rounds == 0 {
            return bad("first_frame_rounds must be at least 1".into());
        }
        let h = &self.nonrigid;
        if h.gn_steps == 0 || self.pose.iterations == 0 {
            return bad("iteration counts must be positive".into());
        }
        let weights = [
            self.pose.lambda_2d,
            self.pose.lambda_3d,
            self.pose.lambda_silhouette,
            self.pose.lambda_temporal,
            self.pose.lambda_anatomic,
            h.w_photo,
            h.w_silhouette,
            h.w_smooth,
            h.w_edge,
            h.w_velocity,
            h.w_acceleration,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("energy weights must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: SequenceConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Reads a TOML config and resolves relative paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.paths.resolve(base);
        Ok(c)
    }
}

impl SequencePaths {
    pub fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.template,
            &mut self.skeleton,
            &mut self.skinning,
            &mut self.calibration,
            &mut self.frames,
            &mut self.masks,
            &mut self.detections,
            &mut self.output,
        ] {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
