//! Sequence configuration, the frame pipeline, evaluation metrics and
//! synthetic data.

mod config;
mod driver;
mod io;
mod metrics;
mod synthetic;

pub use config::{PipelineFlags, SequenceConfig, SequencePaths};
pub use driver::{
    track_sequence, FramePacket, FrameOutput, FrameRecord, GroundTruth, ImageSource, InputFrame, PipelineEvent,
    SequenceInput, SequenceReport, SequenceResult, SnapStats, StageTimings, Tracker, PIPELINE_DELAY,
    QUEUE_CAPACITY,
};
pub use io::{frame_file, load_sequence, write_outputs};
pub use metrics::{
    metric_iou, metric_joint_error, metric_vertex_error, similarity_alignment, smooth_trajectories, vertex_errors,
    Iou, Similarity,
};
pub use synthetic::{
    cloth_displacements, generate_synthetic_sequence, resolve_dof, scripted_poses, write_synthetic_sequence,
    ClothSwing, DofCurve, MotionScript, SyntheticSequence,
};

use crate::Result;

/// Loads the sequence named by `config.paths`, tracks it and writes the
/// outputs to `config.paths.output`.
pub fn run_sequence(config: &SequenceConfig) -> Result<SequenceResult> {
    let (actor, input) = load_sequence(config)?;
    let result = track_sequence(&actor, &input, config)?;
    write_outputs(&config.paths.output, &actor, &result)?;
    Ok(result)
}
