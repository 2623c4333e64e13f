//! On-disk sequence layout: inputs, and the `poses/`, `meshes/`, `logs/`
//! and `report.json` outputs.

use std::path::{Path, PathBuf};

use crate::camera::CameraIntrinsics;
use crate::pose_stage::parse_detections;
use crate::skinning::poses_to_text;
use crate::template::{load_actor, write_obj, Actor};
use crate::{Error, Result};

use super::config::SequenceConfig;
use super::driver::{ImageSource, SequenceInput, SequenceResult};

/// `dir/NNNNN.png` for frame `t`.
pub fn frame_file(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("{t:05}.png"))
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn count_frames(dir: &Path) -> Result<usize> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if e.path().extension().is_some_and(|x| x == "png") {
            n += 1;
        }
    }
    Ok(n)
}

/// Loads the actor, camera and frame list named by `config.paths`. The
/// detection file sets the frame count; a different number of frame or
/// mask files aborts.
pub fn load_sequence(config: &SequenceConfig) -> Result<(Actor, SequenceInput<'static>)> {
    let p = &config.paths;
    let actor = load_actor(&p.template, &p.skeleton, &p.skinning)?;
    let camera = CameraIntrinsics::load(&p.calibration)?;
    let text = std::fs::read_to_string(&p.detections).map_err(|e| Error::io(&p.detections, e))?;
    let detections = parse_detections(&text, &p.detections)?;
    for dir in [&p.frames, &p.masks] {
        let n = count_frames(dir)?;
        if n != detections.len() {
            return Err(Error::Config(format!(
                "{} has {n} frames but {} has {} detection records",
                dir.display(),
                p.detections.display(),
                detections.len()
            )));
        }
    }
    let input = SequenceInput {
        camera,
        images: ImageSource::Disk {
            frames: p.frames.clone(),
            masks: p.masks.clone(),
        },
        detections,
    };
    Ok((actor, input))
}

/// Writes `poses/poses.txt`, `meshes/NNNNN.obj`, `logs/NNNNN.json` and
/// `report.json` under `dir`.
pub fn write_outputs(dir: &Path, actor: &Actor, result: &SequenceResult) -> Result<()> {
    for sub in ["poses", "meshes", "logs"] {
        create_dir(&dir.join(sub))?;
    }
    let poses: Vec<_> = result.outputs.iter().map(|o| o.pose.clone()).collect();
    write_file(&dir.join("poses").join("poses.txt"), &poses_to_text(&poses))?;
    for o in &result.outputs {
        let stem = format!("{:05}", o.index);
        write_file(
            &dir.join("meshes").join(format!("{stem}.obj")),
            &write_obj(&o.vertices, &actor.mesh.triangles),
        )?;
        let log = serde_json::to_string_pretty(&o.reports).expect("reports serialize");
        write_file(&dir.join("logs").join(format!("{stem}.json")), &log)?;
    }
    let report = serde_json::to_string_pretty(&result.report).expect("report serializes");
    write_file(&dir.join("report.json"), &report)
}
