use perfcap_core::humanoid::{default_camera, humanoid, HumanoidOptions};
use perfcap_core::pipeline::*;
use perfcap_core::template::load_actor;
use perfcap_core::Error;

fn write_sequence(frames: usize) -> (tempfile::TempDir, SequenceConfig) {
    let actor = humanoid(&HumanoidOptions::coarse()).unwrap();
    let seq = generate_synthetic_sequence(&actor, &default_camera(160, 120), &MotionScript::skirt(frames)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = write_synthetic_sequence(&seq, &actor, dir.path()).unwrap();
    (dir, config)
}

#[test]
fn disk_round_trip_writes_every_output() {
    let (dir, _) = write_sequence(4);
    let config = SequenceConfig::load(&dir.path().join("config.toml")).unwrap();
    let result = run_sequence(&config).unwrap();
    assert_eq!(result.outputs.len(), 4);
    let out = dir.path().join("output");
    for t in 0..4 {
        assert!(out.join("meshes").join(format!("{t:05}.obj")).is_file());
        assert!(out.join("logs").join(format!("{t:05}.json")).is_file());
    }
    let poses = std::fs::read_to_string(out.join("poses").join("poses.txt")).unwrap();
    assert_eq!(poses.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).count(), 4);
    let report: SequenceReport = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report, result.report);
}

#[test]
fn disk_and_memory_inputs_agree() {
    let actor = humanoid(&HumanoidOptions::coarse()).unwrap();
    let seq = generate_synthetic_sequence(&actor, &default_camera(160, 120), &MotionScript::skirt(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = write_synthetic_sequence(&seq, &actor, dir.path()).unwrap();
    let (loaded, input) = load_sequence(&config).unwrap();
    let from_disk = track_sequence(&loaded, &input, &config).unwrap();
    let in_memory = track_sequence(&actor, &seq.input(), &config).unwrap();
    // Text formats round the template and camera in the last digits.
    for (a, b) in from_disk.outputs.iter().zip(&in_memory.outputs) {
        let (pa, pb) = (a.pose.to_vector(), b.pose.to_vector());
        assert!(pa.iter().zip(&pb).all(|(x, y)| (x - y).abs() < 1e-6));
        let worst = a.vertices.iter().zip(&b.vertices).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }
    let p = &config.paths;
    let again = load_actor(&p.template, &p.skeleton, &p.skinning).unwrap();
    assert_eq!(again.mesh.vertex_count(), actor.mesh.vertex_count());
}

#[test]
fn frame_count_mismatch_aborts() {
    let (_dir, config) = write_sequence(3);
    std::fs::remove_file(frame_file(&config.paths.masks, 2)).unwrap();
    assert!(matches!(run_sequence(&config), Err(Error::Config(_))));
}

#[test]
fn missing_frame_file_aborts_with_its_index() {
    let (_dir, config) = write_sequence(3);
    let frames = &config.paths.frames;
    std::fs::rename(frame_file(frames, 1), frames.join("renamed.png")).unwrap();
    match run_sequence(&config) {
        Err(Error::Frame { index, .. }) => assert_eq!(index, 1),
        other => panic!("{:?}", other.map(|r| r.outputs.len())),
    }
}
