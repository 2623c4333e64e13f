//! Small procedural meshes for tests and the synthetic generator.

use crate::Vec3;

/// Axis-aligned square in the plane `z = center.z`, facing the camera.
pub fn quad(center: Vec3, half: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let v = vec![
        center + Vec3::new(-half, -half, 0.0),
        center + Vec3::new(half, -half, 0.0),
        center + Vec3::new(half, half, 0.0),
        center + Vec3::new(-half, half, 0.0),
    ];
    (v, vec![[0, 1, 2], [0, 2, 3]])
}

/// Latitude/longitude sphere with its poles on the y axis. Triangles are
/// wound counter-clockwise seen from outside.
pub fn uv_sphere(center: Vec3, radius: f64, rings: usize, segments: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    assert!(rings >= 2 && segments >= 3);
    let mut v = vec![center + Vec3::new(0.0, -radius, 0.0)];
    for r in 1..rings {
        let phi = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let lam = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            v.push(center + radius * Vec3::new(phi.sin() * lam.cos(), -phi.cos(), phi.sin() * lam.sin()));
        }
    }
    v.push(center + Vec3::new(0.0, radius, 0.0));
    let top = v.len() - 1;
    let idx = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;
    let mut t = Vec::new();
    for s in 0..segments {
        t.push([0, idx(1, s), idx(1, s + 1)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (idx(r, s), idx(r, s + 1), idx(r + 1, s + 1), idx(r + 1, s));
            t.push([a, d, c]);
            t.push([a, c, b]);
        }
    }
    for s in 0..segments {
        t.push([top, idx(rings - 1, s + 1), idx(rings - 1, s)]);
    }
    (v, t)
}
