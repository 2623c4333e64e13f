//! Procedural default actor: a 18-joint skeleton and a rigged mesh built
//! from tubes, a head sphere and an optional skirt.
//!
//! The camera looks down +z with image y pointing down, so "up" on the
//! actor is −y. The actor faces the camera (−z); its right side is at −x.

use std::f64::consts::PI;

use crate::camera::CameraIntrinsics;
use crate::template::{Actor, MaterialClass, Skeleton, SkinningWeights, TemplateMesh};
use crate::{Result, Vec3};

/// Joint order, parent, offset, kind and part of the default skeleton,
/// followed by its 27 degrees of freedom and the four face markers.
/// Detections use the same joint order, then the markers.
pub const DEFAULT_SKELETON: &str = "\
# joint name parent x y z kind part
joint pelvis - 0 0 0 torso torso
joint spine pelvis 0 -0.15 0 torso torso
joint chest spine 0 -0.13 0.02 torso torso
joint thorax chest 0 -0.12 0.02 torso torso
joint neck thorax 0 -0.15 -0.03 torso head
joint head neck 0 -0.12 0 head head
joint r_shoulder thorax -0.18 -0.05 0 shoulder right_arm
joint r_elbow r_shoulder -0.28 0 0 elbow right_arm
joint r_wrist r_elbow -0.25 0 0 hand right_arm
joint l_shoulder thorax 0.18 -0.05 0 shoulder left_arm
joint l_elbow l_shoulder 0.28 0 0 elbow left_arm
joint l_wrist l_elbow 0.25 0 0 hand left_arm
joint r_hip pelvis -0.1 0.05 0 torso right_leg
joint r_knee r_hip 0 0.42 0 knee right_leg
joint r_ankle r_knee 0 0.42 0 foot right_leg
joint l_hip pelvis 0.1 0.05 0 torso left_leg
joint l_knee l_hip 0 0.42 0 knee left_leg
joint l_ankle l_knee 0 0.42 0 foot left_leg
# dof joint ax ay az min max
dof spine 1 0 0 -0.6 0.6
dof spine 0 1 0 -0.5 0.5
dof spine 0 0 1 -0.5 0.5
dof chest 1 0 0 -0.4 0.4
dof thorax 1 0 0 -0.5 0.5
dof thorax 0 0 1 -0.4 0.4
dof neck 1 0 0 -0.6 0.6
dof neck 0 0 1 -0.5 0.5
dof head 1 0 0 -0.7 0.7
dof head 0 1 0 -1.0 1.0
dof head 0 0 1 -0.6 0.6
dof r_shoulder 1 0 0 -1.0 1.0
dof r_shoulder 0 1 0 -1.6 1.6
dof r_shoulder 0 0 1 -1.6 1.6
dof r_elbow 0 1 0 -2.5 0.1
dof l_shoulder 1 0 0 -1.0 1.0
dof l_shoulder 0 1 0 -1.6 1.6
dof l_shoulder 0 0 1 -1.6 1.6
dof l_elbow 0 1 0 -0.1 2.5
dof r_hip 1 0 0 -2.0 1.0
dof r_hip 0 1 0 -0.8 0.8
dof r_hip 0 0 1 -0.8 0.8
dof r_knee 1 0 0 -0.1 2.5
dof l_hip 1 0 0 -2.0 1.0
dof l_hip 0 1 0 -0.8 0.8
dof l_hip 0 0 1 -0.8 0.8
dof l_knee 1 0 0 -0.1 2.5
# marker x y z (head frame: left eye, right eye, nose, chin)
marker 0.035 -0.13 -0.1
marker -0.035 -0.13 -0.1
marker 0 -0.1 -0.122
marker 0 -0.02 -0.09
";

const HEAD_CENTER: f64 = -0.11;
const HEAD_RADIUS: f64 = 0.12;

#[derive(Clone, Debug)]
pub struct HumanoidOptions {
    /// Vertices per tube ring.
    pub segments: usize,
    /// Target distance between tube rings (meters).
    pub ring_spacing: f64,
    pub skirt: bool,
    /// Pelvis depth in front of the camera.
    pub depth: f64,
}

impl Default for HumanoidOptions {
    fn default() -> Self {
        HumanoidOptions {
            segments: 20,
            ring_spacing: 0.036,
            skirt: true,
            depth: 3.0,
        }
    }
}

impl HumanoidOptions {
    /// Low-resolution variant for fast tests.
    pub fn coarse() -> Self {
        HumanoidOptions {
            segments: 8,
            ring_spacing: 0.1,
            ..Default::default()
        }
    }
}

pub fn default_skeleton(depth: f64) -> Skeleton {
    let mut s = Skeleton::parse(DEFAULT_SKELETON, std::path::Path::new("default skeleton"))
        .expect("built-in skeleton is valid");
    s.joints[0].offset = Vec3::new(0.0, 0.0, depth);
    s
}

/// Camera framing the default actor at 3 m for a `width × height` image.
pub fn default_camera(width: usize, height: usize) -> CameraIntrinsics {
    let f = 300.0 * height as f64 / 240.0;
    CameraIntrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
        .expect("positive focal length")
}

struct Builder {
    v: Vec<Vec3>,
    t: Vec<[usize; 3]>,
    c: Vec<Vec3>,
    l: Vec<MaterialClass>,
    w: Vec<Vec<(usize, f64)>>,
}

/// One end-to-end blend between consecutive owners of a straight chain.
struct Chain<'a> {
    /// Owning joint for each stretch, with the axis coordinate where the
    /// next owner takes over.
    owners: &'a [(usize, f64)],
    blend: f64,
}

impl Chain<'_> {
    fn weights(&self, s: f64) -> Vec<(usize, f64)> {
        let n = self.owners.len();
        for k in 0..n {
            let (j, end) = self.owners[k];
            if k + 1 == n || s < end - self.blend {
                return vec![(j, 1.0)];
            }
            if s <= end + self.blend {
                let b = (s - (end - self.blend)) / (2.0 * self.blend);
                let next = self.owners[k + 1].0;
                if b <= 0.0 {
                    return vec![(j, 1.0)];
                }
                if b >= 1.0 {
                    return vec![(next, 1.0)];
                }
                return vec![(j, 1.0 - b), (next, b)];
            }
        }
        unreachable!()
    }
}

#[allow(clippy::too_many_arguments)]
impl Builder {
    /// Straight tube from `start` along unit `axis` with elliptical rings
    /// spanned by `u` and `v`. `radius(s)` returns the two semi-axes.
    fn tube(
        &mut self,
        start: Vec3,
        axis: Vec3,
        length: f64,
        u: Vec3,
        v: Vec3,
        segments: usize,
        spacing: f64,
        caps: bool,
        radius: impl Fn(f64) -> (f64, f64),
        attrs: impl Fn(f64, f64) -> (Vec3, u8),
        chain: &Chain,
    ) {
        // Wind triangles so that normals point outward.
        let v = if u.cross(&v).dot(&axis) < 0.0 { -v } else { v };
        let rings = ((length / spacing).round() as usize).max(2);
        let base = self.v.len();
        for r in 0..=rings {
            let s = length * r as f64 / rings as f64;
            let (ra, rb) = radius(s);
            for k in 0..segments {
                let a = 2.0 * PI * k as f64 / segments as f64;
                self.push(
                    start + axis * s + u * (ra * a.cos()) + v * (rb * a.sin()),
                    attrs(s, a),
                    chain.weights(s),
                );
            }
        }
        let idx = |r: usize, k: usize| base + r * segments + k % segments;
        for r in 0..rings {
            for k in 0..segments {
                let (a, b, c, d) = (idx(r, k), idx(r, k + 1), idx(r + 1, k + 1), idx(r + 1, k));
                self.t.push([a, b, c]);
                self.t.push([a, c, d]);
            }
        }
        if caps {
            for (r, s) in [(0, 0.0), (rings, length)] {
                let center = self.v.len();
                self.push(start + axis * s, attrs(s, 0.0), chain.weights(s));
                for k in 0..segments {
                    if r == 0 {
                        self.t.push([center, idx(r, k + 1), idx(r, k)]);
                    } else {
                        self.t.push([center, idx(r, k), idx(r, k + 1)]);
                    }
                }
            }
        }
    }

    fn push(&mut self, p: Vec3, (color, class): (Vec3, u8), w: Vec<(usize, f64)>) {
        self.v.push(p);
        self.c.push(color.map(|x| x.clamp(0.0, 1.0)));
        self.l.push(MaterialClass::new(class).expect("valid class"));
        self.w.push(w);
    }
}

fn pattern(base: Vec3, s: f64, a: f64, wavelength: f64) -> Vec3 {
    let t = 0.12 * (2.0 * PI * s / wavelength).sin() + 0.08 * (2.0 * a).cos();
    base + Vec3::repeat(t)
}

/// Builds the default rigged actor.
pub fn humanoid(opts: &HumanoidOptions) -> Result<Actor> {
    let skeleton = default_skeleton(opts.depth);
    let rest = skeleton.rest_positions();
    let j = |n: &str| skeleton.joint_index(n).expect("default joint");
    let mut b = Builder {
        v: Vec::new(),
        t: Vec::new(),
        c: Vec::new(),
        l: Vec::new(),
        w: Vec::new(),
    };
    let (seg, sp) = (opts.segments, opts.ring_spacing);
    let pelvis = rest[0];
    let (x, y, z) = (Vec3::x(), Vec3::y(), Vec3::z());

    // Torso, bottom (+y) to top, with pelvis/spine/thorax ownership.
    let torso_bottom = pelvis + y * 0.1;
    let torso_len = 0.62;
    let shirt = Vec3::new(0.25, 0.45, 0.7);
    b.tube(
        torso_bottom,
        -y,
        torso_len,
        x,
        z,
        seg,
        sp,
        true,
        |s| (0.15 + 0.02 * (s / torso_len), 0.1),
        |s, a| (pattern(shirt, s, a, 0.2), 2),
        &Chain {
            owners: &[(j("pelvis"), 0.25), (j("spine"), 0.38), (j("chest"), 0.5), (j("thorax"), f64::INFINITY)],
            blend: 0.04,
        },
    );

    // Neck.
    let neck_bottom = rest[j("thorax")] - y * 0.08;
    b.tube(
        neck_bottom,
        -y,
        0.2,
        x,
        z,
        seg.max(6) / 2,
        sp,
        true,
        |_| (0.05, 0.05),
        |s, a| (pattern(Vec3::new(0.85, 0.65, 0.55), s, a, 0.3), 5),
        &Chain {
            owners: &[(j("thorax"), 0.07), (j("neck"), 0.19), (j("head"), f64::INFINITY)],
            blend: 0.02,
        },
    );

    // Arms: right along −x, left along +x.
    for (side, sign) in [("r", -1.0), ("l", 1.0)] {
        let sh = j(&format!("{side}_shoulder"));
        let start = rest[j("thorax")] + Vec3::new(sign * 0.12, -0.05, 0.0);
        let arm_color = Vec3::new(0.85, 0.65, 0.55);
        b.tube(
            start,
            x * sign,
            0.69,
            -y,
            z,
            seg.max(6) * 3 / 4,
            sp,
            true,
            |s| {
                let r = if s < 0.34 { 0.055 } else { 0.045 };
                (r, r)
            },
            |s, a| if s > 0.6 { (Vec3::new(0.9, 0.9, 0.85), 6) } else { (pattern(arm_color, s, a, 0.25), 5) },
            &Chain {
                owners: &[(j("thorax"), 0.06), (sh, 0.34), (sh + 1, 0.59), (sh + 2, f64::INFINITY)],
                blend: 0.03,
            },
        );
    }

    // Legs.
    for (side, sign) in [("r", -1.0), ("l", 1.0)] {
        let hip = j(&format!("{side}_hip"));
        let start = pelvis + Vec3::new(sign * 0.1, 0.0, 0.0);
        let pants = Vec3::new(0.3, 0.3, 0.35);
        b.tube(
            start,
            y,
            0.95,
            x,
            z,
            seg.max(6) * 3 / 4,
            sp,
            true,
            |s| {
                let r = if s < 0.47 { 0.075 } else { 0.06 };
                (r, r)
            },
            |s, a| if s > 0.88 { (Vec3::new(0.15, 0.1, 0.1), 6) } else { (pattern(pants, s, a, 0.3), 3) },
            &Chain {
                owners: &[(j("pelvis"), 0.05), (hip, 0.47), (hip + 1, 0.89), (hip + 2, f64::INFINITY)],
                blend: 0.04,
            },
        );
    }

    // Head sphere, rigid to the head joint.
    let head = j("head");
    let center = rest[head] + y * HEAD_CENTER;
    let rings = ((PI * HEAD_RADIUS / sp).round() as usize).max(4);
    let (sv, st) = crate::shapes::uv_sphere(center, HEAD_RADIUS, rings, seg);
    let base = b.v.len();
    for p in sv {
        let d = (p - center) / HEAD_RADIUS;
        let hair = d.y < -0.2 || d.z > 0.3;
        let color = if hair {
            Vec3::new(0.25, 0.15, 0.08) + Vec3::repeat(0.05 * (6.0 * d.x).sin())
        } else {
            Vec3::new(0.9, 0.7, 0.6) + Vec3::repeat(0.06 * (5.0 * d.y).cos())
        };
        b.push(p, (color, 7), vec![(head, 1.0)]);
    }
    b.t.extend(st.iter().map(|t| t.map(|i| i + base)));

    // Skirt: open cone hanging from the waist.
    if opts.skirt {
        let top = pelvis - y * 0.02;
        b.tube(
            top,
            y,
            0.4,
            x,
            z,
            seg * 3 / 2,
            sp,
            false,
            |s| (0.175 + 0.3 * s, 0.115 + 0.25 * s),
            |s, a| {
                let stripes = Vec3::new(0.2, 0.3, 0.15) * (5.0 * a).sin();
                (pattern(Vec3::new(0.6, 0.3, 0.3), s, a, 0.15) + stripes, 1)
            },
            &Chain {
                owners: &[(j("pelvis"), f64::INFINITY)],
                blend: 0.01,
            },
        );
    }

    let n = b.v.len();
    let mesh = TemplateMesh::new(b.v, b.t, b.c, b.l)?;
    let weights = SkinningWeights::new(b.w, skeleton.joint_count())?;
    debug_assert_eq!(weights.influences.len(), n);
    Actor::new(mesh, skeleton, weights)
}

/// Vertices of the skirt (class 1) of a default actor.
pub fn cloth_vertices(actor: &Actor) -> Vec<usize> {
    (0..actor.mesh.vertex_count())
        .filter(|&v| actor.mesh.vertex_labels[v].id() == 1)
        .collect()
}

/// Vertices of the head sphere (class 7).
pub fn head_vertices(actor: &Actor) -> Vec<usize> {
    (0..actor.mesh.vertex_count())
        .filter(|&v| actor.mesh.vertex_labels[v].id() == 7)
        .collect()
}
