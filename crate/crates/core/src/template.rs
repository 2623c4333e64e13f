//! The actor model: rest mesh with colors and material labels, the kinematic
//! skeleton, skinning weights, and the material-dependent per-edge
//! non-rigidity weights used by the surface regularizers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::imageproc::Grid;
use crate::raster;
use crate::{Error, Result, Vec3};

/// Number of joint-angle degrees of freedom of every skeleton.
pub const DOF_COUNT: usize = 27;
/// Face markers (eyes, nose, chin) rigidly attached to the head joint.
pub const MARKER_COUNT: usize = 4;
/// Maximum number of joint influences per skinned vertex.
pub const MAX_INFLUENCES: usize = 4;

/// Non-rigidity weight of material classes 1 through 7.
pub const NON_RIGIDITY_WEIGHTS: [f64; 7] = [1.0, 2.0, 2.5, 3.0, 50.0, 100.0, 200.0];

/// Class used for vertices without a valid observation and for parsing
/// labels missing from the binning table.
pub const DEFAULT_CLASS: MaterialClass = MaterialClass(5);

/// One of the seven non-rigidity classes, 1 = loose cloth ... 7 = head/hair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MaterialClass(u8);

impl MaterialClass {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=7).contains(&id) {
            Ok(MaterialClass(id))
        } else {
            Err(Error::UnknownClass(id))
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn weight(self) -> f64 {
        NON_RIGIDITY_WEIGHTS[self.0 as usize - 1]
    }
}

pub fn class_weight(class_id: u8) -> Result<f64> {
    MaterialClass::new(class_id).map(MaterialClass::weight)
}

/// Per-edge weight: the mean of the two endpoint class weights.
#[inline]
pub fn averaged_weight(a: MaterialClass, b: MaterialClass) -> f64 {
    (a.weight() + b.weight()) / 2.0
}

/// Mapping from the 20 human-parsing labels (1-based) to material classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBinning {
    table: BTreeMap<u8, MaterialClass>,
}

/// Parsing label names in label-id order (id = position + 1).
pub const PARSING_LABELS: [&str; 20] = [
    "background",
    "hat",
    "hair",
    "glove",
    "sunglasses",
    "upper-clothes",
    "dress",
    "coat",
    "socks",
    "pants",
    "jumpsuits",
    "scarf",
    "skirt",
    "face",
    "left-arm",
    "right-arm",
    "left-leg",
    "right-leg",
    "left-shoe",
    "right-shoe",
];

impl Default for LabelBinning {
    fn default() -> Self {
        let class_of = |name: &str| -> u8 {
            match name {
                "dress" | "coat" | "jumpsuits" | "skirt" | "background" => 1,
                "upper-clothes" => 2,
                "pants" => 3,
                "scarf" => 4,
                "left-leg" | "right-leg" | "left-arm" | "right-arm" | "socks" => 5,
                "hat" | "glove" | "left-shoe" | "right-shoe" => 6,
                "hair" | "face" | "sunglasses" => 7,
                _ => DEFAULT_CLASS.0,
            }
        };
        let table = PARSING_LABELS
            .iter()
            .enumerate()
            .map(|(i, n)| (i as u8 + 1, MaterialClass(class_of(n))))
            .collect();
        LabelBinning { table }
    }
}

impl LabelBinning {
    pub fn class_of(&self, label: u8) -> MaterialClass {
        self.table.get(&label).copied().unwrap_or(DEFAULT_CLASS)
    }

    pub fn set(&mut self, label: u8, class: MaterialClass) {
        self.table.insert(label, class);
    }

    /// Rows of `label class`; labels not listed fall back to class 5.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (i, line) in data_lines(text) {
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 2 {
                return Err(Error::parse(path, i, "expected `label class`"));
            }
            let label: u8 = t[0].parse().map_err(|_| Error::parse(path, i, "bad label"))?;
            let class: u8 = t[1].parse().map_err(|_| Error::parse(path, i, "bad class"))?;
            table.insert(label, MaterialClass::new(class)?);
        }
        Ok(LabelBinning { table })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# parsing-label material-class\n");
        for (l, c) in &self.table {
            let _ = writeln!(s, "{l} {}", c.0);
        }
        s
    }
}

/// Rest-pose actor mesh with per-vertex colors and material classes.
#[derive(Clone, Debug)]
pub struct TemplateMesh {
    pub rest_vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub vertex_colors: Vec<Vec3>,
    pub vertex_labels: Vec<MaterialClass>,
    /// Sorted neighbor indices of every vertex.
    pub one_ring: Vec<Vec<usize>>,
    /// Undirected edges `[i, j]` with `i < j`.
    pub edges: Vec<[usize; 2]>,
    /// Non-rigidity weight `s_ij` of every undirected edge.
    pub edge_weights: Vec<f64>,
    /// Triangles adjacent to each undirected edge.
    pub edge_faces: Vec<Vec<usize>>,
    /// For vertex `i`, the edge index of each entry of `one_ring[i]`.
    ring_edges: Vec<Vec<usize>>,
}

impl TemplateMesh {
    pub fn new(
        rest_vertices: Vec<Vec3>,
        triangles: Vec<[usize; 3]>,
        vertex_colors: Vec<Vec3>,
        vertex_labels: Vec<MaterialClass>,
    ) -> Result<Self> {
        let n = rest_vertices.len();
        if vertex_colors.len() != n || vertex_labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} vertices but {} colors and {} labels",
                n,
                vertex_colors.len(),
                vertex_labels.len()
            )));
        }
        for (i, v) in rest_vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::invariant("vertex", i, "non-finite position"));
            }
        }
        for (i, c) in vertex_colors.iter().enumerate() {
            if !c.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::invariant("vertex color", i, "channel outside [0, 1]"));
            }
        }
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(Error::invariant("triangle", t, "vertex index out of range"));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::invariant("triangle", t, "repeated vertex index"));
            }
        }
        let mut edge_set = std::collections::BTreeSet::new();
        for tri in &triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                edge_set.insert([a.min(b), a.max(b)]);
            }
        }
        let edges: Vec<[usize; 2]> = edge_set.into_iter().collect();
        let mut one_ring = vec![Vec::new(); n];
        let mut ring_edges = vec![Vec::new(); n];
        for (e, &[a, b]) in edges.iter().enumerate() {
            one_ring[a].push((b, e));
            one_ring[b].push((a, e));
        }
        let mut rings = Vec::with_capacity(n);
        for (i, mut ring) in one_ring.into_iter().enumerate() {
            if ring.len() < 2 {
                return Err(Error::invariant(
                    "vertex",
                    i,
                    format!("has {} neighbors, at least 2 required", ring.len()),
                ));
            }
            ring.sort_unstable();
            ring_edges[i] = ring.iter().map(|&(_, e)| e).collect();
            rings.push(ring.into_iter().map(|(j, _)| j).collect());
        }
        let mut edge_faces = vec![Vec::new(); edges.len()];
        for (t, tri) in triangles.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let e = edges
                    .binary_search(&[a.min(b), a.max(b)])
                    .expect("edge collected above");
                edge_faces[e].push(t);
            }
        }
        let mut mesh = TemplateMesh {
            rest_vertices,
            triangles,
            vertex_colors,
            vertex_labels,
            one_ring: rings,
            edges,
            edge_weights: Vec::new(),
            edge_faces,
            ring_edges,
        };
        mesh.edge_weights = edge_weights_from_labels(&mesh);
        Ok(mesh)
    }

    pub fn vertex_count(&self) -> usize {
        self.rest_vertices.len()
    }

    /// Edge index of the `k`-th neighbor of vertex `i`.
    #[inline]
    pub fn ring_edge(&self, i: usize, k: usize) -> usize {
        self.ring_edges[i][k]
    }

    pub fn edge_weight(&self, i: usize, j: usize) -> Option<f64> {
        let k = self.one_ring[i].binary_search(&j).ok()?;
        Some(self.edge_weights[self.ring_edges[i][k]])
    }

    /// Replaces the labels and recomputes the per-edge weights.
    pub fn set_labels(&mut self, labels: Vec<MaterialClass>) -> Result<()> {
        if labels.len() != self.vertex_count() {
            return Err(Error::Dimension("label count".into()));
        }
        self.vertex_labels = labels;
        self.edge_weights = edge_weights_from_labels(self);
        Ok(())
    }

    /// Same mesh with every edge weight set to `s`.
    pub fn with_uniform_edge_weight(&self, s: f64) -> Self {
        let mut m = self.clone();
        m.edge_weights.iter_mut().for_each(|w| *w = s);
        m
    }

    /// Area-weighted vertex normals of the given vertex positions.
    pub fn vertex_normals(&self, positions: &[Vec3]) -> Vec<Vec3> {
        let mut normals = vec![Vec3::zeros(); positions.len()];
        for tri in &self.triangles {
            let n = face_normal(positions, tri);
            for &v in tri {
                normals[v] += n;
            }
        }
        normals
            .into_iter()
            .map(|n| n.try_normalize(1e-300).unwrap_or_else(Vec3::zeros))
            .collect()
    }

    /// Vertices reachable within `k` edges of any seed, excluding the seeds.
    pub fn k_ring(&self, seeds: &[usize], k: usize) -> Vec<usize> {
        let n = self.vertex_count();
        let mut dist = vec![usize::MAX; n];
        let mut frontier: Vec<usize> = seeds.to_vec();
        for &s in seeds {
            dist[s] = 0;
        }
        for d in 1..=k {
            let mut next = Vec::new();
            for &v in &frontier {
                for &u in &self.one_ring[v] {
                    if dist[u] == usize::MAX {
                        dist[u] = d;
                        next.push(u);
                    }
                }
            }
            frontier = next;
        }
        (0..n).filter(|&v| dist[v] != usize::MAX && dist[v] > 0).collect()
    }

    /// Parses an OBJ subset (`v`, `f`) plus the attribute sidecar.
    pub fn parse(obj: &str, obj_path: &Path, attrs: &str, attr_path: &Path) -> Result<Self> {
        let (vertices, triangles) = parse_obj(obj, obj_path)?;
        let mut colors = Vec::with_capacity(vertices.len());
        let mut labels = Vec::with_capacity(vertices.len());
        for (line, l) in data_lines(attrs) {
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 4 {
                return Err(Error::parse(attr_path, line, "expected `r g b class`"));
            }
            let f = |k: usize| -> Result<f64> {
                t[k].parse::<f64>()
                    .map_err(|e| Error::parse(attr_path, line, e.to_string()))
            };
            colors.push(Vec3::new(f(0)?, f(1)?, f(2)?));
            let class: u8 = t[3]
                .parse()
                .map_err(|_| Error::parse(attr_path, line, "bad class id"))?;
            labels.push(
                MaterialClass::new(class).map_err(|_| {
                    Error::invariant("vertex label", labels.len(), format!("class {class} not in 1..=7"))
                })?,
            );
        }
        TemplateMesh::new(vertices, triangles, colors, labels)
    }

    pub fn to_obj(&self, positions: &[Vec3]) -> String {
        write_obj(positions, &self.triangles)
    }

    pub fn attributes_text(&self) -> String {
        let mut s = String::from("# r g b class\n");
        for (c, l) in self.vertex_colors.iter().zip(&self.vertex_labels) {
            let _ = writeln!(s, "{} {} {} {}", c.x, c.y, c.z, l.0);
        }
        s
    }
}

pub fn face_normal(positions: &[Vec3], tri: &[usize; 3]) -> Vec3 {
    let a = positions[tri[0]];
    (positions[tri[1]] - a).cross(&(positions[tri[2]] - a))
}

/// `s_ij = (w(label_i) + w(label_j)) / 2` for every undirected edge.
pub fn edge_weights_from_labels(mesh: &TemplateMesh) -> Vec<f64> {
    mesh.edges
        .iter()
        .map(|&[a, b]| averaged_weight(mesh.vertex_labels[a], mesh.vertex_labels[b]))
        .collect()
}

/// Edge weights from an explicit per-class weight table (class `k` at
/// index `k - 1`).
pub fn edge_weights_from_table(mesh: &TemplateMesh, table: &[f64; 7]) -> Vec<f64> {
    let w = |c: MaterialClass| table[c.id() as usize - 1];
    mesh.edges
        .iter()
        .map(|&[a, b]| (w(mesh.vertex_labels[a]) + w(mesh.vertex_labels[b])) / 2.0)
        .collect()
}

pub fn parse_obj(text: &str, path: &Path) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (line, l) in data_lines(text) {
        let mut t = l.split_whitespace();
        match t.next() {
            Some("v") => {
                let c: Vec<f64> = t
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::parse(path, line, e.to_string()))?;
                if c.len() != 3 {
                    return Err(Error::parse(path, line, "vertex needs 3 coordinates"));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = t
                    .map(|s| {
                        s.split('/')
                            .next()
                            .unwrap_or("")
                            .parse::<usize>()
                            .ok()
                            .filter(|&i| i > 0)
                            .map(|i| i - 1)
                            .ok_or_else(|| Error::parse(path, line, "bad face index"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(Error::parse(path, line, "face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok((vertices, triangles))
}

pub fn write_obj(positions: &[Vec3], triangles: &[[usize; 3]]) -> String {
    let mut s = String::with_capacity(positions.len() * 40 + triangles.len() * 20);
    for p in positions {
        let _ = writeln!(s, "v {:.9} {:.9} {:.9}", p.x, p.y, p.z);
    }
    for t in triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

/// Non-empty lines with `#` comments stripped, paired with 1-based line numbers.
pub(crate) fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

/// Joint category, which selects the temporal smoothness weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Torso,
    Head,
    Shoulder,
    Elbow,
    Knee,
    Hand,
    Foot,
}

impl JointKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "torso" => JointKind::Torso,
            "head" => JointKind::Head,
            "shoulder" => JointKind::Shoulder,
            "elbow" => JointKind::Elbow,
            "knee" => JointKind::Knee,
            "hand" => JointKind::Hand,
            "foot" => JointKind::Foot,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            JointKind::Torso => "torso",
            JointKind::Head => "head",
            JointKind::Shoulder => "shoulder",
            JointKind::Elbow => "elbow",
            JointKind::Knee => "knee",
            JointKind::Hand => "hand",
            JointKind::Foot => "foot",
        }
    }
}

/// Coarse body region used by the body-part mask. Ids start at 1; 0 is
/// reserved for "no part" in label images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Torso = 1,
    Head = 2,
    LeftArm = 3,
    RightArm = 4,
    LeftLeg = 5,
    RightLeg = 6,
}

impl BodyPart {
    pub fn id(self) -> u8 {
        self as u8
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "torso" => BodyPart::Torso,
            "head" => BodyPart::Head,
            "left_arm" => BodyPart::LeftArm,
            "right_arm" => BodyPart::RightArm,
            "left_leg" => BodyPart::LeftLeg,
            "right_leg" => BodyPart::RightLeg,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            BodyPart::Torso => "torso",
            BodyPart::Head => "head",
            BodyPart::LeftArm => "left_arm",
            BodyPart::RightArm => "right_arm",
            BodyPart::LeftLeg => "left_leg",
            BodyPart::RightLeg => "right_leg",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Bone vector from the parent (rest pose, world-aligned axes). For the
    /// root this is its rest position.
    pub offset: Vec3,
    pub kind: JointKind,
    pub part: BodyPart,
}

/// One joint-angle degree of freedom: a rotation of `joint`'s local frame
/// about a unit `axis`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dof {
    pub joint: usize,
    pub axis: Vec3,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub joints: Vec<Joint>,
    pub dofs: Vec<Dof>,
    /// Face marker offsets in the head joint frame (eyes, nose, chin).
    pub marker_offsets: [Vec3; MARKER_COUNT],
    pub head: usize,
    /// Degrees of freedom of each joint, in application order.
    joint_dofs: Vec<Vec<usize>>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>, dofs: Vec<Dof>, marker_offsets: [Vec3; MARKER_COUNT]) -> Result<Self> {
        let roots = joints.iter().filter(|j| j.parent.is_none()).count();
        if roots != 1 {
            return Err(Error::invariant("skeleton", 0, format!("{roots} roots, expected 1")));
        }
        if joints[0].parent.is_some() {
            return Err(Error::invariant("joint", 0, "first joint must be the root"));
        }
        for (i, j) in joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= i {
                    return Err(Error::invariant("joint", i, "parent must precede child"));
                }
            }
            if !j.offset.iter().all(|c| c.is_finite()) {
                return Err(Error::invariant("joint", i, "non-finite offset"));
            }
        }
        if dofs.len() != DOF_COUNT {
            return Err(Error::invariant(
                "skeleton",
                dofs.len(),
                format!("{} degrees of freedom, expected {DOF_COUNT}", dofs.len()),
            ));
        }
        let mut joint_dofs = vec![Vec::new(); joints.len()];
        for (k, d) in dofs.iter().enumerate() {
            if d.joint >= joints.len() {
                return Err(Error::invariant("dof", k, "joint index out of range"));
            }
            if !(d.min < d.max) {
                return Err(Error::invariant("dof", k, "limits require min < max"));
            }
            if (d.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::invariant("dof", k, "axis must be unit length"));
            }
            joint_dofs[d.joint].push(k);
        }
        let head = joints
            .iter()
            .position(|j| j.kind == JointKind::Head)
            .ok_or_else(|| Error::invariant("skeleton", 0, "no head joint for the face markers"))?;
        Ok(Skeleton {
            joints,
            dofs,
            marker_offsets,
            head,
            joint_dofs,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn joint_dofs(&self, joint: usize) -> &[usize] {
        &self.joint_dofs[joint]
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn bone_length(&self, joint: usize) -> f64 {
        self.joints[joint].offset.norm()
    }

    /// Rest-pose world positions of all joints.
    pub fn rest_positions(&self) -> Vec<Vec3> {
        let mut p: Vec<Vec3> = Vec::with_capacity(self.joints.len());
        for j in &self.joints {
            let base = j.parent.map_or(Vec3::zeros(), |q| p[q]);
            p.push(base + j.offset);
        }
        p
    }

    /// True when `ancestor` lies on the path from `joint` to the root
    /// (inclusive of `joint` itself).
    pub fn is_ancestor(&self, ancestor: usize, mut joint: usize) -> bool {
        loop {
            if joint == ancestor {
                return true;
            }
            match self.joints[joint].parent {
                Some(p) => joint = p,
                None => return false,
            }
        }
    }

    pub fn theta_min(&self) -> Vec<f64> {
        self.dofs.iter().map(|d| d.min).collect()
    }

    pub fn theta_max(&self) -> Vec<f64> {
        self.dofs.iter().map(|d| d.max).collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut joints: Vec<Joint> = Vec::new();
        let mut dofs = Vec::new();
        let mut markers = Vec::new();
        let num = |s: &str, line: usize| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::parse(path, line, format!("{s}: {e}")))
        };
        for (line, l) in data_lines(text) {
            let t: Vec<&str> = l.split_whitespace().collect();
            match t[0] {
                "joint" => {
                    if t.len() != 8 {
                        return Err(Error::parse(
                            path,
                            line,
                            "expected `joint name parent x y z kind part`",
                        ));
                    }
                    let parent = if t[2] == "-" {
                        None
                    } else {
                        Some(
                            joints
                                .iter()
                                .position(|j| j.name == t[2])
                                .ok_or_else(|| Error::parse(path, line, format!("unknown parent {}", t[2])))?,
                        )
                    };
                    joints.push(Joint {
                        name: t[1].to_string(),
                        parent,
                        offset: Vec3::new(num(t[3], line)?, num(t[4], line)?, num(t[5], line)?),
                        kind: JointKind::parse(t[6])
                            .ok_or_else(|| Error::parse(path, line, format!("unknown joint kind {}", t[6])))?,
                        part: BodyPart::parse(t[7])
                            .ok_or_else(|| Error::parse(path, line, format!("unknown body part {}", t[7])))?,
                    });
                }
                "dof" => {
                    if t.len() != 7 {
                        return Err(Error::parse(path, line, "expected `dof joint ax ay az min max`"));
                    }
                    let joint = joints
                        .iter()
                        .position(|j| j.name == t[1])
                        .ok_or_else(|| Error::parse(path, line, format!("unknown joint {}", t[1])))?;
                    let axis = Vec3::new(num(t[2], line)?, num(t[3], line)?, num(t[4], line)?);
                    let axis = axis
                        .try_normalize(1e-12)
                        .ok_or_else(|| Error::parse(path, line, "zero rotation axis"))?;
                    dofs.push(Dof {
                        joint,
                        axis,
                        min: num(t[5], line)?,
                        max: num(t[6], line)?,
                    });
                }
                "marker" => {
                    if t.len() != 4 {
                        return Err(Error::parse(path, line, "expected `marker x y z`"));
                    }
                    markers.push(Vec3::new(num(t[1], line)?, num(t[2], line)?, num(t[3], line)?));
                }
                other => return Err(Error::parse(path, line, format!("unknown record `{other}`"))),
            }
        }
        if joints.is_empty() {
            return Err(Error::parse(path, 1, "no joints"));
        }
        let markers: [Vec3; MARKER_COUNT] = markers.try_into().map_err(|m: Vec<Vec3>| {
            Error::invariant("skeleton", m.len(), format!("{} face markers, expected {MARKER_COUNT}", m.len()))
        })?;
        Skeleton::new(joints, dofs, markers)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# joint name parent x y z kind part\n");
        for j in &self.joints {
            let parent = j.parent.map_or("-".to_string(), |p| self.joints[p].name.clone());
            let _ = writeln!(
                s,
                "joint {} {} {} {} {} {} {}",
                j.name,
                parent,
                j.offset.x,
                j.offset.y,
                j.offset.z,
                j.kind.name(),
                j.part.name()
            );
        }
        s.push_str("# dof joint ax ay az min max\n");
        for d in &self.dofs {
            let _ = writeln!(
                s,
                "dof {} {} {} {} {} {}",
                self.joints[d.joint].name, d.axis.x, d.axis.y, d.axis.z, d.min, d.max
            );
        }
        s.push_str("# marker x y z (head frame: left eye, right eye, nose, chin)\n");
        for m in &self.marker_offsets {
            let _ = writeln!(s, "marker {} {} {}", m.x, m.y, m.z);
        }
        s
    }
}

/// Sparse per-vertex joint influences.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinningWeights {
    pub influences: Vec<Vec<(usize, f64)>>,
}

impl SkinningWeights {
    pub fn new(influences: Vec<Vec<(usize, f64)>>, joint_count: usize) -> Result<Self> {
        for (v, inf) in influences.iter().enumerate() {
            if inf.is_empty() {
                return Err(Error::invariant("skinning", v, "vertex has no influences"));
            }
            if inf.len() > MAX_INFLUENCES {
                return Err(Error::invariant(
                    "skinning",
                    v,
                    format!("{} influences, at most {MAX_INFLUENCES} allowed", inf.len()),
                ));
            }
            let mut sum = 0.0;
            for &(j, w) in inf {
                if j >= joint_count {
                    return Err(Error::invariant("skinning", v, format!("joint {j} out of range")));
                }
                if !(w >= 0.0) {
                    return Err(Error::invariant("skinning", v, "negative weight"));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invariant("skinning", v, format!("weights sum to {sum}")));
            }
        }
        Ok(SkinningWeights { influences })
    }

    /// Joint with the largest weight (lowest index on ties).
    pub fn dominant_joint(&self, v: usize) -> usize {
        let mut best = self.influences[v][0];
        for &(j, w) in &self.influences[v][1..] {
            if w > best.1 || (w == best.1 && j < best.0) {
                best = (j, w);
            }
        }
        best.0
    }

    pub fn parse(text: &str, path: &Path, vertex_count: usize, joint_count: usize) -> Result<Self> {
        let mut influences = vec![Vec::new(); vertex_count];
        for (line, l) in data_lines(text) {
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 3 {
                return Err(Error::parse(path, line, "expected `vertex joint weight`"));
            }
            let v: usize = t[0].parse().map_err(|_| Error::parse(path, line, "bad vertex index"))?;
            let j: usize = t[1].parse().map_err(|_| Error::parse(path, line, "bad joint index"))?;
            let w: f64 = t[2].parse().map_err(|_| Error::parse(path, line, "bad weight"))?;
            if v >= vertex_count {
                return Err(Error::invariant("skinning", v, "vertex index out of range"));
            }
            influences[v].push((j, w));
        }
        SkinningWeights::new(influences, joint_count)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# vertex joint weight\n");
        for (v, inf) in self.influences.iter().enumerate() {
            for (j, w) in inf {
                let _ = writeln!(s, "{v} {j} {w}");
            }
        }
        s
    }
}

/// Everything needed to pose and skin the actor.
#[derive(Clone, Debug)]
pub struct Actor {
    pub mesh: TemplateMesh,
    pub skeleton: Skeleton,
    pub weights: SkinningWeights,
}

impl Actor {
    pub fn new(mesh: TemplateMesh, skeleton: Skeleton, weights: SkinningWeights) -> Result<Self> {
        if weights.influences.len() != mesh.vertex_count() {
            return Err(Error::Dimension(format!(
                "{} skinned vertices for a {}-vertex mesh",
                weights.influences.len(),
                mesh.vertex_count()
            )));
        }
        if weights
            .influences
            .iter()
            .flatten()
            .any(|&(j, _)| j >= skeleton.joint_count())
        {
            return Err(Error::Dimension("skinning references unknown joint".into()));
        }
        Ok(Actor {
            mesh,
            skeleton,
            weights,
        })
    }

    /// Body part of every vertex, from its dominant skinning joint.
    pub fn vertex_parts(&self) -> Vec<BodyPart> {
        (0..self.mesh.vertex_count())
            .map(|v| self.skeleton.joints[self.weights.dominant_joint(v)].part)
            .collect()
    }
}

/// Sidecar attribute path of a template mesh file.
pub fn attributes_path(template_file: &Path) -> PathBuf {
    template_file.with_extension("attr")
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads the mesh (with its `.attr` sidecar), skeleton and skinning weights.
pub fn load_actor(template_file: &Path, skeleton_file: &Path, skinning_file: &Path) -> Result<Actor> {
    let attr = attributes_path(template_file);
    let mesh = TemplateMesh::parse(&read(template_file)?, template_file, &read(&attr)?, &attr)?;
    let skeleton = Skeleton::parse(&read(skeleton_file)?, skeleton_file)?;
    let weights = SkinningWeights::parse(
        &read(skinning_file)?,
        skinning_file,
        mesh.vertex_count(),
        skeleton.joint_count(),
    )?;
    Actor::new(mesh, skeleton, weights)
}

pub fn save_actor(actor: &Actor, template_file: &Path, skeleton_file: &Path, skinning_file: &Path) -> Result<()> {
    let write = |p: &Path, s: String| std::fs::write(p, s).map_err(|e| Error::io(p, e));
    write(template_file, actor.mesh.to_obj(&actor.mesh.rest_vertices))?;
    write(&attributes_path(template_file), actor.mesh.attributes_text())?;
    write(skeleton_file, actor.skeleton.to_text())?;
    write(skinning_file, actor.weights.to_text())
}

/// A calibrated view used only for label fusion: world-to-camera rigid
/// transform plus intrinsics.
#[derive(Clone, Debug)]
pub struct CalibratedView {
    pub intrinsics: CameraIntrinsics,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl CalibratedView {
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

#[derive(Clone, Debug)]
pub struct LabelFusion {
    pub labels: Vec<MaterialClass>,
    /// Vertices not visible in any view; they received the default class.
    pub unobserved: Vec<usize>,
}

/// Majority vote of binned parsing labels over the views in which each
/// vertex is visible. Ties go to the lower class id.
pub fn fuse_vertex_labels(
    mesh: &TemplateMesh,
    label_images: &[Grid<u8>],
    views: &[CalibratedView],
    binning: &LabelBinning,
) -> Result<LabelFusion> {
    if label_images.is_empty() || label_images.len() != views.len() {
        return Err(Error::Dimension(format!(
            "{} label images for {} views",
            label_images.len(),
            views.len()
        )));
    }
    let n = mesh.vertex_count();
    let mut votes = vec![[0u32; 7]; n];
    for (img, view) in label_images.iter().zip(views) {
        let cam = &view.intrinsics;
        if img.width != cam.width || img.height != cam.height {
            return Err(Error::Dimension("label image size differs from its camera".into()));
        }
        let local: Vec<Vec3> = mesh.rest_vertices.iter().map(|p| view.to_camera(p)).collect();
        let r = raster::rasterize(cam, &local, &mesh.triangles);
        let visible = raster::vertex_visibility(cam, &r, &local);
        for v in 0..n {
            if !visible[v] {
                continue;
            }
            let px = cam.project_unchecked(&local[v]);
            if let Some((x, y)) = img.pixel_at(&px) {
                let label = *img.get(x, y);
                if label == 0 {
                    continue;
                }
                votes[v][binning.class_of(label).0 as usize - 1] += 1;
            }
        }
    }
    let mut labels = Vec::with_capacity(n);
    let mut unobserved = Vec::new();
    for (v, count) in votes.iter().enumerate() {
        let best = (0..7).fold(None::<(usize, u32)>, |acc, c| match acc {
            Some((_, bc)) if count[c] <= bc => acc,
            _ if count[c] == 0 => acc,
            _ => Some((c, count[c])),
        });
        match best {
            Some((c, _)) => labels.push(MaterialClass(c as u8 + 1)),
            None => {
                unobserved.push(v);
                labels.push(DEFAULT_CLASS);
            }
        }
    }
    Ok(LabelFusion { labels, unobserved })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn class_weights_match_table() {
        assert_eq!(class_weight(1).unwrap(), 1.0);
        assert_eq!(class_weight(5).unwrap(), 50.0);
        assert_eq!(class_weight(7).unwrap(), 200.0);
        assert!(matches!(class_weight(0), Err(Error::UnknownClass(0))));
        assert!(class_weight(8).is_err());
    }

    #[test]
    fn averaged_edge_weights() {
        let c = |i| MaterialClass::new(i).unwrap();
        assert_eq!(averaged_weight(c(1), c(5)), 25.5);
        assert_eq!(averaged_weight(c(7), c(7)), 200.0);
        assert_eq!(averaged_weight(c(2), c(3)), 2.25);
    }

    fn tetra(labels: [u8; 4]) -> TemplateMesh {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        let t = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
        TemplateMesh::new(
            v,
            t,
            vec![Vec3::new(0.5, 0.5, 0.5); 4],
            labels.iter().map(|&l| MaterialClass::new(l).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn mesh_topology_and_weights() {
        let m = tetra([1, 5, 7, 2]);
        assert_eq!(m.edges.len(), 6);
        assert!(m.one_ring.iter().all(|r| r.len() == 3));
        assert_eq!(m.edge_weight(0, 1), Some(25.5));
        assert_eq!(m.edge_weight(1, 0), Some(25.5));
        assert_eq!(m.edge_weight(2, 3), Some(101.0));
        assert_eq!(edge_weights_from_labels(&m), m.edge_weights);
    }

    #[test]
    fn isolated_vertex_is_rejected() {
        let err = TemplateMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            vec![[0, 1, 2]],
            vec![Vec3::zeros(); 4],
            vec![DEFAULT_CLASS; 4],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invariant { index: 3, .. }));
    }

    #[test]
    fn out_of_range_triangle_is_rejected() {
        let err = TemplateMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y()],
            vec![[0, 1, 5]],
            vec![Vec3::zeros(); 3],
            vec![DEFAULT_CLASS; 3],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invariant { what: "triangle", index: 0, .. }));
    }

    #[test]
    fn default_binning_follows_part_lists() {
        let b = LabelBinning::default();
        let id = |n: &str| PARSING_LABELS.iter().position(|&l| l == n).unwrap() as u8 + 1;
        assert_eq!(b.class_of(id("hair")).id(), 7);
        assert_eq!(b.class_of(id("skirt")).id(), 1);
        assert_eq!(b.class_of(id("upper-clothes")).id(), 2);
        assert_eq!(b.class_of(id("pants")).id(), 3);
        assert_eq!(b.class_of(id("scarf")).id(), 4);
        assert_eq!(b.class_of(id("socks")).id(), 5);
        assert_eq!(b.class_of(id("glove")).id(), 6);
        assert_eq!(b.class_of(42).id(), 5);
        let back = LabelBinning::parse(&b.to_text(), Path::new("bins")).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn skinning_sum_must_be_one() {
        let err = SkinningWeights::new(vec![vec![(0, 1.0)], vec![(0, 0.9)]], 2).unwrap_err();
        assert!(matches!(err, Error::Invariant { index: 1, .. }));
        let too_many = vec![vec![(0, 0.2), (1, 0.2), (2, 0.2), (3, 0.2), (4, 0.2)]];
        assert!(SkinningWeights::new(too_many, 5).is_err());
        let neg = vec![vec![(0, 1.5), (1, -0.5)]];
        assert!(SkinningWeights::new(neg, 2).is_err());
    }

    #[test]
    fn dominant_joint_prefers_weight_then_index() {
        let w = SkinningWeights::new(vec![vec![(3, 0.5), (1, 0.5)], vec![(2, 0.3), (0, 0.7)]], 4).unwrap();
        assert_eq!(w.dominant_joint(0), 1);
        assert_eq!(w.dominant_joint(1), 0);
    }

    const SMALL_SKELETON: &str = "\
joint root - 0 0 3 torso torso
joint head root 0 -0.5 0 head head
marker 0.03 -0.05 -0.08
marker -0.03 -0.05 -0.08
marker 0 -0.02 -0.1
marker 0 0.05 -0.08
";

    fn with_dofs(n: usize) -> String {
        let mut s = SMALL_SKELETON.to_string();
        for k in 0..n {
            let axis = ["1 0 0", "0 1 0", "0 0 1"][k % 3];
            let _ = writeln!(s, "dof {} {axis} -1 1", if k % 2 == 0 { "root" } else { "head" });
        }
        s
    }

    #[test]
    fn skeleton_requires_27_dofs() {
        let err = Skeleton::parse(&with_dofs(26), Path::new("s")).unwrap_err();
        assert!(matches!(err, Error::Invariant { index: 26, .. }));
        let sk = Skeleton::parse(&with_dofs(27), Path::new("s")).unwrap();
        assert_eq!(sk.dofs.len(), 27);
        assert_eq!(sk.head, 1);
        let again = Skeleton::parse(&sk.to_text(), Path::new("s")).unwrap();
        assert_eq!(again, sk);
    }

    #[test]
    fn skeleton_rejects_bad_limits_and_parents() {
        let bad = with_dofs(27).replacen("-1 1", "1 -1", 1);
        assert!(Skeleton::parse(&bad, Path::new("s")).is_err());
        let orphan = with_dofs(27).replace("joint head root", "joint head nobody");
        assert!(matches!(Skeleton::parse(&orphan, Path::new("s")), Err(Error::Parse { .. })));
    }

    #[test]
    fn fusion_majority_and_ties() {
        // A single triangle facing a camera on the -z side of it.
        let mesh = TemplateMesh::new(
            vec![Vec3::new(-0.1, -0.1, 0.0), Vec3::new(0.1, -0.1, 0.0), Vec3::new(0.0, 0.1, 0.0)],
            vec![[0, 1, 2]],
            vec![Vec3::zeros(); 3],
            vec![DEFAULT_CLASS; 3],
        )
        .unwrap();
        let cam = CameraIntrinsics::new(100.0, 100.0, 16.0, 16.0, 32, 32).unwrap();
        let view = CalibratedView {
            intrinsics: cam,
            rotation: Matrix3::identity(),
            translation: Vec3::new(0.0, 0.0, 1.0),
        };
        let id = |n: &str| PARSING_LABELS.iter().position(|&l| l == n).unwrap() as u8 + 1;
        let img = |l: u8| Grid::filled(32, 32, l);
        let b = LabelBinning::default();

        let views = vec![view.clone(); 4];
        let imgs = vec![img(id("hair")), img(id("left-arm")), img(id("hair")), img(id("hair"))];
        let f = fuse_vertex_labels(&mesh, &imgs, &views, &b).unwrap();
        assert!(f.labels.iter().all(|c| c.id() == 7));
        assert!(f.unobserved.is_empty());

        let single = fuse_vertex_labels(&mesh, &[img(id("pants"))], std::slice::from_ref(&view), &b).unwrap();
        assert!(single.labels.iter().all(|c| c.id() == 3));

        // Constructed two-view tie between class 2 and class 6.
        let tie_imgs = vec![img(id("hat")), img(id("upper-clothes"))];
        let tie = fuse_vertex_labels(&mesh, &tie_imgs, &[view.clone(), view.clone()], &b).unwrap();
        assert!(tie.labels.iter().all(|c| c.id() == 2));

        // Camera behind the mesh looking away: nothing observed.
        let away = CalibratedView {
            translation: Vec3::new(0.0, 0.0, -1.0),
            ..view
        };
        let none = fuse_vertex_labels(&mesh, &[img(id("hair"))], &[away], &b).unwrap();
        assert_eq!(none.unobserved, vec![0, 1, 2]);
        assert!(none.labels.iter().all(|&c| c == DEFAULT_CLASS));
    }

    proptest! {
        #[test]
        fn edge_weight_is_a_symmetric_function_of_two_classes(a in 1u8..=7, b in 1u8..=7) {
            let ca = MaterialClass::new(a).unwrap();
            let cb = MaterialClass::new(b).unwrap();
            prop_assert_eq!(averaged_weight(ca, cb), averaged_weight(cb, ca));
            prop_assert_eq!(
                averaged_weight(ca, cb),
                (class_weight(a).unwrap() + class_weight(b).unwrap()) / 2.0
            );
        }

        #[test]
        fn recomputed_weights_are_bit_identical(labels in proptest::array::uniform4(1u8..=7)) {
            let mut m = tetra(labels);
            let first = m.edge_weights.clone();
            m.set_labels(m.vertex_labels.clone()).unwrap();
            prop_assert_eq!(first.iter().map(|w| w.to_bits()).collect::<Vec<_>>(),
                            m.edge_weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn fusion_is_invariant_to_view_order(order in Just(()).prop_perturb(|_, mut rng| {
            let mut v: Vec<u8> = (0..5).map(|_| rng.random_range(1u8..=20)).collect();
            v.sort();
            v
        }), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mesh = tetra([5, 5, 5, 5]);
            let cam = CameraIntrinsics::new(50.0, 50.0, 16.0, 16.0, 32, 32).unwrap();
            let view = CalibratedView {
                intrinsics: cam,
                rotation: Matrix3::identity(),
                translation: Vec3::new(-0.2, -0.2, 3.0),
            };
            let imgs: Vec<Grid<u8>> = order.iter().map(|&l| Grid::filled(32, 32, l)).collect();
            let views = vec![view; imgs.len()];
            let b = LabelBinning::default();
            let a = fuse_vertex_labels(&mesh, &imgs, &views, &b).unwrap();
            let mut shuffled = imgs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let c = fuse_vertex_labels(&mesh, &shuffled, &views, &b).unwrap();
            prop_assert_eq!(a.labels, c.labels);
        }
    }
}
