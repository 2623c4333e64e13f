//! Stage II: per-vertex non-rigid registration by sparse Gauss-Newton with
//! block-Jacobi PCG, followed by silhouette snapping.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::imageproc::{
    dt_gradient, sample_bilinear, sample_scalar, squared_edt_from_seeds, DistanceTransformImage, ForegroundMask, Grid,
    ImagePyramid,
};
use crate::pose_stage::{extract_contour_vertices, silhouette_direction, MM_PER_M};
use crate::raster;
use crate::reduce::{sum_by, Reduction};
use crate::report::SolveReport;
use crate::solvers::{pcg_solve, BlockSparseSystem};
use crate::template::{Actor, BodyPart, TemplateMesh};
use crate::{Error, Result, Vec2, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonrigidHyperparams {
    pub w_photo: f64,
    pub w_silhouette: f64,
    pub w_smooth: f64,
    pub w_edge: f64,
    pub w_velocity: f64,
    pub w_acceleration: f64,
    /// RGB distance above which a photometric correspondence is pruned.
    pub color_threshold: f64,
    /// One Gauss-Newton step per pyramid level, coarse to fine.
    pub gn_steps: usize,
    pub pcg_iterations: usize,
    pub max_step_halvings: usize,
    /// Body-part mask dilation in pixels.
    pub dilation: usize,
    pub snap: SnapParams,
}

impl Default for NonrigidHyperparams {
    fn default() -> Self {
        NonrigidHyperparams {
            w_photo: 10000.0,
            w_silhouette: 600.0,
            w_smooth: 10.0,
            w_edge: 30.0,
            w_velocity: 0.25,
            w_acceleration: 0.1,
            color_threshold: 0.3,
            gn_steps: 3,
            pcg_iterations: 4,
            max_step_halvings: 3,
            dilation: 10,
            snap: SnapParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnapParams {
    pub step: f64,
    pub max_steps: usize,
    pub tolerance: f64,
    pub diffusion_rings: usize,
    pub diffusion_iterations: usize,
}

impl Default for SnapParams {
    fn default() -> Self {
        SnapParams {
            step: 0.5,
            max_steps: 30,
            tolerance: 0.25,
            diffusion_rings: 2,
            diffusion_iterations: 2,
        }
    }
}

/// Vertex arrays carried between frames.
#[derive(Clone, Debug)]
pub struct SurfaceState {
    pub current: Vec<Vec3>,
    pub skinned: Vec<Vec3>,
    pub prev: Vec<Vec3>,
    pub prev2: Vec<Vec3>,
    pub displacements: Vec<Vec3>,
}

impl SurfaceState {
    /// Starts from `skinned + displacements`. Missing history falls back to
    /// the initial surface, so the temporal terms only resist motion away
    /// from it.
    pub fn new(skinned: Vec<Vec3>, displacements: Vec<Vec3>, prev: Option<Vec<Vec3>>, prev2: Option<Vec<Vec3>>) -> Result<Self> {
        let n = skinned.len();
        if displacements.len() != n {
            return Err(Error::Dimension(format!("{} displacements for {n} vertices", displacements.len())));
        }
        let current: Vec<Vec3> = skinned.iter().zip(&displacements).map(|(s, d)| s + d).collect();
        let prev = prev.unwrap_or_else(|| current.clone());
        let prev2 = prev2.unwrap_or_else(|| prev.clone());
        if prev.len() != n || prev2.len() != n {
            return Err(Error::Dimension("history length".into()));
        }
        Ok(SurfaceState {
            current,
            skinned,
            prev,
            prev2,
            displacements,
        })
    }

    pub fn update_displacements(&mut self) {
        self.displacements = self.current.iter().zip(&self.skinned).map(|(v, s)| v - s).collect();
    }
}

/// Per-pixel body part id (0 where no part is drawn).
pub type BodyPartMask = Grid<u8>;

/// Rasterizes the part id of each vertex and grows every part by up to
/// `dilation` pixels. Pixels within reach of the torso become torso;
/// otherwise drawn pixels keep their label and empty ones take the nearest
/// part (lower id on ties).
pub fn build_body_part_mask(
    camera: &CameraIntrinsics,
    positions: &[Vec3],
    triangles: &[[usize; 3]],
    vertex_parts: &[u8],
    dilation: usize,
) -> BodyPartMask {
    let r = raster::rasterize(camera, positions, triangles);
    let labels = r.label_image(triangles, vertex_parts, 0);
    let mut ids: Vec<u8> = labels.data.iter().copied().filter(|&l| l != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    let cap = (dilation * dilation) as f64;
    let dist: Vec<(u8, Grid<f64>)> = ids
        .par_iter()
        .map(|&id| {
            let seeds = Grid::from_fn(labels.width, labels.height, |x, y| *labels.get(x, y) == id);
            (id, squared_edt_from_seeds(&seeds))
        })
        .collect();
    let torso = BodyPart::Torso.id();
    Grid::from_fn(labels.width, labels.height, |x, y| {
        let reach = |id: u8| dist.iter().find(|d| d.0 == id).is_some_and(|d| *d.1.get(x, y) <= cap);
        if reach(torso) {
            return torso;
        }
        let own = *labels.get(x, y);
        if own != 0 {
            return own;
        }
        let mut best = (0u8, f64::INFINITY);
        for (id, d) in &dist {
            let v = *d.get(x, y);
            if v <= cap && v < best.1 {
                best = (*id, v);
            }
        }
        best.0
    })
}

/// Depth-buffer visibility of every vertex.
pub fn visible_vertices(camera: &CameraIntrinsics, positions: &[Vec3], triangles: &[[usize; 3]]) -> Vec<bool> {
    let r = raster::rasterize(camera, positions, triangles);
    raster::vertex_visibility(camera, &r, positions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NonrigidTerm {
    Photo,
    Silhouette,
    Smooth,
    Edge,
    Velocity,
    Acceleration,
}

impl NonrigidTerm {
    pub const ALL: [NonrigidTerm; 6] = [
        NonrigidTerm::Photo,
        NonrigidTerm::Silhouette,
        NonrigidTerm::Smooth,
        NonrigidTerm::Edge,
        NonrigidTerm::Velocity,
        NonrigidTerm::Acceleration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NonrigidTerm::Photo => "photo",
            NonrigidTerm::Silhouette => "silhouette",
            NonrigidTerm::Smooth => "smooth",
            NonrigidTerm::Edge => "edge",
            NonrigidTerm::Velocity => "velocity",
            NonrigidTerm::Acceleration => "acceleration",
        }
    }
}

/// Observations of one frame.
#[derive(Clone, Copy, Debug)]
pub struct NonrigidFrame<'a> {
    pub index: usize,
    pub camera: &'a CameraIntrinsics,
    pub pyramid: &'a ImagePyramid,
    pub mask: &'a ForegroundMask,
    pub dt: &'a DistanceTransformImage,
    pub part_mask: Option<&'a BodyPartMask>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryVertex {
    pub vertex: usize,
    pub normal: Vec2,
    /// Directional weight; 0 disables the vertex.
    pub direction: f64,
}

/// Correspondence sets fixed for one frame's solve.
#[derive(Clone, Debug, Default)]
pub struct Correspondences {
    pub visible: Vec<bool>,
    pub boundary: Vec<BoundaryVertex>,
}

impl Correspondences {
    pub fn disabled(&self) -> usize {
        self.boundary.iter().filter(|b| b.direction == 0.0).count()
    }
}

/// A scalar residual and its gradient with respect to the owning vertex.
/// Edge rows depend on the other endpoint with the opposite gradient.
#[derive(Clone, Copy, Debug)]
struct Row {
    f: f64,
    g: Vec3,
}

struct Linearization {
    unary: Vec<Vec<(NonrigidTerm, Row)>>,
    /// Three smooth rows then one edge row per directed edge, in
    /// flattened one-ring order.
    edges: Vec<[Row; 4]>,
    degenerate: usize,
}

impl Linearization {
    fn terms(&self, mode: Reduction) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = NonrigidTerm::ALL.iter().map(|t| (t.name().to_string(), 0.0)).collect();
        for t in [
            NonrigidTerm::Photo,
            NonrigidTerm::Silhouette,
            NonrigidTerm::Velocity,
            NonrigidTerm::Acceleration,
        ] {
            let e = sum_by(self.unary.len(), mode, |i| {
                self.unary[i].iter().filter(|r| r.0 == t).map(|r| r.1.f * r.1.f).sum()
            });
            out.insert(t.name().into(), e);
        }
        let smooth = sum_by(self.edges.len(), mode, |e| self.edges[e][..3].iter().map(|r| r.f * r.f).sum());
        let edge = sum_by(self.edges.len(), mode, |e| self.edges[e][3].f * self.edges[e][3].f);
        out.insert(NonrigidTerm::Smooth.name().into(), smooth);
        out.insert(NonrigidTerm::Edge.name().into(), edge);
        out
    }
}

/// Stage II solver bound to one actor.
pub struct NonrigidSolver<'a> {
    pub actor: &'a Actor,
    pub hyper: NonrigidHyperparams,
    pub reduction: Reduction,
    vertex_parts: Vec<u8>,
    ring_offset: Vec<usize>,
    /// Flattened index of the reverse directed edge.
    reverse: Vec<usize>,
    /// `s_ij / |N_i|` per directed edge.
    ring_weight: Vec<f64>,
    rest_length: Vec<f64>,
    rest_direction: Vec<Vec3>,
}

impl<'a> NonrigidSolver<'a> {
    pub fn new(actor: &'a Actor, hyper: NonrigidHyperparams, reduction: Reduction) -> Self {
        let mesh = &actor.mesh;
        let n = mesh.vertex_count();
        let mut ring_offset = Vec::with_capacity(n + 1);
        ring_offset.push(0);
        for ring in &mesh.one_ring {
            ring_offset.push(ring_offset.last().unwrap() + ring.len());
        }
        let mut reverse = Vec::with_capacity(ring_offset[n]);
        let mut ring_weight = Vec::with_capacity(ring_offset[n]);
        let mut rest_length = Vec::with_capacity(ring_offset[n]);
        let mut rest_direction = Vec::with_capacity(ring_offset[n]);
        for (i, ring) in mesh.one_ring.iter().enumerate() {
            for (k, &j) in ring.iter().enumerate() {
                let back = mesh.one_ring[j].binary_search(&i).expect("one-ring is symmetric");
                reverse.push(ring_offset[j] + back);
                ring_weight.push(mesh.edge_weights[mesh.ring_edge(i, k)] / ring.len() as f64);
                let d = mesh.rest_vertices[i] - mesh.rest_vertices[j];
                rest_length.push(d.norm());
                rest_direction.push(d.try_normalize(0.0).unwrap_or_else(Vec3::x));
            }
        }
        let vertex_parts = actor.vertex_parts().iter().map(|p| p.id()).collect();
        NonrigidSolver {
            actor,
            hyper,
            reduction,
            vertex_parts,
            ring_offset,
            reverse,
            ring_weight,
            rest_length,
            rest_direction,
        }
    }

    pub fn vertex_parts(&self) -> &[u8] {
        &self.vertex_parts
    }

    fn mesh(&self) -> &TemplateMesh {
        &self.actor.mesh
    }

    /// Visibility from the skinned surface and the boundary set of the
    /// current surface with its directional weights.
    pub fn correspondences(&self, frame: &NonrigidFrame, state: &SurfaceState) -> Correspondences {
        let mesh = self.mesh();
        let visible = visible_vertices(frame.camera, &state.skinned, &mesh.triangles);
        let contour = extract_contour_vertices(mesh, &state.current, frame.camera);
        let boundary = contour
            .members
            .iter()
            .map(|c| {
                let px = frame.camera.project_unchecked(&state.current[c.vertex]);
                let mut direction = silhouette_direction(&c.normal, &px, frame.mask, frame.dt);
                if let Some(parts) = frame.part_mask {
                    if let Some((x, y)) = parts.pixel_at(&px) {
                        let label = *parts.get(x, y);
                        if label != 0 && label != self.vertex_parts[c.vertex] {
                            direction = 0.0;
                        }
                    }
                }
                BoundaryVertex {
                    vertex: c.vertex,
                    normal: c.normal,
                    direction,
                }
            })
            .collect();
        Correspondences { visible, boundary }
    }

    /// Visible vertices whose color at `level` is within the threshold.
    pub fn photo_mask(&self, frame: &NonrigidFrame, positions: &[Vec3], visible: &[bool], level: usize) -> Vec<bool> {
        let img = &frame.pyramid.levels[level];
        let colors = &self.mesh().vertex_colors;
        positions
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                visible[i]
                    && frame.camera.project(p).is_ok_and(|px| {
                        let s = sample_bilinear(img, &px);
                        !s.clamped && (s.value - colors[i]).norm() <= self.hyper.color_threshold
                    })
            })
            .collect()
    }

    fn linearize(
        &self,
        frame: &NonrigidFrame,
        state: &SurfaceState,
        v: &[Vec3],
        corr: &Correspondences,
        photo: &[bool],
        level: usize,
        directional: bool,
    ) -> Linearization {
        let h = &self.hyper;
        let mesh = self.mesh();
        let cam = frame.camera;
        let img = &frame.pyramid.levels[level];
        let mut sil = vec![None; v.len()];
        for b in &corr.boundary {
            if b.direction != 0.0 {
                sil[b.vertex] = Some(b.direction);
            }
        }
        let (wp, ws) = (h.w_photo.sqrt(), h.w_silhouette.sqrt());
        let (wv, wa) = (h.w_velocity.sqrt() * MM_PER_M, h.w_acceleration.sqrt() * MM_PER_M);
        let unary = (0..v.len())
            .into_par_iter()
            .map(|i| {
                let mut rows = Vec::with_capacity(10);
                let p = v[i];
                let proj = cam.project(&p).ok().zip(cam.project_jacobian(&p).ok());
                if photo[i] {
                    if let Some((px, jp)) = proj {
                        let s = sample_bilinear(img, &px);
                        let m = s.gradient * jp * wp;
                        let r = (s.value - mesh.vertex_colors[i]) * wp;
                        for c in 0..3 {
                            rows.push((NonrigidTerm::Photo, Row { f: r[c], g: m.row(c).transpose() }));
                        }
                    }
                }
                if let Some(b) = sil[i] {
                    if let Some((px, jp)) = proj {
                        let s = sample_scalar(frame.dt, &px);
                        let b = if directional { b } else { 1.0 };
                        rows.push((
                            NonrigidTerm::Silhouette,
                            Row {
                                f: ws * s.value,
                                g: jp.transpose() * s.gradient * (ws * b),
                            },
                        ));
                    }
                }
                let vel = (p - state.prev[i]) * wv;
                let acc = (p - 2.0 * state.prev[i] + state.prev2[i]) * wa;
                for c in 0..3 {
                    let e = Vec3::ith(c, 1.0);
                    rows.push((NonrigidTerm::Velocity, Row { f: vel[c], g: e * wv }));
                }
                for c in 0..3 {
                    let e = Vec3::ith(c, 1.0);
                    rows.push((NonrigidTerm::Acceleration, Row { f: acc[c], g: e * wa }));
                }
                rows
            })
            .collect();
        let n_edges = self.ring_weight.len();
        let owner: Vec<usize> = (0..v.len())
            .flat_map(|i| std::iter::repeat_n(i, self.ring_offset[i + 1] - self.ring_offset[i]))
            .collect();
        let edges: Vec<([Row; 4], bool)> = (0..n_edges)
            .into_par_iter()
            .map(|e| {
                let i = owner[e];
                let j = mesh.one_ring[i][e - self.ring_offset[i]];
                let c = self.ring_weight[e];
                let (s, w) = ((h.w_smooth * c).sqrt() * MM_PER_M, (h.w_edge * c).sqrt() * MM_PER_M);
                let d = v[i] - v[j];
                let ds = state.skinned[i] - state.skinned[j];
                let r = (d - ds) * s;
                let len = d.norm();
                let (u, degenerate) = if len < 1e-9 { (self.rest_direction[e], true) } else { (d / len, false) };
                let rows = [
                    Row { f: r.x, g: Vec3::x() * s },
                    Row { f: r.y, g: Vec3::y() * s },
                    Row { f: r.z, g: Vec3::z() * s },
                    Row {
                        f: w * (len - self.rest_length[e]),
                        g: u * w,
                    },
                ];
                (rows, degenerate)
            })
            .collect();
        let degenerate = edges.iter().filter(|e| e.1).count();
        Linearization {
            unary,
            edges: edges.into_iter().map(|e| e.0).collect(),
            degenerate,
        }
    }

    /// `JᵀJ` and `−JᵀF` as a block-sparse system, one independent block
    /// row per vertex.
    fn assemble(&self, lin: &Linearization) -> Result<BlockSparseSystem> {
        let mesh = self.mesh();
        let mut sys = BlockSparseSystem::with_pattern(&mesh.one_ring)?;
        let rows: Vec<(Vec<Matrix3<f64>>, Vec3)> = (0..mesh.vertex_count())
            .into_par_iter()
            .map(|i| {
                let (cols, _) = sys.row(i);
                let mut blocks = vec![Matrix3::zeros(); cols.len()];
                let mut rhs = Vec3::zeros();
                let d = cols.binary_search(&i).expect("diagonal present");
                for (_, r) in &lin.unary[i] {
                    blocks[d] += r.g * r.g.transpose();
                    rhs -= r.g * r.f;
                }
                for (k, &j) in mesh.one_ring[i].iter().enumerate() {
                    let col = cols.binary_search(&j).expect("neighbor in pattern");
                    let e = self.ring_offset[i] + k;
                    for (rows, sign) in [(&lin.edges[e], 1.0), (&lin.edges[self.reverse[e]], -1.0)] {
                        for r in rows {
                            let gg = r.g * r.g.transpose();
                            blocks[d] += gg;
                            blocks[col] -= gg;
                            rhs -= r.g * (sign * r.f);
                        }
                    }
                }
                (blocks, rhs)
            })
            .collect();
        for (i, (blocks, rhs)) in rows.into_iter().enumerate() {
            let (_, range) = sys.row(i);
            sys.blocks[range].copy_from_slice(&blocks);
            sys.rhs[i] = rhs;
        }
        Ok(sys)
    }

    /// Per-term energies of `v` with the given frozen sets.
    pub fn energies(
        &self,
        frame: &NonrigidFrame,
        state: &SurfaceState,
        v: &[Vec3],
        corr: &Correspondences,
        photo: &[bool],
        level: usize,
    ) -> BTreeMap<String, f64> {
        self.linearize(frame, state, v, corr, photo, level, false).terms(self.reduction)
    }

    /// One coarse-to-fine pass: a Gauss-Newton step per pyramid level,
    /// each solved by a fixed number of PCG iterations. Updates
    /// `state.current` and `state.displacements`.
    pub fn solve(&self, frame: &NonrigidFrame, state: &mut SurfaceState, corr: &Correspondences) -> Result<SolveReport> {
        let start = Instant::now();
        let mut report = SolveReport::new("nonrigid", frame.index);
        report.flag_n("silhouette_disabled", corr.disabled());
        report.flag_n("directional_flip", corr.boundary.iter().filter(|b| b.direction < 0.0).count());
        let levels = frame.pyramid.levels.len();
        for step in 0..self.hyper.gn_steps {
            let level = step.min(levels - 1);
            let photo = self.photo_mask(frame, &state.current, &corr.visible, level);
            report.flag_n("photo_pruned", corr.visible.iter().zip(&photo).filter(|(v, p)| **v && !**p).count());
            let lin = self.linearize(frame, state, &state.current, corr, &photo, level, true);
            report.flag_n("degenerate_edge", lin.degenerate);
            let terms0 = lin.terms(self.reduction);
            let e0: f64 = terms0.values().sum();
            if step == 0 {
                report.record(e0, terms0.clone());
            }
            let sys = self.assemble(&lin)?;
            let pcg = pcg_solve(&sys, self.hyper.pcg_iterations, self.reduction);
            if pcg.breakdown {
                report.flag("pcg_breakdown");
            }
            report.flag_n("singular_block", pcg.singular_blocks);
            report.step_norms.push(sum_by(pcg.delta.len(), self.reduction, |i| pcg.delta[i].norm_squared()).sqrt());
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..=self.hyper.max_step_halvings {
                let cand: Vec<Vec3> = state.current.iter().zip(&pcg.delta).map(|(v, d)| v + d * alpha).collect();
                let terms = self.energies(frame, state, &cand, corr, &photo, level);
                if terms.values().sum::<f64>() <= e0 {
                    accepted = Some((cand, terms));
                    break;
                }
                report.flag("step_halved");
                alpha *= 0.5;
            }
            match accepted {
                Some((v, terms)) => {
                    state.current = v;
                    report.record(terms.values().sum(), terms);
                }
                None => {
                    report.flag("step_rejected");
                    report.record(e0, terms0);
                }
            }
        }
        state.update_displacements();
        report.seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }

    /// Largest relative Frobenius error per term between the analytic
    /// Jacobian (exact silhouette derivative) and central differences.
    pub fn gradcheck(
        &self,
        frame: &NonrigidFrame,
        state: &SurfaceState,
        corr: &Correspondences,
        level: usize,
        step: f64,
    ) -> Vec<(NonrigidTerm, f64)> {
        let v = &state.current;
        let n = v.len();
        let photo = self.photo_mask(frame, v, &corr.visible, level);
        let residuals = |v: &[Vec3]| -> Vec<(NonrigidTerm, f64)> {
            let lin = self.linearize(frame, state, v, corr, &photo, level, false);
            self.flatten(&lin).into_iter().map(|(t, r, _)| (t, r.f)).collect()
        };
        let lin = self.linearize(frame, state, v, corr, &photo, level, false);
        let rows = self.flatten(&lin);
        let mut analytic = vec![vec![0.0; 3 * n]; rows.len()];
        for (k, (_, r, ends)) in rows.iter().enumerate() {
            for c in 0..3 {
                analytic[k][3 * ends.0 + c] += r.g[c];
                if let Some(j) = ends.1 {
                    analytic[k][3 * j + c] -= r.g[c];
                }
            }
        }
        let mut numeric = vec![vec![0.0; 3 * n]; rows.len()];
        for col in 0..3 * n {
            let mut plus = v.clone();
            plus[col / 3][col % 3] += step;
            let mut minus = v.clone();
            minus[col / 3][col % 3] -= step;
            let (fp, fm) = (residuals(&plus), residuals(&minus));
            for k in 0..rows.len() {
                numeric[k][col] = (fp[k].1 - fm[k].1) / (2.0 * step);
            }
        }
        NonrigidTerm::ALL
            .iter()
            .filter_map(|&t| {
                let (mut diff, mut a2, mut b2) = (0.0, 0.0, 0.0);
                let mut any = false;
                for k in (0..rows.len()).filter(|&k| rows[k].0 == t) {
                    any = true;
                    for col in 0..3 * n {
                        let (a, b) = (analytic[k][col], numeric[k][col]);
                        diff += (a - b) * (a - b);
                        a2 += a * a;
                        b2 += b * b;
                    }
                }
                let scale = a2.max(b2).sqrt();
                any.then(|| (t, if scale < 1e-12 { 0.0 } else { diff.sqrt() / scale }))
            })
            .collect()
    }

    /// Every row with its owning vertex and, for edge rows, the other end.
    fn flatten(&self, lin: &Linearization) -> Vec<(NonrigidTerm, Row, (usize, Option<usize>))> {
        let mut out = Vec::new();
        for (i, rows) in lin.unary.iter().enumerate() {
            out.extend(rows.iter().map(|(t, r)| (*t, *r, (i, None))));
        }
        for (i, ring) in self.mesh().one_ring.iter().enumerate() {
            for (k, &j) in ring.iter().enumerate() {
                let rows = &lin.edges[self.ring_offset[i] + k];
                for (c, r) in rows.iter().enumerate() {
                    let t = if c < 3 { NonrigidTerm::Smooth } else { NonrigidTerm::Edge };
                    out.push((t, *r, (i, Some(j))));
                }
            }
        }
        out
    }

    /// Dense `JᵀJ` and `−JᵀF` from the explicit rows (test oracle).
    #[cfg(test)]
    fn dense_normal_oracle(&self, lin: &Linearization, n: usize) -> (nalgebra::DMatrix<f64>, nalgebra::DVector<f64>) {
        let rows = self.flatten(lin);
        let mut j = nalgebra::DMatrix::zeros(rows.len(), 3 * n);
        let mut f = nalgebra::DVector::zeros(rows.len());
        for (k, (_, r, ends)) in rows.iter().enumerate() {
            f[k] = r.f;
            for c in 0..3 {
                j[(k, 3 * ends.0 + c)] += r.g[c];
                if let Some(o) = ends.1 {
                    j[(k, 3 * o + c)] -= r.g[c];
                }
            }
        }
        (j.transpose() * &j, -(j.transpose() * f))
    }
}

/// Outcome of [`snap_vertices`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SnapReport {
    pub snapped: Vec<usize>,
    pub failed: Vec<usize>,
    /// Largest increase of `I_DT` between consecutive accepted walk
    /// positions.
    pub max_increase: f64,
}

/// Walks each enabled boundary vertex's projection down the distance
/// transform to the zero iso-line, back-projects at constant depth and
/// diffuses the offsets into the surrounding non-boundary vertices.
pub fn snap_vertices(
    positions: &mut [Vec3],
    mesh: &TemplateMesh,
    camera: &CameraIntrinsics,
    dt: &DistanceTransformImage,
    boundary: &[BoundaryVertex],
    params: &SnapParams,
) -> SnapReport {
    let walks: Vec<(usize, Option<Vec3>, bool, f64)> = boundary
        .par_iter()
        .filter(|b| b.direction != 0.0)
        .map(|b| {
            let v = positions[b.vertex];
            let Ok(mut p) = camera.project(&v) else {
                return (b.vertex, None, false, 0.0);
            };
            let mut d = sample_scalar(dt, &p).value;
            let mut worst: f64 = 0.0;
            let mut steps = 0;
            while d > params.tolerance && steps < params.max_steps {
                // Near the contour the interpolated field is not convex
                // along the gradient; shorten the step before giving up.
                let mut accepted = None;
                if let Some(dir) = (-dt_gradient(dt, &p).gradient).try_normalize(1e-9) {
                    let mut len = params.step.min(d);
                    while len >= params.step / 16.0 {
                        let q = p + dir * len;
                        let dq = sample_scalar(dt, &q).value;
                        if dq < d {
                            accepted = Some((q, dq));
                            break;
                        }
                        len *= 0.5;
                    }
                }
                // At saddles between diagonal contour pixels the gradient
                // vanishes; head for the lowest corner of the pixel cell and
                // stop once within tolerance.
                if accepted.is_none() {
                    let corner = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
                        .iter()
                        .map(|&(dx, dy)| Vec2::new(p.x.floor() + dx, p.y.floor() + dy))
                        .map(|q| (q, sample_scalar(dt, &q).value))
                        .filter(|&(_, dq)| dq < d)
                        .min_by(|a, b| a.1.total_cmp(&b.1));
                    if let Some((c, dc)) = corner {
                        accepted = [0.25, 0.5, 0.75]
                            .iter()
                            .map(|&s| p + (c - p) * s)
                            .map(|q| (q, sample_scalar(dt, &q).value))
                            .find(|&(_, dq)| dq < d && dq <= params.tolerance)
                            .or(Some((c, dc)));
                    }
                }
                let Some((q, dq)) = accepted else {
                    break;
                };
                worst = worst.max(dq - d);
                p = q;
                d = dq;
                steps += 1;
            }
            let ok = d <= params.tolerance;
            let moved = (steps > 0).then(|| camera.unproject(&p, v.z) - v);
            (b.vertex, moved, ok, worst)
        })
        .collect();
    let mut report = SnapReport::default();
    let n = positions.len();
    let mut offset = vec![Vec3::zeros(); n];
    let mut fixed = vec![false; n];
    for b in boundary {
        fixed[b.vertex] = true;
    }
    for (v, moved, ok, worst) in walks {
        report.max_increase = report.max_increase.max(worst);
        if !ok {
            report.failed.push(v);
        }
        if let Some(m) = moved {
            offset[v] = m;
            report.snapped.push(v);
        }
    }
    report.snapped.sort_unstable();
    report.failed.sort_unstable();
    let region: Vec<usize> = mesh
        .k_ring(&report.snapped, params.diffusion_rings)
        .into_iter()
        .filter(|&v| !fixed[v])
        .collect();
    for _ in 0..params.diffusion_iterations {
        let next: Vec<Vec3> = region
            .par_iter()
            .map(|&v| {
                let ring = &mesh.one_ring[v];
                ring.iter().map(|&u| offset[u]).sum::<Vec3>() / ring.len() as f64
            })
            .collect();
        for (&v, o) in region.iter().zip(next) {
            offset[v] = o;
        }
    }
    for (p, o) in positions.iter_mut().zip(&offset) {
        *p += o;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::humanoid::default_skeleton;
    use crate::imageproc::{euclidean_dt, gaussian_pyramid};
    use crate::shapes;
    use crate::template::{MaterialClass, SkinningWeights, DEFAULT_CLASS};
    use nalgebra::{Rotation3, UnitQuaternion};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn actor_from(v: Vec<Vec3>, t: Vec<[usize; 3]>, colors: Vec<Vec3>, class: MaterialClass) -> Actor {
        let n = v.len();
        let mesh = TemplateMesh::new(v, t, colors, vec![class; n]).unwrap();
        let skel = default_skeleton(3.0);
        let weights = SkinningWeights::new(vec![vec![(0, 1.0)]; n], skel.joint_count()).unwrap();
        Actor::new(mesh, skel, weights).unwrap()
    }

    fn sphere_actor() -> Actor {
        let (v, t) = shapes::uv_sphere(Vec3::new(0.0, 0.0, 2.0), 0.4, 6, 9);
        let colors = v.iter().map(|p| Vec3::new(0.5 + 0.5 * p.x, 0.5 + 0.5 * p.y, 0.4)).collect();
        actor_from(v, t, colors, MaterialClass::new(3).unwrap())
    }

    /// Ground-truth sphere render plus observations from a slightly larger
    /// sphere so the silhouette term is active.
    struct Obs {
        cam: CameraIntrinsics,
        pyramid: ImagePyramid,
        mask: ForegroundMask,
        dt: DistanceTransformImage,
    }

    fn observe(actor: &Actor, scale: f64) -> Obs {
        observe_moved(actor, scale, Vec3::zeros())
    }

    fn observe_moved(actor: &Actor, scale: f64, shift: Vec3) -> Obs {
        let cam = CameraIntrinsics::new(120.0, 120.0, 40.0, 40.0, 80, 80).unwrap();
        let c = Vec3::new(0.0, 0.0, 2.0);
        let v: Vec<Vec3> = actor.mesh.rest_vertices.iter().map(|p| c + (p - c) * scale + shift).collect();
        let r = raster::rasterize(&cam, &v, &actor.mesh.triangles);
        let img = r.shade(&actor.mesh.triangles, &actor.mesh.vertex_colors, Vec3::zeros());
        let mask = r.mask();
        let dt = euclidean_dt(&mask).unwrap();
        Obs {
            cam,
            pyramid: gaussian_pyramid(&img),
            mask,
            dt,
        }
    }

    fn frame<'a>(o: &'a Obs) -> NonrigidFrame<'a> {
        NonrigidFrame {
            index: 0,
            camera: &o.cam,
            pyramid: &o.pyramid,
            mask: &o.mask,
            dt: &o.dt,
            part_mask: None,
        }
    }

    fn jitter(v: &[Vec3], amount: f64, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        v.iter()
            .map(|p| p + Vec3::from_fn(|_, _| rng.random_range(-amount..amount)))
            .collect()
    }

    fn random_state(actor: &Actor, seed: u64) -> SurfaceState {
        let rest = &actor.mesh.rest_vertices;
        let skinned = jitter(rest, 0.01, seed);
        let d = jitter(&vec![Vec3::zeros(); rest.len()], 0.01, seed + 1);
        SurfaceState::new(skinned, d, Some(jitter(rest, 0.01, seed + 2)), Some(jitter(rest, 0.01, seed + 3))).unwrap()
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let actor = sphere_actor();
        let obs = observe(&actor, 1.05);
        let solver = NonrigidSolver::new(&actor, NonrigidHyperparams::default(), Reduction::Deterministic);
        for seed in 0..5 {
            let state = random_state(&actor, 10 * seed);
            let corr = solver.correspondences(&frame(&obs), &state);
            assert!(!corr.boundary.is_empty());
            for level in 0..3 {
                let errs = solver.gradcheck(&frame(&obs), &state, &corr, level, 1e-6);
                assert_eq!(errs.len(), 6, "{errs:?}");
                for (t, e) in errs {
                    assert!(e <= 1e-4, "{t:?} level {level}: {e}");
                }
            }
        }
    }

    #[test]
    fn assembly_matches_dense_normal_equations() {
        let actor = sphere_actor();
        let obs = observe(&actor, 1.05);
        let solver = NonrigidSolver::new(&actor, NonrigidHyperparams::default(), Reduction::Deterministic);
        let state = random_state(&actor, 3);
        let mut corr = solver.correspondences(&frame(&obs), &state);
        corr.boundary[0].direction = -1.0;
        let photo = solver.photo_mask(&frame(&obs), &state.current, &corr.visible, 1);
        let lin = solver.linearize(&frame(&obs), &state, &state.current, &corr, &photo, 1, false);
        let sys = solver.assemble(&lin).unwrap();
        let (a, b) = solver.dense_normal_oracle(&lin, state.current.len());
        let da = (sys.to_dense() - &a).norm() / a.norm();
        let db = (sys.rhs_dense() - &b).norm() / b.norm();
        assert!(da < 1e-12 && db < 1e-12, "{da} {db}");
        let dense = sys.to_dense();
        assert!((&dense - dense.transpose()).norm() <= 1e-12 * dense.norm());
        assert!(dense.symmetric_eigenvalues().min() > -1e-9 * dense.norm());
    }

    #[test]
    fn regularizers_vanish_at_rest() {
        let actor = sphere_actor();
        let obs = observe(&actor, 1.0);
        let solver = NonrigidSolver::new(&actor, NonrigidHyperparams::default(), Reduction::Deterministic);
        let rest = actor.mesh.rest_vertices.clone();
        let state = SurfaceState::new(rest.clone(), vec![Vec3::zeros(); rest.len()], None, None).unwrap();
        let corr = Correspondences {
            visible: vec![false; rest.len()],
            boundary: vec![],
        };
        let photo = vec![false; rest.len()];
        let e = solver.energies(&frame(&obs), &state, &rest, &corr, &photo, 0);
        for t in ["smooth", "edge", "velocity", "acceleration"] {
            assert!(e[t] < 1e-24, "{t}: {}", e[t]);
        }
    }

    #[test]
    fn stretched_edge_closed_form() {
        let v = vec![Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.1, 0.0, 2.0), Vec3::new(0.0, 0.1, 2.0)];
        let actor = actor_from(v.clone(), vec![[0, 1, 2]], vec![Vec3::zeros(); 3], DEFAULT_CLASS);
        let solver = NonrigidSolver::new(&actor, NonrigidHyperparams::default(), Reduction::Deterministic);
        let obs = observe(&actor, 1.0);
        let mut stretched = v.clone();
        stretched[1] = v[0] + (v[1] - v[0]) * 2.0;
        let state = SurfaceState::new(stretched.clone(), vec![Vec3::zeros(); 3], None, None).unwrap();
        let corr = Correspondences {
            visible: vec![false; 3],
            boundary: vec![],
        };
        let lin = solver.linearize(&frame(&obs), &state, &stretched, &corr, &[false; 3], 0, false);
        // Directed edge 0→1: |N_0| = 2, rest length 0.1.
        let row = lin.edges[0][3];
        let s = actor.mesh.edge_weight(0, 1).unwrap();
        let expect = (30.0 * s / 2.0).sqrt() * 0.1 * MM_PER_M;
        assert!((row.f - expect).abs() < 1e-12, "{} vs {expect}", row.f);
    }

    #[test]
    fn edge_energy_zero_iff_lengths_preserved() {
        let actor = sphere_actor();
        let obs = observe(&actor, 1.0);
        let solver = NonrigidSolver::new(&actor, NonrigidHyperparams::default(), Reduction::Deterministic);
        let rest = &actor.mesh.rest_vertices;
        let rot = Rotation3::from_euler_angles(0.3, -0.2, 0.7);
        let moved: Vec<Vec3> = rest.iter().map(|p| rot * p + Vec3::new(0.1, 0.2, 0.3)).collect();
        let corr = Correspondences {
            visible: vec![false; rest.len()],
            boundary: vec![],
        };
        let photo = vec![false; rest.len()];
        let state = SurfaceState::new(moved.clone(), vec![Vec3::zeros(); rest.len()], None, None).unwrap();
        let e = solver.energies(&frame(&obs), &state, &moved, &corr, &photo, 0);
        assert!(e["edge"] < 1e-20);
        let scaled: Vec<Vec3> = moved.iter().map(|p| p * 1.01).collect();
        let e = solver.energies(&frame(&obs), &state, &scaled, &corr, &photo, 0);
        assert!(e["edge"] > 1e-6);
    }

    #[test]
    fn color_pruning_zeroes_mismatched_vertices() {
        let mut actor = sphere_actor();
        let obs = observe(&actor, 1.0);
        let rest = actor.mesh.rest_vertices.clone();
        let vis = visible_vertices(&obs.cam, &rest, &actor.mesh.triangles);
        let v = (0..rest.len()).find(|&i| vis[i]).unwrap();
        actor.mesh.vertex_colors[v] += Vec3::repeat(0.5);
        let solver = NonrigidSolver::new(&actor, NonrigidHyperparams::default(), Reduction::Deterministic);
        let photo = solver.photo_mask(&frame(&obs), &rest, &vis, 2);
        assert!(!photo[v]);
        assert!(photo.iter().filter(|&&p| p).count() > vis.iter().filter(|&&p| p).count() / 2);
    }

    #[test]
    fn quadratic_regularizers_recover_the_skinned_surface() {
        let actor = sphere_actor();
        let obs = observe(&actor, 1.0);
        let hyper = NonrigidHyperparams {
            w_photo: 0.0,
            w_silhouette: 0.0,
            w_edge: 0.0,
            w_acceleration: 0.0,
            pcg_iterations: 300,
            ..Default::default()
        };
        let solver = NonrigidSolver::new(&actor, hyper, Reduction::Deterministic);
        let skinned = jitter(&actor.mesh.rest_vertices, 0.02, 5);
        let d = jitter(&vec![Vec3::zeros(); skinned.len()], 0.02, 6);
        let mut state = SurfaceState::new(skinned.clone(), d, Some(skinned.clone()), None).unwrap();
        let corr = Correspondences {
            visible: vec![false; skinned.len()],
            boundary: vec![],
        };
        let report = solver.solve(&frame(&obs), &mut state, &corr).unwrap();
        let err = state.current.iter().zip(&skinned).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
        assert!(report.is_monotone());
        assert!(state.displacements.iter().all(|d| d.norm() < 1e-9));
    }

    #[test]
    fn silhouette_pulls_the_surface_toward_the_contour() {
        let actor = sphere_actor();
        let obs = observe_moved(&actor, 1.0, Vec3::new(0.06, 0.0, 0.0));
        let hyper = NonrigidHyperparams {
            w_photo: 0.0,
            w_velocity: 0.0,
            w_acceleration: 0.0,
            pcg_iterations: 50,
            ..Default::default()
        };
        let solver = NonrigidSolver::new(&actor, hyper, Reduction::Deterministic);
        let rest = actor.mesh.rest_vertices.clone();
        let mut state = SurfaceState::new(rest.clone(), vec![Vec3::zeros(); rest.len()], None, None).unwrap();
        let corr = solver.correspondences(&frame(&obs), &state);
        let report = solver.solve(&frame(&obs), &mut state, &corr).unwrap();
        assert!(report.is_monotone(), "{:?}", report.energies);
        assert!(report.final_energy() < report.initial_energy());
        let before: f64 = corr.boundary.iter().map(|b| sample_scalar(&obs.dt, &obs.cam.project_unchecked(&rest[b.vertex])).value).sum();
        let after: f64 = corr
            .boundary
            .iter()
            .map(|b| sample_scalar(&obs.dt, &obs.cam.project_unchecked(&state.current[b.vertex])).value)
            .sum();
        assert!(after < 0.7 * before, "{before} -> {after}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn geometry_terms_are_rigidly_equivariant(
            axis in proptest::array::uniform3(-1.0f64..1.0),
            angle in -3.0f64..3.0,
            shift in proptest::array::uniform3(-1.0f64..1.0),
            seed in 0u64..1000,
        ) {
            let actor = sphere_actor();
            let obs = observe(&actor, 1.0);
            let hyper = NonrigidHyperparams { w_photo: 0.0, w_silhouette: 0.0, ..Default::default() };
            let solver = NonrigidSolver::new(&actor, hyper, Reduction::Deterministic);
            let axis = Vec3::from(axis);
            prop_assume!(axis.norm() > 0.1);
            let q = UnitQuaternion::from_scaled_axis(axis.normalize() * angle);
            let t = Vec3::from(shift);
            let g = |v: &[Vec3]| -> Vec<Vec3> { v.iter().map(|p| q * p + t).collect() };
            let s = random_state(&actor, seed);
            let mut a = s.clone();
            let mut b = SurfaceState::new(g(&s.skinned), s.displacements.iter().map(|d| q * d).collect(), Some(g(&s.prev)), Some(g(&s.prev2))).unwrap();
            let corr = Correspondences { visible: vec![false; s.current.len()], boundary: vec![] };
            solver.solve(&frame(&obs), &mut a, &corr).unwrap();
            solver.solve(&frame(&obs), &mut b, &corr).unwrap();
            for (x, y) in g(&a.current).iter().zip(&b.current) {
                prop_assert!((x - y).norm() < 1e-9);
            }
        }
    }

    fn grid_mesh(n: usize, spacing: f64, z: f64) -> TemplateMesh {
        let mut v = Vec::new();
        for y in 0..n {
            for x in 0..n {
                v.push(Vec3::new(x as f64 * spacing, y as f64 * spacing, z));
            }
        }
        let mut t = Vec::new();
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let i = y * n + x;
                t.push([i, i + 1, i + n + 1]);
                t.push([i, i + n + 1, i + n]);
            }
        }
        let c = vec![Vec3::zeros(); v.len()];
        let l = vec![DEFAULT_CLASS; v.len()];
        TemplateMesh::new(v, t, c, l).unwrap()
    }

    /// Camera with one pixel per 0.01 units at depth 1.
    fn snap_scene() -> (CameraIntrinsics, ForegroundMask, DistanceTransformImage) {
        let cam = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, 64, 64).unwrap();
        let mask = Grid::from_fn(64, 64, |x, _| x <= 30);
        let dt = euclidean_dt(&mask).unwrap();
        (cam, mask, dt)
    }

    #[test]
    fn snapping_reaches_the_zero_iso_line() {
        let (cam, _, dt) = snap_scene();
        let mesh = grid_mesh(9, 0.01, 1.0);
        // Column x = 8 px projects 22 px inside; move vertex 40 (x=4,y=4) to
        // 3 px outside the contour at x = 30.
        let mut v = mesh.rest_vertices.clone();
        v[40] = cam.unproject(&Vec2::new(33.0, 4.0), 1.0);
        let boundary = [BoundaryVertex {
            vertex: 40,
            normal: Vec2::x(),
            direction: 1.0,
        }];
        let before = v.clone();
        let r = snap_vertices(&mut v, &mesh, &cam, &dt, &boundary, &SnapParams::default());
        let d = sample_scalar(&dt, &cam.project_unchecked(&v[40])).value;
        assert!(d <= 0.25, "{d}");
        assert!((v[40].z - 1.0).abs() < 1e-12);
        assert!(r.failed.is_empty());
        assert!(r.max_increase <= 0.0);
        assert_eq!(r.snapped, vec![40]);
        // 1-ring neighbors follow partially; vertices beyond the 2-ring stay.
        let moved = |i: usize| (v[i] - before[i]).norm() > 0.0;
        assert!(mesh.one_ring[40].iter().all(|&u| moved(u)));
        assert!(!moved(0) && !moved(80));
    }

    #[test]
    fn snapping_escapes_a_saddle_of_the_interpolated_field() {
        let cam = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, 64, 64).unwrap();
        // Staircase contour x + y = 60: the cell between contour pixels
        // (31, 29) and (30, 30) has a flat saddle of height 0.5 at its center.
        let mask = Grid::from_fn(64, 64, |x, y| x + y <= 60);
        let dt = euclidean_dt(&mask).unwrap();
        let saddle = Vec2::new(30.5, 29.5);
        assert!((sample_scalar(&dt, &saddle).value - 0.5).abs() < 1e-12);
        assert!(dt_gradient(&dt, &saddle).gradient.norm() < 1e-12);
        let mesh = grid_mesh(9, 0.01, 1.0);
        let mut v = mesh.rest_vertices.clone();
        v[40] = cam.unproject(&saddle, 1.0);
        let boundary = [BoundaryVertex {
            vertex: 40,
            normal: Vec2::new(1.0, 1.0).normalize(),
            direction: 1.0,
        }];
        let r = snap_vertices(&mut v, &mesh, &cam, &dt, &boundary, &SnapParams::default());
        assert_eq!(r.snapped, vec![40]);
        assert!(r.failed.is_empty());
        assert!(r.max_increase <= 0.0);
        assert!(sample_scalar(&dt, &cam.project_unchecked(&v[40])).value <= 0.25);
    }

    #[test]
    fn snapping_leaves_aligned_and_disabled_vertices() {
        let (cam, _, dt) = snap_scene();
        let mesh = grid_mesh(9, 0.01, 1.0);
        let mut v = mesh.rest_vertices.clone();
        v[40] = cam.unproject(&Vec2::new(30.0, 4.0), 1.0);
        v[10] = cam.unproject(&Vec2::new(40.0, 4.0), 1.0);
        let before = v.clone();
        let boundary = [
            BoundaryVertex {
                vertex: 40,
                normal: Vec2::x(),
                direction: 1.0,
            },
            BoundaryVertex {
                vertex: 10,
                normal: Vec2::x(),
                direction: 0.0,
            },
        ];
        let r = snap_vertices(&mut v, &mesh, &cam, &dt, &boundary, &SnapParams::default());
        assert!(r.snapped.is_empty());
        assert_eq!(v, before);
    }

    #[test]
    fn body_part_mask_closes_gaps_and_prefers_torso() {
        let cam = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, 80, 40).unwrap();
        // Torso block covering x in [10, 30] px, arm block x in [36, 56] px.
        let (mut v, mut t) = shapes::quad(Vec3::new(0.2, 0.2, 1.0), 0.1);
        let (v2, t2) = shapes::quad(Vec3::new(0.46, 0.2, 1.0), 0.1);
        t.extend(t2.iter().map(|f| f.map(|i| i + 4)));
        v.extend(v2);
        let parts = [1u8, 1, 1, 1, 3, 3, 3, 3];
        let m = build_body_part_mask(&cam, &v, &t, &parts, 10);
        assert_eq!(*m.get(33, 20), 1, "gap closed by the torso");
        assert_eq!(*m.get(38, 20), 1, "arm within reach of the torso");
        assert_eq!(*m.get(50, 20), 3);
        assert_eq!(*m.get(65, 20), 3, "arm dilated into empty space");
        assert_eq!(*m.get(75, 20), 0);
        let arm_only = build_body_part_mask(&cam, &v[4..], &t2, &parts[4..], 10);
        let footprint = raster::rasterize(&cam, &v[4..], &t2).mask();
        let seeds = squared_edt_from_seeds(&footprint);
        for y in 0..40 {
            for x in 0..80 {
                assert_eq!(*arm_only.get(x, y) == 3, *seeds.get(x, y) <= 100.0, "({x}, {y})");
            }
        }
    }

    #[test]
    fn sphere_is_half_visible() {
        // At distance 10 radii the 1% depth slack and the perspective cap
        // shrinkage are both a few percent.
        let (v, t) = shapes::uv_sphere(Vec3::new(0.0, 0.0, 10.0), 1.0, 30, 60);
        let cam = CameraIntrinsics::new(600.0, 600.0, 128.0, 128.0, 256, 256).unwrap();
        let vis = visible_vertices(&cam, &v, &t);
        let frac = vis.iter().filter(|&&b| b).count() as f64 / v.len() as f64;
        assert!((frac - 0.5).abs() <= 0.05, "{frac}");
    }

    #[test]
    fn state_history_defaults() {
        let s = SurfaceState::new(vec![Vec3::x()], vec![Vec3::y()], None, None).unwrap();
        assert_eq!(s.current, vec![Vec3::new(1.0, 1.0, 0.0)]);
        assert_eq!(s.prev, s.current);
        assert_eq!(s.prev2, s.current);
        assert!(SurfaceState::new(vec![Vec3::x()], vec![], None, None).is_err());
    }
}
