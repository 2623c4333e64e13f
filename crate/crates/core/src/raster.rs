//! Depth-buffered barycentric triangle rasterizer. Visibility, body-part
//! masks, the synthetic renderer and IoU all go through this one routine so
//! that they agree on which pixels a mesh covers.
//!
//! Pixel `(x, y)` is the sample at continuous image position `(x, y)`, the
//! same convention the projection and bilinear sampling use.

use rayon::prelude::*;

use crate::camera::CameraIntrinsics;
use crate::imageproc::{ColorImage, ForegroundMask, Grid};
use crate::{Vec2, Vec3};

pub const NO_TRIANGLE: u32 = u32::MAX;
/// Triangles with a vertex closer than this to the camera plane are dropped.
pub const NEAR_PLANE: f64 = 1e-6;
/// Relative depth slack of the vertex visibility test.
pub const VISIBILITY_EPS: f64 = 0.01;

const BAND_ROWS: usize = 8;

#[derive(Clone, Debug)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Camera-space depth of the nearest surface, `INFINITY` where empty.
    pub depth: Vec<f64>,
    pub triangle: Vec<u32>,
    /// Perspective-correct barycentric coordinates of the covering triangle.
    pub bary: Vec<[f64; 3]>,
}

struct ScreenTriangle {
    p: [Vec2; 3],
    inv_z: [f64; 3],
    inv_area: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

#[inline]
fn edge(a: &Vec2, b: &Vec2, p: &Vec2) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

fn setup(cam: &CameraIntrinsics, v: [&Vec3; 3]) -> Option<ScreenTriangle> {
    if v.iter().any(|p| p.z <= NEAR_PLANE) {
        return None;
    }
    let p = [
        cam.project_unchecked(v[0]),
        cam.project_unchecked(v[1]),
        cam.project_unchecked(v[2]),
    ];
    let area = edge(&p[0], &p[1], &p[2]);
    if area.abs() < 1e-12 || !area.is_finite() {
        return None;
    }
    let (w, h) = (cam.width as f64, cam.height as f64);
    let min_x = p.iter().map(|q| q.x).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_x = p.iter().map(|q| q.x).fold(f64::NEG_INFINITY, f64::max).floor().min(w - 1.0);
    let min_y = p.iter().map(|q| q.y).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_y = p.iter().map(|q| q.y).fold(f64::NEG_INFINITY, f64::max).floor().min(h - 1.0);
    if min_x > max_x || min_y > max_y {
        return None;
    }
    Some(ScreenTriangle {
        p,
        inv_z: [1.0 / v[0].z, 1.0 / v[1].z, 1.0 / v[2].z],
        inv_area: 1.0 / area,
        x0: min_x as usize,
        x1: max_x as usize,
        y0: min_y as usize,
        y1: max_y as usize,
    })
}

/// Rasterizes camera-space `vertices`. No back-face culling; the nearest
/// surface wins, with ties going to the lower triangle index.
pub fn rasterize(cam: &CameraIntrinsics, vertices: &[Vec3], triangles: &[[usize; 3]]) -> Raster {
    let (w, h) = (cam.width, cam.height);
    let screen: Vec<Option<ScreenTriangle>> = triangles
        .par_iter()
        .map(|t| setup(cam, [&vertices[t[0]], &vertices[t[1]], &vertices[t[2]]]))
        .collect();
    let mut depth = vec![f64::INFINITY; w * h];
    let mut triangle = vec![NO_TRIANGLE; w * h];
    let mut bary = vec![[0.0; 3]; w * h];
    depth
        .par_chunks_mut(w * BAND_ROWS)
        .zip(triangle.par_chunks_mut(w * BAND_ROWS))
        .zip(bary.par_chunks_mut(w * BAND_ROWS))
        .enumerate()
        .for_each(|(band, ((depth, tri_id), bary))| {
            let y_start = band * BAND_ROWS;
            let y_end = y_start + depth.len() / w;
            for (ti, st) in screen.iter().enumerate() {
                let Some(st) = st else { continue };
                if st.y1 < y_start || st.y0 >= y_end {
                    continue;
                }
                for y in st.y0.max(y_start)..=st.y1.min(y_end - 1) {
                    for x in st.x0..=st.x1 {
                        let q = Vec2::new(x as f64, y as f64);
                        let l = [
                            edge(&st.p[1], &st.p[2], &q) * st.inv_area,
                            edge(&st.p[2], &st.p[0], &q) * st.inv_area,
                            edge(&st.p[0], &st.p[1], &q) * st.inv_area,
                        ];
                        if l.iter().any(|&c| c < -1e-12) {
                            continue;
                        }
                        let inv_z = l[0] * st.inv_z[0] + l[1] * st.inv_z[1] + l[2] * st.inv_z[2];
                        let z = 1.0 / inv_z;
                        let k = (y - y_start) * w + x;
                        if z < depth[k] || (z == depth[k] && (ti as u32) < tri_id[k]) {
                            depth[k] = z;
                            tri_id[k] = ti as u32;
                            bary[k] = [
                                l[0] * st.inv_z[0] * z,
                                l[1] * st.inv_z[1] * z,
                                l[2] * st.inv_z[2] * z,
                            ];
                        }
                    }
                }
            }
        });
    Raster {
        width: w,
        height: h,
        depth,
        triangle,
        bary,
    }
}

impl Raster {
    #[inline]
    pub fn covered(&self, x: usize, y: usize) -> bool {
        self.triangle[y * self.width + x] != NO_TRIANGLE
    }

    #[inline]
    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn mask(&self) -> ForegroundMask {
        Grid::from_fn(self.width, self.height, |x, y| self.covered(x, y))
    }

    /// Gouraud shading of per-vertex colors over a constant background.
    pub fn shade(&self, triangles: &[[usize; 3]], colors: &[Vec3], background: Vec3) -> ColorImage {
        Grid::from_fn(self.width, self.height, |x, y| {
            let k = y * self.width + x;
            match self.triangle[k] {
                NO_TRIANGLE => background,
                t => {
                    let tri = triangles[t as usize];
                    let b = self.bary[k];
                    colors[tri[0]] * b[0] + colors[tri[1]] * b[1] + colors[tri[2]] * b[2]
                }
            }
        })
    }

    /// Per-pixel label of the covering triangle's vertex with the largest
    /// barycentric weight; `empty` where nothing is drawn.
    pub fn label_image(&self, triangles: &[[usize; 3]], labels: &[u8], empty: u8) -> Grid<u8> {
        Grid::from_fn(self.width, self.height, |x, y| {
            let k = y * self.width + x;
            match self.triangle[k] {
                NO_TRIANGLE => empty,
                t => {
                    let b = self.bary[k];
                    let mut best = 0;
                    for c in 1..3 {
                        if b[c] > b[best] {
                            best = c;
                        }
                    }
                    labels[triangles[t as usize][best]]
                }
            }
        })
    }
}

/// Depth-buffer visibility: a vertex is visible when it projects inside the
/// image and its depth is at most the buffer depth there plus 1% of its own
/// depth. Uncovered pixels occlude nothing.
pub fn vertex_visibility(cam: &CameraIntrinsics, raster: &Raster, vertices: &[Vec3]) -> Vec<bool> {
    vertices
        .par_iter()
        .map(|v| {
            if v.z <= NEAR_PLANE {
                return false;
            }
            let px = cam.project_unchecked(v);
            let (x, y) = (px.x.round(), px.y.round());
            if x < 0.0 || y < 0.0 || x >= raster.width as f64 || y >= raster.height as f64 {
                return false;
            }
            let d = raster.depth_at(x as usize, y as usize);
            v.z <= d + VISIBILITY_EPS * v.z
        })
        .collect()
}
