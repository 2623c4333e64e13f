//! Evaluation metrics and temporal post-smoothing.

use nalgebra::{Matrix3, SVD};

use crate::imageproc::ForegroundMask;
use crate::{Error, Result, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Iou {
    pub value: f64,
    /// Both masks were empty; the value is defined as 1.
    pub both_empty: bool,
}

pub fn metric_iou(a: &ForegroundMask, b: &ForegroundMask) -> Result<Iou> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Dimension(format!(
            "mask sizes {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(Iou {
            value: 1.0,
            both_empty: true,
        });
    }
    Ok(Iou {
        value: inter as f64 / union as f64,
        both_empty: false,
    })
}

fn mean(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len() as f64
}

/// Per-vertex distances in millimeters after aligning the centroids.
/// Positions are in meters.
pub fn vertex_errors(result: &[Vec3], reference: &[Vec3]) -> Result<Vec<f64>> {
    if result.len() != reference.len() || result.is_empty() {
        return Err(Error::Dimension(format!(
            "{} result vertices vs {} reference vertices",
            result.len(),
            reference.len()
        )));
    }
    let shift = mean(reference) - mean(result);
    Ok(result.iter().zip(reference).map(|(r, g)| 1000.0 * (r + shift - g).norm()).collect())
}

/// Mean of [`vertex_errors`].
pub fn metric_vertex_error(result: &[Vec3], reference: &[Vec3]) -> Result<f64> {
    let e = vertex_errors(result, reference)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Similarity `(s, R, t)` minimizing `Σ |s R x + t - y|²`.
#[derive(Clone, Debug)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }
}

/// Least-squares similarity alignment of `from` onto `to` (Umeyama).
pub fn similarity_alignment(from: &[Vec3], to: &[Vec3]) -> Result<Similarity> {
    if from.len() != to.len() {
        return Err(Error::Dimension(format!("{} vs {} points", from.len(), to.len())));
    }
    if from.len() < 3 {
        return Err(Error::TooFewJoints(from.len()));
    }
    let (mx, my) = (mean(from), mean(to));
    let n = from.len() as f64;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (x, y) in from.iter().zip(to) {
        let (dx, dy) = (x - mx, y - my);
        cov += dy * dx.transpose();
        var += dx.norm_squared();
    }
    cov /= n;
    var /= n;
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * vt;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = if var > 0.0 { trace / var } else { 1.0 };
    Ok(Similarity {
        scale,
        rotation,
        translation: my - rotation * mx * scale,
    })
}

/// Mean per-joint distance in millimeters after similarity alignment of
/// the result onto the reference.
pub fn metric_joint_error(result: &[Vec3], reference: &[Vec3]) -> Result<f64> {
    let s = similarity_alignment(result, reference)?;
    let total: f64 = result.iter().zip(reference).map(|(r, g)| (s.apply(r) - g).norm()).sum();
    Ok(1000.0 * total / result.len() as f64)
}

/// Per-coordinate temporal convolution of vertex trajectories
/// (`frames[t][v]`). At the ends the stencil is truncated and
/// renormalized.
pub fn smooth_trajectories(frames: &[Vec<Vec3>], stencil: [f64; 3]) -> Vec<Vec<Vec3>> {
    let n = frames.len();
    (0..n)
        .map(|t| {
            let taps: Vec<(usize, f64)> = [(t.wrapping_sub(1), stencil[0]), (t, stencil[1]), (t + 1, stencil[2])]
                .into_iter()
                .filter(|&(k, _)| k < n)
                .collect();
            let norm: f64 = taps.iter().map(|&(_, w)| w).sum();
            (0..frames[t].len())
                .map(|v| taps.iter().map(|&(k, w)| frames[k][v] * w).sum::<Vec3>() / norm)
                .collect()
        })
        .collect()
}
