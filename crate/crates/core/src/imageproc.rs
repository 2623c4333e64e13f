//! Per-frame image products: foreground masks, exact Euclidean distance
//! transforms and their gradients, blur pyramids and bilinear sampling.
//!
//! Pixel centers sit at integer coordinates, so pixel `(x, y)` covers
//! `[x - 0.5, x + 0.5) x [y - 0.5, y + 0.5)`.

use std::path::Path;

use nalgebra::Matrix3x2;
use rayon::prelude::*;

use crate::{Error, Result, Vec2, Vec3};

/// Blur kernel sizes of the three pyramid levels, coarse to fine.
pub const PYRAMID_KERNELS: [usize; 3] = [15, 9, 3];

/// Dense row-major image of `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        let i = self.index(x, y);
        self.data[i] = v;
    }

    #[inline]
    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Pixel nearest to a continuous position, if inside the image.
    pub fn pixel_at(&self, p: &Vec2) -> Option<(usize, usize)> {
        let x = p.x.round();
        let y = p.y.round();
        if !(x.is_finite() && y.is_finite()) {
            return None;
        }
        let (x, y) = (x as i64, y as i64);
        self.in_bounds(x, y).then_some((x as usize, y as usize))
    }
}

/// Binary foreground segmentation, `true` = foreground.
pub type ForegroundMask = Grid<bool>;
/// Unsigned distance (pixels) to the nearest silhouette contour pixel.
pub type DistanceTransformImage = Grid<f64>;
/// RGB image with channels in `[0, 1]`.
pub type ColorImage = Grid<Vec3>;

impl ForegroundMask {
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_foreground(&self, x: i64, y: i64) -> bool {
        self.in_bounds(x, y) && *self.get(x as usize, y as usize)
    }

    /// Loads an 8-bit grayscale file, thresholded at 128.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.into(),
                source,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Ok(Grid::from_fn(w as usize, h as usize, |x, y| {
            img.get_pixel(x as u32, y as u32).0[0] >= 128
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if *self.get(x as usize, y as usize) { 255 } else { 0 }])
        });
        img.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }
}

impl ColorImage {
    /// Loads an 8-bit RGB file, converted to `[0, 1]` floats.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.into(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Grid::from_fn(w as usize, h as usize, |x, y| {
            let p = img.get_pixel(x as u32, y as u32).0;
            Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let img = image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let c = self.get(x as usize, y as usize);
            image::Rgb([q(c.x), q(c.y), q(c.z)])
        });
        img.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    /// Rounds every channel to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        Grid {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0))
                .collect(),
        }
    }
}

/// A pixel is on the contour iff it is foreground and has at least one
/// background 4-neighbor; pixels outside the image count as background.
pub fn is_contour_pixel(mask: &ForegroundMask, x: usize, y: usize) -> bool {
    if !*mask.get(x, y) {
        return false;
    }
    let (x, y) = (x as i64, y as i64);
    [(1, 0), (-1, 0), (0, 1), (0, -1)]
        .iter()
        .any(|(dx, dy)| !mask.is_foreground(x + dx, y + dy))
}

pub fn contour_pixels(mask: &ForegroundMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if is_contour_pixel(mask, x, y) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Exact Euclidean distance transform to the mask contour, for interior and
/// exterior pixels alike.
pub fn euclidean_dt(mask: &ForegroundMask) -> Result<DistanceTransformImage> {
    let seeds = Grid::from_fn(mask.width, mask.height, |x, y| is_contour_pixel(mask, x, y));
    if !seeds.data.iter().any(|&s| s) {
        return Err(Error::EmptyMask);
    }
    let sq = squared_edt_from_seeds(&seeds);
    Ok(Grid {
        width: sq.width,
        height: sq.height,
        data: sq.data.into_iter().map(f64::sqrt).collect(),
    })
}

/// Squared Euclidean distance of every pixel to the nearest seed pixel,
/// `f64::INFINITY` when there are no seeds.
///
/// Two separable passes of the lower envelope of parabolas: columns first,
/// then rows. Exact on the integer grid.
pub fn squared_edt_from_seeds(seeds: &Grid<bool>) -> Grid<f64> {
    let (w, h) = (seeds.width, seeds.height);
    let mut cols = vec![f64::INFINITY; w * h];
    cols.par_chunks_mut(h).enumerate().for_each(|(x, col)| {
        let f: Vec<f64> = (0..h)
            .map(|y| if *seeds.get(x, y) { 0.0 } else { f64::INFINITY })
            .collect();
        lower_envelope_1d(&f, col);
    });
    let mut out = vec![f64::INFINITY; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let f: Vec<f64> = (0..w).map(|x| cols[x * h + y]).collect();
        lower_envelope_1d(&f, row);
    });
    Grid {
        width: w,
        height: h,
        data: out,
    }
}

/// `out[q] = min_p f[p] + (q - p)^2` over the finite samples of `f`.
fn lower_envelope_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                        continue;
                    }
                    v.push(q);
                    z.push(s);
                    break;
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Result of a gradient query; `clamped` marks positions that were moved
/// into the valid region first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientSample {
    pub gradient: Vec2,
    pub clamped: bool,
}

#[inline]
fn central_diff(dt: &DistanceTransformImage, x: usize, y: usize) -> Vec2 {
    let (w, h) = (dt.width, dt.height);
    let xm = x.saturating_sub(1);
    let xp = (x + 1).min(w - 1);
    let ym = y.saturating_sub(1);
    let yp = (y + 1).min(h - 1);
    let gx = if xp > xm {
        (dt.get(xp, y) - dt.get(xm, y)) / (xp - xm) as f64
    } else {
        0.0
    };
    let gy = if yp > ym {
        (dt.get(x, yp) - dt.get(x, ym)) / (yp - ym) as f64
    } else {
        0.0
    };
    Vec2::new(gx, gy)
}

/// Central differences of the distance transform, bilinearly interpolated
/// at a continuous position. Valid positions keep a 1-pixel margin.
pub fn dt_gradient(dt: &DistanceTransformImage, p: &Vec2) -> GradientSample {
    let (lo_x, hi_x) = (1.0, dt.width as f64 - 2.0);
    let (lo_y, hi_y) = (1.0, dt.height as f64 - 2.0);
    let mut clamped = false;
    let mut c = *p;
    if !(c.x >= lo_x && c.x <= hi_x) {
        c.x = if c.x.is_nan() { lo_x } else { c.x.clamp(lo_x, hi_x.max(lo_x)) };
        clamped = true;
    }
    if !(c.y >= lo_y && c.y <= hi_y) {
        c.y = if c.y.is_nan() { lo_y } else { c.y.clamp(lo_y, hi_y.max(lo_y)) };
        clamped = true;
    }
    let (x0, y0, fx, fy) = cell(dt.width, dt.height, &c);
    let g00 = central_diff(dt, x0, y0);
    let g10 = central_diff(dt, x0 + 1, y0);
    let g01 = central_diff(dt, x0, y0 + 1);
    let g11 = central_diff(dt, x0 + 1, y0 + 1);
    let gradient = (g00 * (1.0 - fx) + g10 * fx) * (1.0 - fy) + (g01 * (1.0 - fx) + g11 * fx) * fy;
    GradientSample { gradient, clamped }
}

/// Cell origin and fractional offsets of a position already clamped to the image.
#[inline]
fn cell(w: usize, h: usize, p: &Vec2) -> (usize, usize, f64, f64) {
    let cx = |v: f64, n: usize| -> (usize, f64) {
        if n < 2 {
            return (0, 0.0);
        }
        let i = (v.floor().max(0.0) as usize).min(n - 2);
        (i, v - i as f64)
    };
    let (x0, fx) = cx(p.x, w);
    let (y0, fy) = cx(p.y, h);
    (x0, y0, fx, fy)
}

fn clamp_to_image(w: usize, h: usize, p: &Vec2) -> (Vec2, bool) {
    let hx = (w - 1) as f64;
    let hy = (h - 1) as f64;
    let inside = p.x >= 0.0 && p.y >= 0.0 && p.x <= hx && p.y <= hy;
    if inside {
        (*p, false)
    } else {
        let fix = |v: f64, hi: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, hi) };
        (Vec2::new(fix(p.x, hx), fix(p.y, hy)), true)
    }
}

/// Bilinear sample of a scalar image and the analytic gradient of the
/// bilinear patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarSample {
    pub value: f64,
    pub gradient: Vec2,
    pub clamped: bool,
}

pub fn sample_scalar(img: &Grid<f64>, p: &Vec2) -> ScalarSample {
    let (c, clamped) = clamp_to_image(img.width, img.height, p);
    let (x0, y0, fx, fy) = cell(img.width, img.height, &c);
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let v00 = *img.get(x0, y0);
    let v10 = *img.get(x1, y0);
    let v01 = *img.get(x0, y1);
    let v11 = *img.get(x1, y1);
    let value = (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy;
    let mut gradient = Vec2::new(
        (1.0 - fy) * (v10 - v00) + fy * (v11 - v01),
        (1.0 - fx) * (v01 - v00) + fx * (v11 - v10),
    );
    if clamped {
        gradient = Vec2::zeros();
    }
    ScalarSample {
        value,
        gradient,
        clamped,
    }
}

/// Bilinear RGB sample with its 3x2 spatial Jacobian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorSample {
    pub value: Vec3,
    pub gradient: Matrix3x2<f64>,
    pub clamped: bool,
}

pub fn sample_bilinear(img: &ColorImage, p: &Vec2) -> ColorSample {
    let (c, clamped) = clamp_to_image(img.width, img.height, p);
    let (x0, y0, fx, fy) = cell(img.width, img.height, &c);
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let v00 = img.get(x0, y0);
    let v10 = img.get(x1, y0);
    let v01 = img.get(x0, y1);
    let v11 = img.get(x1, y1);
    let value = (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy;
    let gx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
    let gy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx;
    let gradient = if clamped {
        Matrix3x2::zeros()
    } else {
        Matrix3x2::from_columns(&[gx, gy])
    };
    ColorSample {
        value,
        gradient,
        clamped,
    }
}

/// Three blur levels of one frame, all at full resolution.
#[derive(Clone, Debug)]
pub struct ImagePyramid {
    pub kernel_sizes: [usize; 3],
    pub levels: [ColorImage; 3],
}

/// Normalized 1D Gaussian taps with `sigma = (size - 1) / 6`.
pub fn gaussian_kernel(size: usize) -> Vec<f64> {
    assert!(size % 2 == 1, "kernel size must be odd");
    if size == 1 {
        return vec![1.0];
    }
    let sigma = (size as f64 - 1.0) / 6.0;
    let r = (size / 2) as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &ColorImage, size: usize) -> ColorImage {
    let k = gaussian_kernel(size);
    let r = (size / 2) as i64;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![Vec3::zeros(); w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = Vec3::zeros();
            for (t, kv) in k.iter().enumerate() {
                let sx = (x as i64 + t as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += img.get(sx, y) * *kv;
            }
            *out = acc;
        }
    });
    let mut out = vec![Vec3::zeros(); w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = Vec3::zeros();
            for (t, kv) in k.iter().enumerate() {
                let sy = (y as i64 + t as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += tmp[sy * w + x] * *kv;
            }
            *o = acc;
        }
    });
    Grid {
        width: w,
        height: h,
        data: out,
    }
}

pub fn gaussian_pyramid(img: &ColorImage) -> ImagePyramid {
    gaussian_pyramid_with(img, PYRAMID_KERNELS)
}

/// Pyramid with explicit (odd) kernel sizes, coarse to fine.
pub fn gaussian_pyramid_with(img: &ColorImage, kernel_sizes: [usize; 3]) -> ImagePyramid {
    ImagePyramid {
        kernel_sizes,
        levels: kernel_sizes.map(|k| gaussian_blur(img, k)),
    }
}
