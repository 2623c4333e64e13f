//! Pinhole camera. Camera space and world space coincide (static camera).

use std::path::Path;

use nalgebra::Matrix2x3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec2, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invariant("camera", 0, "focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invariant("camera", 0, "image size must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::NonFinite("principal point"));
        }
        Ok(())
    }

    /// Perspective projection `(fx x/z + cx, fy y/z + cy)`.
    pub fn project(&self, p: &Vec3) -> Result<Vec2> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera { z: p.z });
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, p: &Vec3) -> Vec2 {
        let iz = 1.0 / p.z;
        Vec2::new(self.fx * p.x * iz + self.cx, self.fy * p.y * iz + self.cy)
    }

    /// Analytic `d(project)/d(x, y, z)`.
    pub fn project_jacobian(&self, p: &Vec3) -> Result<Matrix2x3<f64>> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera { z: p.z });
        }
        Ok(self.project_jacobian_unchecked(p))
    }

    #[inline]
    pub(crate) fn project_jacobian_unchecked(&self, p: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    /// Inverse projection of a pixel position at the given depth.
    pub fn unproject(&self, px: &Vec2, depth: f64) -> Vec3 {
        Vec3::new(
            (px.x - self.cx) / self.fx * depth,
            (px.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    pub fn contains(&self, px: &Vec2) -> bool {
        px.x >= -0.5
            && px.y >= -0.5
            && px.x < self.width as f64 - 0.5
            && px.y < self.height as f64 - 0.5
    }

    /// Parses `fx fy cx cy width height` (whitespace separated, `#` comments).
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let tokens: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .flat_map(|(i, l)| {
                let l = l.split('#').next().unwrap_or("");
                l.split_whitespace().map(move |t| (i + 1, t))
            })
            .collect();
        if tokens.len() != 6 {
            return Err(Error::parse(
                path,
                tokens.last().map_or(1, |t| t.0),
                format!("expected 6 calibration values, found {}", tokens.len()),
            ));
        }
        let num = |k: usize| -> Result<f64> {
            tokens[k]
                .1
                .parse::<f64>()
                .map_err(|e| Error::parse(path, tokens[k].0, e.to_string()))
        };
        let dim = |k: usize| -> Result<usize> {
            tokens[k]
                .1
                .parse::<usize>()
                .map_err(|e| Error::parse(path, tokens[k].0, e.to_string()))
        };
        CameraIntrinsics::new(num(0)?, num(1)?, num(2)?, num(3)?, dim(4)?, dim(5)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        format!(
            "{} {} {} {} {} {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }
}
