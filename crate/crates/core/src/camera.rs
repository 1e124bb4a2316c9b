//! Pinhole cameras described by a 3x4 projection matrix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("projection matrix of view {0} is rank deficient")]
    RankDeficient(String),
    #[error("projection matrix of view {0} has non-finite entries")]
    NonFinite(String),
}

/// Maps homogeneous world points `[x, y, z, 1]` to homogeneous pixels `[u*w, v*w, w]`.
///
/// Pixel `u` runs along image columns (width), `v` along rows (height); `w` is the depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub view_id: String,
    pub projection: [[f64; 4]; 3],
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
}

fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl CameraModel {
    pub fn new(
        view_id: impl Into<String>,
        projection: [[f64; 4]; 3],
        image_size: (usize, usize),
    ) -> Result<Self, CameraError> {
        let cam = Self {
            view_id: view_id.into(),
            projection,
            image_size,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let p = &self.projection;
        if p.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CameraError::NonFinite(self.view_id.clone()));
        }
        let scale = p.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        let mut best: f64 = 0.0;
        for skip in 0..4 {
            let cols: Vec<usize> = (0..4).filter(|&c| c != skip).collect();
            let m = [0, 1, 2].map(|r| [p[r][cols[0]], p[r][cols[1]], p[r][cols[2]]]);
            best = best.max(det3(m).abs());
        }
        if scale == 0.0 || best <= 1e-12 * scale.powi(3) {
            return Err(CameraError::RankDeficient(self.view_id.clone()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target` with world `up`; focal length in pixels,
    /// principal point at the image centre.
    pub fn look_at(
        view_id: impl Into<String>,
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal_px: f64,
        image_size: (usize, usize),
    ) -> Self {
        let f = normalize(sub(target, eye));
        let r = normalize(cross(f, up));
        let d = cross(f, r);
        let rot = [r, d, f];
        let t = [-dot(r, eye), -dot(d, eye), -dot(f, eye)];
        let (h, w) = image_size;
        let k = [[focal_px, 0.0, w as f64 / 2.0], [0.0, focal_px, h as f64 / 2.0], [0.0, 0.0, 1.0]];
        let mut p = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                p[i][j] = (0..3).map(|m| k[i][m] * rot[m][j]).sum();
            }
            p[i][3] = (0..3).map(|m| k[i][m] * t[m]).sum();
        }
        Self {
            view_id: view_id.into(),
            projection: p,
            image_size,
        }
    }

    /// Homogeneous projection `P [x y z 1]^T`.
    pub fn project_h(&self, x: [f64; 3]) -> [f64; 3] {
        let p = &self.projection;
        [0, 1, 2].map(|r| p[r][0] * x[0] + p[r][1] * x[1] + p[r][2] * x[2] + p[r][3])
    }

    /// Pixel `(u, v)` of a world point, or `None` when the point is not in front of the camera.
    pub fn project(&self, x: [f64; 3]) -> Option<[f64; 2]> {
        let h = self.project_h(x);
        if h[2] > 0.0 {
            Some([h[0] / h[2], h[1] / h[2]])
        } else {
            None
        }
    }

    /// Normalised image coordinates `(u / W, v / H)`.
    pub fn project_normalized(&self, x: [f64; 3]) -> Option<[f64; 2]> {
        let (h, w) = self.image_size;
        self.project(x).map(|[u, v]| [u / w as f64, v / h as f64])
    }

    /// `A * P` for a 3x3 pixel-space transform `A`.
    pub fn compose_pixel_transform(&self, a: [[f64; 3]; 3]) -> Self {
        let p = &self.projection;
        let mut out = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..4 {
                out[i][j] = (0..3).map(|m| a[i][m] * p[m][j]).sum();
            }
        }
        Self {
            view_id: self.view_id.clone(),
            projection: out,
            image_size: self.image_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_projects_target_to_centre() {
        let cam = CameraModel::look_at("v", [0.0, -5.0, 3.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 200.0, (192, 256));
        cam.validate().unwrap();
        let [u, v] = cam.project([0.0, 0.0, 0.0]).unwrap();
        assert!((u - 128.0).abs() < 1e-9 && (v - 96.0).abs() < 1e-9);
        // World +x appears to the right, world +z appears up (smaller v).
        let [u2, _] = cam.project([0.5, 0.0, 0.0]).unwrap();
        assert!(u2 > 128.0);
        let [_, v2] = cam.project([0.0, 0.0, 0.5]).unwrap();
        assert!(v2 < 96.0);
        assert!(cam.project([0.0, -6.0, 3.0]).is_none());
    }

    #[test]
    fn rank_check() {
        let zero = [[0.0; 4]; 3];
        assert!(CameraModel::new("v", zero, (4, 4)).is_err());
        let mut p = [[0.0; 4]; 3];
        p[0] = [1.0, 0.0, 0.0, 0.0];
        p[1] = [2.0, 0.0, 0.0, 0.0];
        p[2] = [0.0, 0.0, 1.0, 0.0];
        assert!(CameraModel::new("v", p, (4, 4)).is_err());
    }
}
