use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RenderError;

/// Viewpoint on a sphere around the origin, looking at the origin with +z up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Degrees above the xy-plane.
    pub elevation: f64,
    /// Degrees counter-clockwise from +x.
    pub azimuth: f64,
    pub radius: f64,
    /// Vertical field of view in degrees.
    pub vertical_fov: f64,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub elevation: f64,
    pub radius: f64,
    pub vertical_fov: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            elevation: 30.0,
            radius: 4.0,
            vertical_fov: 30.0,
            height: 224,
            width: 224,
        }
    }
}

impl CameraConfig {
    pub fn pose(&self, azimuth: f64) -> CameraPose {
        CameraPose {
            elevation: self.elevation,
            azimuth,
            radius: self.radius,
            vertical_fov: self.vertical_fov,
            height: self.height,
            width: self.width,
        }
    }

    /// `n` poses with azimuths `0, 360/n, 2*360/n, ...`.
    pub fn turntable(&self, n: usize) -> Vec<CameraPose> {
        (0..n).map(|i| self.pose(360.0 * i as f64 / n as f64)).collect()
    }
}

/// Azimuth uniform in `[0, 360)`, everything else from the config.
pub fn sample_pose(rng: &mut impl Rng, config: &CameraConfig) -> CameraPose {
    config.pose(rng.gen_range(0.0..360.0))
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// A pose resolved into a pinhole camera frame.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub origin: [f64; 3],
    pub forward: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
    pub focal: f64,
    pub height: usize,
    pub width: usize,
}

impl Camera {
    pub fn new(pose: &CameraPose) -> Result<Self, RenderError> {
        if !(pose.radius > 0.0) || !pose.radius.is_finite() {
            return Err(RenderError::Pose(format!("radius {} must be positive", pose.radius)));
        }
        if pose.height == 0 || pose.width == 0 {
            return Err(RenderError::Pose("image size must be non-zero".into()));
        }
        if !(pose.vertical_fov > 0.0 && pose.vertical_fov < 180.0) {
            return Err(RenderError::Pose(format!(
                "vertical fov {} must lie in (0, 180)",
                pose.vertical_fov
            )));
        }
        let (el, az) = (pose.elevation.to_radians(), pose.azimuth.to_radians());
        if el.cos().abs() < 1e-9 {
            return Err(RenderError::Pose("camera directly above or below the origin".into()));
        }
        let origin = [
            pose.radius * el.cos() * az.cos(),
            pose.radius * el.cos() * az.sin(),
            pose.radius * el.sin(),
        ];
        let forward = normalize(sub([0.0; 3], origin));
        let right = normalize(cross(forward, [0.0, 0.0, 1.0]));
        let up = cross(right, forward);
        let focal = 0.5 * pose.height as f64 / (0.5 * pose.vertical_fov.to_radians()).tan();
        Ok(Self {
            origin,
            forward,
            right,
            up,
            focal,
            height: pose.height,
            width: pose.width,
        })
    }

    /// Unit direction through the centre of pixel `(row, col)`.
    pub fn ray_dir(&self, row: usize, col: usize) -> [f64; 3] {
        let x = (col as f64 + 0.5 - 0.5 * self.width as f64) / self.focal;
        let y = (0.5 * self.height as f64 - (row as f64 + 0.5)) / self.focal;
        normalize([0, 1, 2].map(|i| self.forward[i] + x * self.right[i] + y * self.up[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn azimuth_zero_looks_down_minus_x() {
        let pose = CameraConfig {
            elevation: 0.0,
            height: 1,
            width: 1,
            ..Default::default()
        }
        .pose(0.0);
        let cam = Camera::new(&pose).unwrap();
        let d = cam.ray_dir(0, 0);
        assert!((d[0] + 1.0).abs() < 1e-12 && d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
        assert!((cam.origin[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn top_row_points_up() {
        let cam = Camera::new(&CameraConfig::default().pose(90.0)).unwrap();
        let top = cam.ray_dir(0, 112);
        let bottom = cam.ray_dir(223, 112);
        assert!(top[2] > bottom[2]);
    }

    #[test]
    fn degenerate_poses_rejected() {
        let mut pose = CameraConfig::default().pose(0.0);
        pose.radius = 0.0;
        assert!(Camera::new(&pose).is_err());
        pose.radius = 4.0;
        pose.elevation = 90.0;
        assert!(Camera::new(&pose).is_err());
    }
}
