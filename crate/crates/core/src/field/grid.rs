use serde::{Deserialize, Serialize};

use super::FieldError;

/// Axis-aligned box in world units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        self.extent().iter().product()
    }

    /// Radius of the smallest origin-centred sphere containing the box.
    pub fn bounding_radius(&self) -> f64 {
        (0..3)
            .map(|i| self.min[i].abs().max(self.max[i].abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains_unit_sphere(&self) -> bool {
        (0..3).all(|i| self.min[i] < -1.0 && self.max[i] > 1.0)
    }

    /// Entry and exit distances of the ray `origin + t * dir`, `t >= 0`
    /// (slab method). `None` when the ray misses or only grazes the box.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (mut t0, mut t1) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
        }
        let t_near = t_near.max(0.0);
        (t_far > t_near).then_some((t_near, t_far))
    }
}

impl Default for Aabb {
    fn default() -> Self {
        Self::cube(1.25)
    }
}

/// Bounds and vertex resolution of the density/color grids.
///
/// `resolution` counts grid vertices per axis; vertex `i` on an axis sits at
/// `min + i * extent / (n - 1)`, so both bounds are sampled exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bounds: Aabb,
    pub resolution: [usize; 3],
    pub target_voxels: usize,
}

impl GridSpec {
    /// Resolution proportional to the box extents, rounded per axis so the
    /// vertex count lands as close to `target_voxels` as rounding allows.
    pub fn for_target(bounds: Aabb, target_voxels: usize) -> Result<Self, FieldError> {
        if target_voxels < 8 {
            return Err(FieldError::InvalidSpec(format!(
                "target voxel count {target_voxels} is below 2x2x2"
            )));
        }
        let edge = (bounds.volume() / target_voxels as f64).cbrt();
        let ext = bounds.extent();
        let resolution = [0, 1, 2].map(|i| ((ext[i] / edge).round() as usize).max(2));
        Self::with_resolution(bounds, resolution, target_voxels)
    }

    pub fn with_resolution(
        bounds: Aabb,
        resolution: [usize; 3],
        target_voxels: usize,
    ) -> Result<Self, FieldError> {
        if !bounds.contains_unit_sphere() {
            return Err(FieldError::InvalidSpec(format!(
                "bounds {bounds:?} must strictly contain the unit sphere"
            )));
        }
        if resolution.iter().any(|&n| n < 2) {
            return Err(FieldError::InvalidSpec(format!(
                "resolution {resolution:?} needs at least 2 vertices per axis"
            )));
        }
        Ok(Self {
            bounds,
            resolution,
            target_voxels,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.resolution.iter().product()
    }

    /// Vertex spacing per axis.
    pub fn voxel_size(&self) -> [f64; 3] {
        let ext = self.bounds.extent();
        [0, 1, 2].map(|i| ext[i] / (self.resolution[i] - 1) as f64)
    }

    pub fn min_voxel_size(&self) -> f64 {
        self.voxel_size().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Default ray-march step: half the smallest voxel edge.
    pub fn default_step(&self) -> f64 {
        0.5 * self.min_voxel_size()
    }

    pub fn grid_shape(&self, channels: usize) -> [usize; 4] {
        [channels, self.resolution[0], self.resolution[1], self.resolution[2]]
    }

    /// Continuous vertex-index coordinates of a world point.
    pub fn world_to_index(&self, p: [f64; 3]) -> [f64; 3] {
        let ext = self.bounds.extent();
        [0, 1, 2].map(|i| {
            (p[i] - self.bounds.min[i]) / ext[i] * (self.resolution[i] - 1) as f64
        })
    }

    pub fn vertex_world(&self, ix: [usize; 3]) -> [f64; 3] {
        let ext = self.bounds.extent();
        [0, 1, 2].map(|i| {
            self.bounds.min[i] + ext[i] * ix[i] as f64 / (self.resolution[i] - 1) as f64
        })
    }

    /// Vertex coordinates normalised to `[-1, 1]` within the bounds.
    pub fn vertex_normalized(&self, ix: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| 2.0 * ix[i] as f64 / (self.resolution[i] - 1) as f64 - 1.0)
    }

    /// All vertices in storage order (x slowest, z fastest).
    pub fn vertices(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, nz] = self.resolution;
        (0..nx).flat_map(move |x| (0..ny).flat_map(move |y| (0..nz).map(move |z| [x, y, z])))
    }

    /// Same bounds at a new voxel budget.
    pub fn rescaled(&self, target_voxels: usize) -> Result<Self, FieldError> {
        Self::for_target(self.bounds, target_voxels)
    }
}
