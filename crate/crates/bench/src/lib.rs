//! Fixtures shared by the benchmarks.

use voxclip::augment::AugConfig;
use voxclip::field::{Aabb, ExplicitField, GridSpec};
use voxclip::train::{RunConfig, Window};
use voxclip::{CameraConfig, CameraPose, VoxelField};

/// An explicit `n`-per-side field with a dense ball in the middle.
pub fn ball_field(n: usize) -> VoxelField<f32> {
    let spec = GridSpec::for_target(Aabb::default(), n * n * n).expect("valid target");
    let delta = 0.5 * spec.min_voxel_size();
    let mut f = ExplicitField::new(spec, 1e-3, delta);
    for (k, v) in spec.vertices().enumerate() {
        let p = spec.vertex_world(v);
        let r2 = p.iter().map(|x| x * x).sum::<f64>();
        f.density.data_mut()[k] = if r2 < 0.5 { 4.0 } else { -4.0 };
    }
    VoxelField::Explicit(f)
}

pub fn pose(size: usize) -> CameraPose {
    CameraConfig {
        height: size,
        width: size,
        ..CameraConfig::default()
    }
    .pose(30.0)
}

/// A short toy-guided run at `n`-per-side voxels and `size`-pixel renders.
pub fn toy_config(n: usize, size: usize, augment: AugConfig) -> RunConfig {
    let mut c = RunConfig::preset("224_explicit").expect("built-in preset");
    c.prompt = "a red ball".into();
    c.target_voxels = n * n * n;
    c.camera.height = size;
    c.camera.width = size;
    c.augment = augment;
    c.schedule.total_iters = 1_000_000;
    c.schedule.scaling_milestones.clear();
    c.schedule.tv_window = Window::new(0, 1_000_000);
    c.schedule.kl_window = Window::new(0, 1_000_000);
    c.schedule.ensemble_window = Window::new(0, 1_000_000);
    c
}
