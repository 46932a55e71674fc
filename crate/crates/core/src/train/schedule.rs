use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::field::{Aabb, GridSpec};

/// Half-open iteration range `[start, end)`, written `[start, end]` in
/// config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u64; 2]", into = "[u64; 2]")]
pub struct Window {
    pub start: u64,
    pub end: u64,
}

impl Window {
    pub const fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, iteration: u64) -> bool {
        self.start <= iteration && iteration < self.end
    }
}

impl From<[u64; 2]> for Window {
    fn from([start, end]: [u64; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Window> for [u64; 2] {
    fn from(w: Window) -> Self {
        [w.start, w.end]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_sigma: f64,
    pub lambda_tv: f64,
    pub lambda_tr: f64,
    pub lambda_kl: f64,
    pub lambda_clip2: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::explicit()
    }
}

impl LossWeights {
    pub fn explicit() -> Self {
        Self {
            lambda_sigma: 0.01,
            lambda_tv: 0.1,
            lambda_tr: 0.5,
            lambda_kl: 0.05,
            lambda_clip2: 0.0,
            tau: 0.88,
        }
    }

    pub fn implicit() -> Self {
        Self {
            lambda_tv: 0.2,
            lambda_kl: 0.2,
            ..Self::explicit()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let all = [
            ("lambda_sigma", self.lambda_sigma),
            ("lambda_tv", self.lambda_tv),
            ("lambda_tr", self.lambda_tr),
            ("lambda_kl", self.lambda_kl),
            ("lambda_clip2", self.lambda_clip2),
        ];
        if let Some((name, v)) = all.iter().find(|(_, v)| !(*v >= 0.0) || !v.is_finite()) {
            return Err(TrainError::Config(format!("weights.{name} = {v} must be non-negative")));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(TrainError::Config(format!("weights.tau = {} outside (0, 1]", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub total_iters: u64,
    pub tv_window: Window,
    pub kl_window: Window,
    pub ensemble_window: Window,
    /// Iterations at which the voxel count doubles.
    pub scaling_milestones: Vec<u64>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::res224()
    }
}

/// Which gated terms enter the loss at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ActiveTerms {
    pub tv: bool,
    pub kl: bool,
    pub ensemble: bool,
}

impl TrainSchedule {
    pub fn res168() -> Self {
        Self {
            total_iters: 10_000,
            tv_window: Window::new(4000, 9000),
            kl_window: Window::new(0, 7000),
            ensemble_window: Window::new(4000, 10_000),
            scaling_milestones: vec![4000, 6000, 8000],
        }
    }

    pub fn res224() -> Self {
        Self {
            total_iters: 15_000,
            tv_window: Window::new(5000, 13_000),
            kl_window: Window::new(0, 8000),
            ensemble_window: Window::new(5000, 15_000),
            scaling_milestones: vec![5000, 7000, 9000, 11_000],
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, w) in [
            ("tv_window", self.tv_window),
            ("kl_window", self.kl_window),
            ("ensemble_window", self.ensemble_window),
        ] {
            if w.start > w.end || w.end > self.total_iters {
                return Err(TrainError::Config(format!(
                    "schedule.{name} [{}, {}] must lie within [0, {}]",
                    w.start, w.end, self.total_iters
                )));
            }
        }
        if self.scaling_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TrainError::Config("schedule.scaling_milestones must be strictly increasing".into()));
        }
        if self.scaling_milestones.iter().any(|&m| m == 0 || m >= self.total_iters.max(1)) {
            return Err(TrainError::Config(format!(
                "schedule.scaling_milestones must lie in (0, {})",
                self.total_iters
            )));
        }
        Ok(())
    }

    pub fn active(&self, iteration: u64) -> ActiveTerms {
        ActiveTerms {
            tv: self.tv_window.contains(iteration),
            kl: self.kl_window.contains(iteration),
            ensemble: self.ensemble_window.contains(iteration),
        }
    }

    /// Voxel budget in effect at `iteration`: `floor(final / 2^k)` doubled at
    /// each milestone passed, landing on `final` after the last one.
    pub fn target_voxels(&self, final_target: usize, iteration: u64) -> usize {
        let k = self.scaling_milestones.len();
        let passed = self.scaling_milestones.iter().filter(|&&m| m <= iteration).count();
        if passed == k {
            final_target
        } else {
            (final_target >> k) << passed
        }
    }

    /// Grid resolution at every iteration where it changes, starting at 0.
    pub fn dry_run(&self, bounds: Aabb, final_target: usize) -> Result<Vec<ScaleStage>, TrainError> {
        let mut stages: Vec<ScaleStage> = Vec::new();
        for it in std::iter::once(0).chain(self.scaling_milestones.iter().copied()) {
            let target = self.target_voxels(final_target, it);
            let spec = GridSpec::for_target(bounds, target)?;
            stages.push(ScaleStage {
                iteration: it,
                target_voxels: target,
                resolution: spec.resolution,
            });
        }
        Ok(stages)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScaleStage {
    pub iteration: u64,
    pub target_voxels: usize,
    pub resolution: [usize; 3],
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_are_half_open() {
        let w = Window::new(5000, 13000);
        assert!(!w.contains(4999));
        assert!(w.contains(5000));
        assert!(w.contains(12999));
        assert!(!w.contains(13000));
    }

    #[test]
    fn voxel_budget_doubles_from_floor() {
        let s = TrainSchedule::res224();
        let t = 160 * 160 * 160;
        assert_eq!(s.target_voxels(t, 0), 256_000);
        assert_eq!(s.target_voxels(t, 4999), 256_000);
        assert_eq!(s.target_voxels(t, 5000), 512_000);
        assert_eq!(s.target_voxels(t, 9000), 2_048_000);
        assert_eq!(s.target_voxels(t, 14_999), t);
        // 140^3 / 8 is exact as well
        assert_eq!(TrainSchedule::res168().target_voxels(140 * 140 * 140, 0), 343_000);
    }

    #[test]
    fn invalid_schedules() {
        let mut s = TrainSchedule::res224();
        s.scaling_milestones = vec![7000, 5000];
        assert!(s.validate().is_err());
        let mut s = TrainSchedule::res224();
        s.tv_window = Window::new(0, 20_000);
        assert!(s.validate().is_err());
    }

    #[test]
    fn window_serializes_as_pair() {
        let j = serde_json::to_string(&Window::new(1, 2)).unwrap();
        assert_eq!(j, "[1,2]");
    }
}
