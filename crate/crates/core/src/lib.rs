pub mod augment;
pub mod eval;
pub mod field;
pub mod guidance;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod train;

pub use field::{Aabb, Checkpoint, GridSpec, ModelKind, VoxelField};
pub use guidance::{GuidanceProvider, ToyProvider};
pub use render::{CameraConfig, CameraPose};
pub use tensor::{Graph, Tensor, Var};
pub use train::{RunConfig, StepMetrics, Trainer};
