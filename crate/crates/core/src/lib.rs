//! Dynamic-object RGB-D visual SLAM: frontend tracking, windowed and global
//! batch optimization, sparse mapping, evaluation metrics and a synthetic
//! scene generator.

pub mod geometry;
pub mod dataio;
pub mod solver;
pub mod frontend;
pub mod backend;
pub mod metrics;
pub mod synth;
pub mod mapping;
pub mod pipeline;

pub use dataio::{DepthMap, FlowField, FrameBundle, MaskGrid, PoseRecord, Settings};
pub use frontend::{FrameState, ObjectState, Tracker};
pub use geometry::{CameraIntrinsics, Pose, Twist};
pub use metrics::MetricsReport;
pub use pipeline::{RunConfig, RunOptions, RunOutput};
pub use solver::{RobustKernel, SolveReport};
pub use synth::{NoiseSpec, SceneSpec};
