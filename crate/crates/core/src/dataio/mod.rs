//! Dataset generation, storage and the alternative depth-input patterns.

pub mod nuscenes;
pub mod patterns;
pub mod storage;
pub mod synthetic;

pub use patterns::{gt_filter_radar, make_input_pattern, PatternKind, PatternParams};
pub use storage::{load_dataset, read_sample, write_sample, write_synthetic_dataset, Split, SynthConfig};
pub use synthetic::{generate_scene, generate_synthetic_sample, RadarLabel, SceneSpec, SyntheticSample};
