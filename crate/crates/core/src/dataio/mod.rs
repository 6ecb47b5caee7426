//! Scene directories, file codecs and the synthetic scene generator.

pub mod formats;
pub mod scene;
pub mod synth;

pub use formats::{Image, PointCloud};
pub use scene::{lint_scene, load_scene, save_scene, Frame, LintReport, SceneBundle};
pub use synth::{synth_scene, write_synth_scene, SynthSpec};
