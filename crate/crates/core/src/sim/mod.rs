//! Deterministic 2D contact world with two benchmark families: a rail-locked
//! slide-pull disassembly and an occluded in-box pick.
//!
//! Units are meters and radians, one step is 0.1 s. The gripper is seen from
//! above with its two fingers pointing toward +y; the tactile pad sits on the
//! inner face of the left finger with row 0 at the fingertip.

mod episode;
mod expert;
mod render;
mod world;

pub use episode::{
    gen_dataset, read_dataset, read_dataset_from, run_expert_episode, write_dataset, write_dataset_to, Dataset,
    DatasetHeader, Episode, EpisodeMeta, DATASET_MAGIC, DATASET_VERSION, MAX_ATTEMPTS, STREAMS,
};
pub use expert::{Expert, Phase};
pub use render::{render_views, FRONT_PIXEL, WRIST_PIXEL, WRIST_SPAN};
pub use world::{
    Bowl, BoxGeom, Condition, ContactModel, Disturbance, Event, EventKind, Rail, Rect, SimConfig, World,
};

/// Inner jaw width at aperture 1.
pub const MAX_OPEN: f64 = 0.06;
pub const FINGER_LEN: f64 = 0.04;
pub const FINGER_WIDTH: f64 = 0.008;
pub const PALM_DEPTH: f64 = 0.012;
/// Distance from the palm to the jaw center along the fingers.
pub const JAW_OFFSET: f64 = 0.02;
/// Maximum aperture change per step.
pub const APERTURE_RATE: f64 = 0.35;
pub const OBJECT_HALF: f64 = 0.015;
pub const OBJECT_CORNER: f64 = 0.003;
/// Finger squeeze per side once the grasp latches.
pub const SQUEEZE: f64 = 0.002;
pub const GRASP_APERTURE: f64 = (2.0 * (OBJECT_HALF - SQUEEZE)) / MAX_OPEN;
/// The object must sit within this distance of the jaw center along y to latch.
pub const GRASP_WINDOW: f64 = 0.008;
/// Deepest finger-object interpenetration the kinematics allow without a grasp.
pub const MAX_PENETRATION: f64 = 0.006;
pub const WORKSPACE: f64 = 0.4;
pub const STEP_SECONDS: f64 = 0.1;
pub const STEP_MS: u64 = 100;
pub const DEFAULT_MAX_STEPS: usize = 300;
