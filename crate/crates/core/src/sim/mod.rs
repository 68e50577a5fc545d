//! Kinematic tabletop with a point gripper, five manipulation tasks, a
//! small ray-cast renderer and scripted demonstrators.

pub mod demos;
pub mod render;
pub mod scene;
pub mod scripted;
pub mod trials;
pub mod world;

pub use demos::{load_demo, load_demos, save_demo, Demo};
pub use render::{patch_targets, render, Camera, Frame, FAR};
pub use scene::{generate_scene, Calibration, Object, Scene, Shape, Target, Task, CAL};
pub use scripted::{generate_demo, ScriptedExpert};
pub use trials::{run_episode, run_trials, Policy, RandomPolicy, TrialReport};
pub use world::{score, ring_score, Episode, GripperState, Observation, Status, StepRecord, World};

/// Axis-aligned bounds the gripper is confined to.
pub const WORKSPACE: [[f64; 2]; 3] = [[-0.15, 0.15], [-0.15, 0.15], [0.0, 0.25]];

pub const MAX_STEPS: usize = 200;

pub const IMAGE: usize = 32;

pub const VIEWS: usize = 2;
