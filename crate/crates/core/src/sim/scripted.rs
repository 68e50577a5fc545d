//! Waypoint demonstrator: approach, descend, grasp, lift, carry, lower, release.

use super::scene::{Scene, Target, Task};
use super::trials::{run_episode, Policy};
use super::world::{score, Episode, Observation};
use super::WORKSPACE;
use crate::error::{Error, Result};
use crate::expert::ActionChunk;
use crate::numerics::rng::{derive, normal, stream};

/// Largest per-axis move the demonstrator makes in one step.
pub const EXPERT_STEP: f64 = 0.02;
pub const DEMO_JITTER: f64 = 0.005;
pub const MAX_RESAMPLES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Waypoint {
    pos: [f64; 3],
    /// Gripper command applied after arriving.
    grip: f64,
}

pub struct ScriptedExpert {
    jitter: f64,
    horizon: usize,
    plan: Vec<Waypoint>,
    next: usize,
    grip: f64,
}

impl ScriptedExpert {
    pub fn new(jitter: f64, horizon: usize) -> Self {
        ScriptedExpert { jitter, horizon, plan: Vec::new(), next: 0, grip: 1.0 }
    }

    /// Noise-free demonstrator used as an upper bound.
    pub fn oracle(horizon: usize) -> Self {
        Self::new(0.0, horizon)
    }
}

fn clamp_ws(p: [f64; 3]) -> [f64; 3] {
    [
        p[0].clamp(WORKSPACE[0][0], WORKSPACE[0][1]),
        p[1].clamp(WORKSPACE[1][0], WORKSPACE[1][1]),
        p[2].clamp(WORKSPACE[2][0], WORKSPACE[2][1]),
    ]
}

/// Base height clearance while carrying and when releasing.
const CARRY_CLEARANCE: f64 = 0.03;
const RELEASE_CLEARANCE: f64 = 0.015;
const APPROACH: f64 = 0.08;

fn plan(scene: &Scene, jitter: &mut dyn FnMut() -> [f64; 3]) -> Vec<Waypoint> {
    let m = &scene.objects[scene.manipuland];
    let g = m.grasp_point();
    let mut wps = Vec::new();
    let mut push = |p: [f64; 3], grip: f64, wps: &mut Vec<Waypoint>| {
        let j = jitter();
        wps.push(Waypoint { pos: clamp_ws([p[0] + j[0], p[1] + j[1], p[2] + j[2]]), grip });
    };
    push([g[0], g[1], g[2] + APPROACH], 1.0, &mut wps);
    push(g, 0.0, &mut wps);
    let grasp = wps[1].pos;
    let offset = [grasp[0] - m.pos[0], grasp[1] - m.pos[1], grasp[2] - m.pos[2]];
    let (place, support, obstacle) = match &scene.target {
        Target::Lift { .. } => {
            push([grasp[0], grasp[1], grasp[2] + APPROACH], 0.0, &mut wps);
            return wps;
        }
        Target::Rings { center } => ([center[0], center[1]], 0.0, 0.0),
        Target::Hole { board, holes, chosen } => {
            let top = scene.objects[*board].top();
            (holes[*chosen], top, top)
        }
        Target::Slot { shelf, center } => {
            let top = scene.objects[*shelf].top();
            ([center[0], center[1]], top, top)
        }
    };
    let carry = obstacle + CARRY_CLEARANCE + offset[2];
    let release = support + RELEASE_CLEARANCE + offset[2];
    push([grasp[0], grasp[1], carry], 0.0, &mut wps);
    push([place[0] + offset[0], place[1] + offset[1], carry], 0.0, &mut wps);
    push([place[0] + offset[0], place[1] + offset[1], release], 1.0, &mut wps);
    let last = wps[wps.len() - 1].pos;
    push([last[0], last[1], last[2] + 0.06], 1.0, &mut wps);
    wps
}

impl Policy for ScriptedExpert {
    fn name(&self) -> String {
        if self.jitter == 0.0 {
            "oracle".into()
        } else {
            "scripted".into()
        }
    }

    fn begin_episode(&mut self, scene: &Scene, seed: u64) -> Result<()> {
        let mut rng = stream(seed, "expert-jitter", &[]);
        let s = self.jitter;
        let mut jitter = || {
            if s == 0.0 {
                [0.0; 3]
            } else {
                [s * normal(&mut rng), s * normal(&mut rng), s * normal(&mut rng)]
            }
        };
        self.plan = plan(scene, &mut jitter);
        self.next = 0;
        self.grip = 1.0;
        Ok(())
    }

    fn act(&mut self, obs: &Observation) -> Result<ActionChunk> {
        let mut pos = obs.state.position;
        let mut rows = Vec::with_capacity(self.horizon);
        while rows.len() < self.horizon {
            let Some(wp) = self.plan.get(self.next).copied() else {
                rows.push([0.0, 0.0, 0.0, self.grip]);
                continue;
            };
            let delta: Vec<f64> = (0..3).map(|k| (wp.pos[k] - pos[k]).clamp(-EXPERT_STEP, EXPERT_STEP)).collect();
            if delta.iter().all(|d| d.abs() < 1e-12) {
                self.next += 1;
                if wp.grip != self.grip {
                    self.grip = wp.grip;
                    rows.push([0.0, 0.0, 0.0, self.grip]);
                }
                continue;
            }
            for k in 0..3 {
                pos[k] += delta[k];
            }
            rows.push([delta[0], delta[1], delta[2], self.grip]);
        }
        ActionChunk::from_rows(&rows)
    }
}

/// Minimum acceptable score for a stored demonstration.
pub fn demo_threshold(task: Task) -> u8 {
    if task == Task::Rings {
        4
    } else {
        1
    }
}

/// Demonstration `index` of `task` under `seed`. Scenes the jittered expert
/// fails on are re-drawn up to [`MAX_RESAMPLES`] times.
pub fn generate_demo(task: Task, seed: u64, index: usize, horizon: usize) -> Result<Episode> {
    let mut expert = ScriptedExpert::new(DEMO_JITTER, horizon);
    for attempt in 0..MAX_RESAMPLES {
        let parts = [task.id() as u64, index as u64, attempt as u64];
        let ep = run_episode(&mut expert, task, derive(seed, "demo-scene", &parts), derive(seed, "demo-episode", &parts))?;
        if score(&ep)? >= demo_threshold(task) {
            return Ok(ep);
        }
    }
    Err(Error::Generation(format!("{task} demo {index}: expert failed on {MAX_RESAMPLES} scenes")))
}
