//! Kinematic stepping, grasping, contacts and task scoring.

use std::collections::BTreeSet;

use super::render::{render, Camera, Frame};
use super::scene::{inside_rect, Scene, Target, Task, CAL};
use super::{IMAGE, MAX_STEPS, WORKSPACE};
use crate::backbone::{InstructionTokens, RobotState};
use crate::error::{Error, Result};
use crate::expert::MAX_DELTA;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GripperState {
    pub position: [f64; 3],
    pub aperture: f64,
    pub held: Option<usize>,
    /// Gripper position minus held object base at grasp time.
    pub offset: [f64; 3],
}

impl GripperState {
    pub fn start() -> Self {
        GripperState { position: [-0.02, 0.0, 0.18], aperture: 1.0, held: None, offset: [0.0; 3] }
    }

    pub fn robot_state(&self) -> RobotState {
        RobotState { position: self.position, aperture: self.aperture }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Running,
    Success,
    Failure,
}

/// Multi-view observation handed to a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `V × H × W × 3`
    pub images: Tensor,
    pub state: RobotState,
    pub instruction: InstructionTokens,
    pub frames: Option<Vec<Frame>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub scene: Scene,
    pub gripper: GripperState,
    /// Objects touched by the gripper or by a carried object.
    pub contacts: BTreeSet<usize>,
    pub grasped: BTreeSet<usize>,
    pub released: bool,
    pub inserted: Option<usize>,
    pub steps: usize,
    pub status: Status,
}

impl World {
    pub fn new(scene: Scene) -> Self {
        World {
            scene,
            gripper: GripperState::start(),
            contacts: BTreeSet::new(),
            grasped: BTreeSet::new(),
            released: false,
            inserted: None,
            steps: 0,
            status: Status::Running,
        }
    }

    pub fn terminated(&self) -> bool {
        self.status != Status::Running || self.steps >= MAX_STEPS
    }

    /// Applies one action row `[dx, dy, dz, gripper]`.
    pub fn step(&mut self, action: &[f64]) -> Result<()> {
        if action.len() != 4 {
            return Err(Error::Shape(format!("action row has {} values, expected 4", action.len())));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite action {action:?}")));
        }
        let was_open = self.gripper.aperture >= 0.5;
        for k in 0..3 {
            let p = self.gripper.position[k] + action[k].clamp(-MAX_DELTA, MAX_DELTA);
            self.gripper.position[k] = p.clamp(WORKSPACE[k][0], WORKSPACE[k][1]);
        }
        self.gripper.aperture = action[3].clamp(0.0, 1.0);
        let open = self.gripper.aperture >= 0.5;
        if let Some(h) = self.gripper.held {
            let o = &mut self.scene.objects[h];
            for k in 0..3 {
                o.pos[k] = self.gripper.position[k] - self.gripper.offset[k];
            }
            o.pos[2] = o.pos[2].max(0.0);
        }
        if was_open && !open && self.gripper.held.is_none() {
            self.try_grasp();
        } else if !was_open && open {
            if let Some(h) = self.gripper.held.take() {
                self.drop_object(h);
                self.released = true;
            }
        }
        self.detect_contacts();
        self.steps += 1;
        self.status = self.evaluate();
        Ok(())
    }

    fn try_grasp(&mut self) {
        let p = self.gripper.position;
        let best = self
            .scene
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.movable && !o.fallen)
            .map(|(i, o)| (i, dist3(p, o.grasp_point())))
            .filter(|&(_, d)| d <= CAL.grasp_radius)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = best {
            let o = &self.scene.objects[i];
            self.gripper.held = Some(i);
            self.gripper.offset = [p[0] - o.pos[0], p[1] - o.pos[1], p[2] - o.pos[2]];
            self.grasped.insert(i);
            if self.inserted == Some(i) {
                self.inserted = None;
            }
        }
    }

    /// Lets object `i` fall straight down onto the highest support under its centre.
    fn drop_object(&mut self, i: usize) {
        let (x, y, base) = {
            let o = &self.scene.objects[i];
            (o.pos[0], o.pos[1], o.pos[2])
        };
        let mut support = 0.0;
        let mut on = None;
        for (j, s) in self.scene.objects.iter().enumerate() {
            if let Some(f) = s.footprint() {
                if j != i && inside_rect([x, y], f, 0.0) && s.top() <= base + 1e-9 && s.top() > support {
                    support = s.top();
                    on = Some(j);
                }
            }
        }
        let o = &mut self.scene.objects[i];
        o.pos[2] = support;
        if let (Target::Hole { board, holes, .. }, Some(j)) = (&self.scene.target, on) {
            if *board == j {
                match holes.iter().position(|h| dist2([x, y], *h) <= CAL.hole_tolerance) {
                    Some(k) => {
                        o.pos[2] = support - CAL.hole_depth;
                        self.inserted = Some(k);
                    }
                    None => o.fallen = true,
                }
            }
        }
    }

    fn detect_contacts(&mut self) {
        let p = self.gripper.position;
        let held = self.gripper.held;
        for (j, o) in self.scene.objects.iter().enumerate() {
            if Some(j) == held {
                continue;
            }
            let touch_gripper = match o.footprint() {
                Some(f) => inside_rect([p[0], p[1]], f, CAL.contact_margin) && p[2] >= o.pos[2] && p[2] <= o.top() + CAL.contact_margin,
                None => {
                    o.movable
                        && !o.fallen
                        && dist2([p[0], p[1]], [o.pos[0], o.pos[1]]) < o.shape.radius() + CAL.contact_margin
                        && p[2] >= o.pos[2]
                        && p[2] <= o.top() + CAL.contact_margin
                }
            };
            let touch_held = held.is_some_and(|h| super::scene::overlaps(&self.scene.objects[h], o));
            if touch_gripper || touch_held {
                self.contacts.insert(j);
            }
        }
    }

    fn evaluate(&self) -> Status {
        let m = &self.scene.objects[self.scene.manipuland];
        let held = self.gripper.held == Some(self.scene.manipuland);
        match &self.scene.target {
            Target::Rings { .. } => {
                if self.released && !held {
                    Status::Success
                } else {
                    Status::Running
                }
            }
            Target::Hole { chosen, .. } => match self.inserted {
                Some(k) if k == *chosen && !held => Status::Success,
                Some(_) if !held => Status::Failure,
                _ if m.fallen => Status::Failure,
                _ => Status::Running,
            },
            Target::Lift { middle, neighbors } => {
                if neighbors.iter().any(|n| self.contacts.contains(n)) {
                    Status::Failure
                } else if held && self.gripper.held == Some(*middle) && m.pos[2] >= CAL.lift_height {
                    Status::Success
                } else {
                    Status::Running
                }
            }
            Target::Slot { center, .. } => {
                if !held && !m.fallen && (m.pos[2] - center[2]).abs() < 1e-9 && dist2([m.pos[0], m.pos[1]], [center[0], center[1]]) <= CAL.slot_tolerance {
                    Status::Success
                } else {
                    Status::Running
                }
            }
        }
    }

    /// Renders both views from the current state; `with_frames` keeps the
    /// depth and pointmap alongside the images.
    pub fn observe(&self, with_frames: bool) -> Result<Observation> {
        let cams = Camera::rig(IMAGE);
        let frames: Vec<Frame> = cams
            .iter()
            .enumerate()
            .map(|(v, c)| render(&self.scene, Some(&self.gripper), c, v as u64, self.steps as u64))
            .collect();
        let mut data = Vec::with_capacity(frames.len() * IMAGE * IMAGE * 3);
        for f in &frames {
            data.extend_from_slice(f.image.data());
        }
        Ok(Observation {
            images: Tensor::new(&[frames.len(), IMAGE, IMAGE, 3], data)?,
            state: self.gripper.robot_state(),
            instruction: InstructionTokens::from_text(&self.scene.instruction, 8)?,
            frames: with_frames.then_some(frames),
        })
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Ring score for a placement `distance` from the target centre: 5 inside the
/// innermost ring down to 1 inside the outermost, 0 beyond.
pub fn ring_score(distance: f64) -> u8 {
    match CAL.ring_radii.iter().position(|&r| distance <= r) {
        Some(i) => 5 - i as u8,
        None => 0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub state: RobotState,
    pub action: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: Task,
    pub scene_seed: u64,
    pub initial: Scene,
    pub steps: Vec<StepRecord>,
    pub world: World,
}

impl Episode {
    pub fn terminated(&self) -> bool {
        self.world.terminated()
    }
}

/// Task 1 ring score, or 1/0 completion for the other tasks.
pub fn score(ep: &Episode) -> Result<u8> {
    if !ep.terminated() {
        return Err(Error::Protocol(format!("episode of {} stopped after {} steps without terminating", ep.task, ep.world.steps)));
    }
    let w = &ep.world;
    match &w.scene.target {
        Target::Rings { center } => {
            let m = w.scene.manipuland;
            if !w.grasped.contains(&m) || w.gripper.held == Some(m) || !w.released {
                return Ok(0);
            }
            let o = &w.scene.objects[m];
            Ok(ring_score(dist2([o.pos[0], o.pos[1]], *center)))
        }
        _ => Ok(u8::from(w.status == Status::Success)),
    }
}
