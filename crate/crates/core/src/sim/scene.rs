//! Task definitions and seeded scene layouts.

use std::fmt;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::rng::{stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    /// Centre a cylinder on a ringed target.
    Rings,
    /// Insert a peg into one of three holes.
    PegHole,
    /// Lift the middle of three bottles without touching the others.
    MiddleBottle,
    /// Place a can on a marked shelf slot.
    CanShelf,
    /// Same as `CanShelf` with a transparent bottle.
    GlassShelf,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Rings, Task::PegHole, Task::MiddleBottle, Task::CanShelf, Task::GlassShelf];

    pub fn id(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Task::ALL
            .get((id as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown task {id}; expected 1-5")))
    }

    /// Trials per task in the evaluation protocol.
    pub fn default_trials(self) -> usize {
        [15, 15, 15, 10, 20][self as usize]
    }

    pub fn is_scored(self) -> bool {
        self == Task::Rings
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task{}", self.id())
    }
}

/// Calibration constants. These are chosen so that the scripted expert
/// succeeds and random actions almost never do; they are not measurements.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub ring_radii: [f64; 5],
    pub grasp_radius: f64,
    pub hole_tolerance: f64,
    pub hole_radius: f64,
    pub hole_depth: f64,
    pub max_tilt_deg: f64,
    pub lift_height: f64,
    pub slot_tolerance: f64,
    pub contact_margin: f64,
    pub glare_std: f64,
    pub depth_dropout: f64,
}

pub const CAL: Calibration = Calibration {
    ring_radii: [0.01, 0.02, 0.03, 0.04, 0.05],
    grasp_radius: 0.03,
    hole_tolerance: 0.008,
    hole_radius: 0.011,
    hole_depth: 0.02,
    max_tilt_deg: 10.0,
    lift_height: 0.05,
    slot_tolerance: 0.02,
    contact_margin: 0.006,
    glare_std: 0.1,
    depth_dropout: 0.5,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Cylinder { radius: f64, height: f64 },
    /// Cylinder body with a narrower neck on the top quarter.
    Bottle { radius: f64, height: f64 },
    Box { half: [f64; 3] },
}

impl Shape {
    /// Horizontal footprint radius used for contacts.
    pub fn radius(&self) -> f64 {
        match *self {
            Shape::Cylinder { radius, .. } | Shape::Bottle { radius, .. } => radius,
            Shape::Box { half } => half[0].max(half[1]),
        }
    }

    pub fn height(&self) -> f64 {
        match *self {
            Shape::Cylinder { height, .. } | Shape::Bottle { height, .. } => height,
            Shape::Box { half } => 2.0 * half[2],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub shape: Shape,
    /// Centre of the base.
    pub pos: [f64; 3],
    pub color: [f64; 3],
    pub alpha: f64,
    /// Lying on its side after an unsupported release.
    pub fallen: bool,
    pub movable: bool,
}

impl Object {
    pub fn top(&self) -> f64 {
        if self.fallen {
            self.pos[2] + 2.0 * self.shape.radius()
        } else {
            self.pos[2] + self.shape.height()
        }
    }

    pub fn grasp_point(&self) -> [f64; 3] {
        [self.pos[0], self.pos[1], self.pos[2] + 0.5 * self.shape.height()]
    }

    pub fn tilt_deg(&self) -> f64 {
        if self.fallen {
            90.0
        } else {
            0.0
        }
    }

    /// Axis-aligned footprint `[xmin, xmax, ymin, ymax]` of a box.
    pub fn footprint(&self) -> Option<[f64; 4]> {
        match self.shape {
            Shape::Box { half } => {
                Some([self.pos[0] - half[0], self.pos[0] + half[0], self.pos[1] - half[1], self.pos[1] + half[1]])
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Rings { center: [f64; 2] },
    Hole { board: usize, holes: [[f64; 2]; 3], chosen: usize },
    Lift { middle: usize, neighbors: [usize; 2] },
    Slot { shelf: usize, center: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub task: Task,
    pub objects: Vec<Object>,
    pub target: Target,
    /// Object the instruction refers to.
    pub manipuland: usize,
    pub table: bool,
    pub instruction: String,
    pub noise_seed: u64,
}

impl Scene {
    /// No table, no objects.
    pub fn empty() -> Self {
        Scene {
            task: Task::Rings,
            objects: Vec::new(),
            target: Target::Rings { center: [0.0, 0.0] },
            manipuland: 0,
            table: false,
            instruction: String::new(),
            noise_seed: 0,
        }
    }

    /// True when no two objects overlap and every object rests above the table.
    pub fn is_valid(&self) -> bool {
        for (i, a) in self.objects.iter().enumerate() {
            if a.pos[2] < -1e-12 {
                return false;
            }
            for b in &self.objects[i + 1..] {
                if overlaps(a, b) {
                    return false;
                }
            }
        }
        true
    }
}

/// Conservative overlap test on bounding cylinders.
pub fn overlaps(a: &Object, b: &Object) -> bool {
    let dx = a.pos[0] - b.pos[0];
    let dy = a.pos[1] - b.pos[1];
    let horiz = match (a.footprint(), b.footprint()) {
        (Some(f), None) => inside_rect([b.pos[0], b.pos[1]], f, b.shape.radius()),
        (None, Some(f)) => inside_rect([a.pos[0], a.pos[1]], f, a.shape.radius()),
        _ => (dx * dx + dy * dy).sqrt() < a.shape.radius() + b.shape.radius(),
    };
    horiz && a.pos[2] < b.top() && b.pos[2] < a.top()
}

pub fn inside_rect(p: [f64; 2], r: [f64; 4], margin: f64) -> bool {
    p[0] > r[0] - margin && p[0] < r[1] + margin && p[1] > r[2] - margin && p[1] < r[3] + margin
}

pub const HOLE_NAMES: [&str; 3] = ["left", "middle", "right"];

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn cylinder(radius: f64, height: f64, pos: [f64; 3], color: [f64; 3]) -> Object {
    Object { shape: Shape::Cylinder { radius, height }, pos, color, alpha: 1.0, fallen: false, movable: true }
}

fn fixed_box(half: [f64; 3], pos: [f64; 3], color: [f64; 3]) -> Object {
    Object { shape: Shape::Box { half }, pos, color, alpha: 1.0, fallen: false, movable: false }
}

/// Random resting spot on the left half of the workspace.
fn pick_spot(rng: &mut Rng) -> [f64; 3] {
    [uniform(rng, -0.10, -0.04), uniform(rng, -0.08, 0.08), 0.0]
}

/// Deterministic layout for `(task, seed)`.
pub fn generate_scene(task: Task, seed: u64) -> Scene {
    let mut rng = stream(seed, "scene", &[task.id() as u64]);
    let noise_seed = rng.random::<u64>();
    let (objects, target, manipuland, instruction) = match task {
        Task::Rings => {
            let cyl = cylinder(0.015, 0.04, pick_spot(&mut rng), [0.2, 0.35, 0.9]);
            let center = [uniform(&mut rng, 0.03, 0.09), uniform(&mut rng, -0.08, 0.08)];
            (vec![cyl], Target::Rings { center }, 0, "place the cylinder on the target center".to_string())
        }
        Task::PegHole => {
            let peg = cylinder(0.007, 0.05, pick_spot(&mut rng), [0.9, 0.6, 0.1]);
            let (bx, by) = (uniform(&mut rng, 0.04, 0.08), uniform(&mut rng, -0.03, 0.03));
            let board = fixed_box([0.03, 0.075, 0.015], [bx, by, 0.0], [0.55, 0.35, 0.2]);
            let holes = [[bx, by + 0.045], [bx, by], [bx, by - 0.045]];
            let chosen = rng.random_range(0..3);
            let text = format!("insert the peg into the {} hole", HOLE_NAMES[chosen]);
            (vec![peg, board], Target::Hole { board: 1, holes, chosen }, 0, text)
        }
        Task::MiddleBottle => {
            let (cx, cy) = (uniform(&mut rng, -0.02, 0.06), uniform(&mut rng, -0.04, 0.04));
            let theta = uniform(&mut rng, -0.4, 0.4);
            let (dx, dy) = (0.045 * theta.sin(), 0.045 * theta.cos());
            let shade = uniform(&mut rng, 0.0, 0.15);
            let objects = (-1i32..=1)
                .map(|k| {
                    let pos = [cx + k as f64 * dx, cy + k as f64 * dy, 0.0];
                    Object {
                        shape: Shape::Bottle { radius: 0.015, height: 0.07 },
                        pos,
                        color: [0.15 + shade, 0.65, 0.25 + shade],
                        alpha: 1.0,
                        fallen: false,
                        movable: true,
                    }
                })
                .collect();
            (objects, Target::Lift { middle: 1, neighbors: [0, 2] }, 1, "pick up the middle bottle".to_string())
        }
        Task::CanShelf | Task::GlassShelf => {
            let mut item = if task == Task::CanShelf {
                cylinder(0.018, 0.05, pick_spot(&mut rng), [0.85, 0.15, 0.15])
            } else {
                Object {
                    shape: Shape::Bottle { radius: 0.016, height: 0.07 },
                    pos: pick_spot(&mut rng),
                    color: [0.85, 0.92, 0.95],
                    alpha: 0.3,
                    fallen: false,
                    movable: true,
                }
            };
            item.pos[1] = item.pos[1].clamp(-0.07, 0.07);
            let height = uniform(&mut rng, 0.04, 0.10);
            let (sx, sy) = (uniform(&mut rng, 0.05, 0.08), uniform(&mut rng, -0.02, 0.02));
            let shelf = fixed_box([0.035, 0.085, 0.005], [sx, sy, height - 0.01], [0.6, 0.6, 0.65]);
            let pillar = fixed_box([0.006, 0.006, (height - 0.01) / 2.0], [sx + 0.028, sy, 0.0], [0.45, 0.45, 0.5]);
            let slot = [sx, sy + uniform(&mut rng, -0.05, 0.05), height];
            let text = if task == Task::CanShelf {
                "place the can on the shelf slot"
            } else {
                "place the glass bottle on the shelf slot"
            };
            (vec![item, shelf, pillar], Target::Slot { shelf: 1, center: slot }, 0, text.to_string())
        }
    };
    Scene { task, objects, target, manipuland, table: true, instruction, noise_seed }
}
