//! Policies, rollouts and the evaluation protocol.

use rand::Rng as _;

use super::scene::{generate_scene, Scene, Task};
use super::world::{score, Episode, Observation, StepRecord, World};
use crate::error::Result;
use crate::expert::{ActionChunk, MAX_DELTA};
use crate::numerics::rng::{derive, stream, Rng};

/// Closed-loop controller emitting one action chunk per observation.
pub trait Policy {
    fn name(&self) -> String;

    /// Called once per episode before the first observation.
    fn begin_episode(&mut self, scene: &Scene, seed: u64) -> Result<()>;

    fn act(&mut self, obs: &Observation) -> Result<ActionChunk>;
}

/// Rolls out `policy` on the scene generated from `(task, scene_seed)` until
/// the episode terminates, executing every chunk open loop.
pub fn run_episode(policy: &mut dyn Policy, task: Task, scene_seed: u64, episode_seed: u64) -> Result<Episode> {
    let scene = generate_scene(task, scene_seed);
    let mut world = World::new(scene.clone());
    policy.begin_episode(&scene, episode_seed)?;
    let mut steps = Vec::new();
    while !world.terminated() {
        let obs = world.observe(false)?;
        let chunk = policy.act(&obs)?;
        for i in 0..chunk.horizon() {
            let row = chunk.row(i);
            steps.push(StepRecord { state: world.gripper.robot_state(), action: [row[0], row[1], row[2], row[3]] });
            world.step(row)?;
            if world.terminated() {
                break;
            }
        }
    }
    Ok(Episode { task, scene_seed, initial: scene, steps, world })
}

/// Outcome of one task's trials.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialReport {
    pub task: Task,
    pub scores: Vec<u8>,
}

impl TrialReport {
    pub fn trials(&self) -> usize {
        self.scores.len()
    }

    /// Percent: mean ring score over 5 for task 1, success rate otherwise.
    pub fn rate(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        let full = if self.task.is_scored() { 5.0 } else { 1.0 };
        100.0 * self.scores.iter().map(|&s| s as f64).sum::<f64>() / (full * self.scores.len() as f64)
    }

    pub fn mean_score(&self) -> f64 {
        self.scores.iter().map(|&s| s as f64).sum::<f64>() / self.scores.len().max(1) as f64
    }

    /// Trials counted as successes; task 1 needs a ring score of at least `min_ring`.
    pub fn successes(&self, min_ring: u8) -> usize {
        let min = if self.task.is_scored() { min_ring } else { 1 };
        self.scores.iter().filter(|&&s| s >= min).count()
    }
}

/// Seeds of evaluation trial `i`; identical for every policy compared under `seed`.
pub fn trial_seeds(task: Task, seed: u64, i: usize) -> (u64, u64) {
    (derive(seed, "eval-scene", &[task.id() as u64, i as u64]), derive(seed, "eval-episode", &[task.id() as u64, i as u64]))
}

pub fn run_trials(policy: &mut dyn Policy, task: Task, n_trials: usize, seed: u64) -> Result<TrialReport> {
    let mut scores = Vec::with_capacity(n_trials);
    for i in 0..n_trials {
        let (scene_seed, episode_seed) = trial_seeds(task, seed, i);
        let ep = run_episode(policy, task, scene_seed, episode_seed)?;
        scores.push(score(&ep)?);
    }
    Ok(TrialReport { task, scores })
}

/// Uniform random actions over the full action bounds.
pub struct RandomPolicy {
    rng: Rng,
    horizon: usize,
}

impl RandomPolicy {
    pub fn new(horizon: usize) -> Self {
        RandomPolicy { rng: stream(0, "random-policy", &[]), horizon }
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn begin_episode(&mut self, _scene: &Scene, seed: u64) -> Result<()> {
        self.rng = stream(seed, "random-policy", &[]);
        Ok(())
    }

    fn act(&mut self, _obs: &Observation) -> Result<ActionChunk> {
        let rows: Vec<[f64; 4]> = (0..self.horizon)
            .map(|_| {
                let mut r = [0.0; 4];
                for v in r.iter_mut().take(3) {
                    *v = self.rng.random_range(-MAX_DELTA..=MAX_DELTA);
                }
                r[3] = self.rng.random::<f64>();
                r
            })
            .collect();
        ActionChunk::from_rows(&rows)
    }
}
