//! Demonstration datasets: one manifest + blob pair per episode.
//!
//! Only the scene seed, robot states and actions are stored; observations are
//! re-rendered by replaying the actions, which is exact because the world is
//! deterministic.

use std::fs;
use std::path::{Path, PathBuf};

use super::scene::{generate_scene, Scene, Task};
use super::world::{score, Episode, World};
use crate::backbone::RobotState;
use crate::error::{Error, Result};
use crate::expert::ActionChunk;
use crate::numerics::{Bundle, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Demo {
    pub task: Task,
    pub scene_seed: u64,
    pub score: u8,
    pub states: Vec<RobotState>,
    pub actions: Vec<[f64; 4]>,
}

impl Demo {
    pub fn from_episode(ep: &Episode) -> Result<Self> {
        Ok(Demo {
            task: ep.task,
            scene_seed: ep.scene_seed,
            score: score(ep)?,
            states: ep.steps.iter().map(|s| s.state).collect(),
            actions: ep.steps.iter().map(|s| s.action).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn scene(&self) -> Scene {
        generate_scene(self.task, self.scene_seed)
    }

    /// Actions `t..t+horizon`; past the end the arm holds still with its last
    /// gripper command.
    pub fn chunk(&self, t: usize, horizon: usize) -> Result<ActionChunk> {
        let hold = self.actions.last().map_or(1.0, |a| a[3]);
        let rows: Vec<[f64; 4]> =
            (t..t + horizon).map(|i| self.actions.get(i).copied().unwrap_or([0.0, 0.0, 0.0, hold])).collect();
        ActionChunk::from_rows(&rows)
    }

    /// Steps a fresh world through the recorded actions, calling `visit`
    /// before each step. Fails if the world diverges from the recording.
    pub fn replay(&self, mut visit: impl FnMut(usize, &World) -> Result<()>) -> Result<World> {
        let mut w = World::new(self.scene());
        for (t, (state, action)) in self.states.iter().zip(&self.actions).enumerate() {
            if w.gripper.robot_state() != *state {
                return Err(Error::Format(format!("{} demo diverges from its recording at step {t}", self.task)));
            }
            visit(t, &w)?;
            w.step(action)?;
        }
        Ok(w)
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut b = Bundle::new();
        b.set_meta("task", self.task.id());
        b.set_meta("scene_seed", self.scene_seed);
        b.set_meta("score", self.score);
        b.set_meta("steps", self.len());
        if !self.is_empty() {
            let states = self.states.iter().flat_map(|s| s.to_vec()).collect();
            let actions = self.actions.iter().flatten().copied().collect();
            b.insert("states", Tensor::new(&[self.len(), 4], states)?, false)?;
            b.insert("actions", Tensor::new(&[self.len(), 4], actions)?, false)?;
        }
        Ok(b)
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let meta = |k: &str| -> Result<u64> {
            b.meta(k)
                .ok_or_else(|| Error::Format(format!("demo is missing `{k}`")))?
                .parse()
                .map_err(|_| Error::Format(format!("demo field `{k}` is not an integer")))
        };
        let task = Task::from_id(meta("task")? as u8)?;
        let steps = meta("steps")? as usize;
        let (mut states, mut actions) = (Vec::new(), Vec::new());
        if steps > 0 {
            let s = b.get("states")?;
            let a = b.get("actions")?;
            if s.shape() != [steps, 4] || a.shape() != [steps, 4] {
                return Err(Error::Format(format!("demo arrays do not hold {steps} steps")));
            }
            for r in s.data().chunks(4) {
                states.push(RobotState { position: [r[0], r[1], r[2]], aperture: r[3] });
            }
            for r in a.data().chunks(4) {
                actions.push([r[0], r[1], r[2], r[3]]);
            }
        }
        Ok(Demo { task, scene_seed: meta("scene_seed")?, score: meta("score")? as u8, states, actions })
    }
}

pub fn demo_stem(dir: &Path, task: Task, index: usize) -> PathBuf {
    dir.join(format!("{task}_{index:04}"))
}

pub fn save_demo(dir: &Path, index: usize, demo: &Demo) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let stem = demo_stem(dir, demo.task, index);
    demo.to_bundle()?.save(&stem)?;
    Ok(stem)
}

pub fn load_demo(stem: &Path) -> Result<Demo> {
    Demo::from_bundle(&Bundle::load(stem)?)
}

/// Every demo under `dir`, ordered by file name.
pub fn load_demos(dir: &Path) -> Result<Vec<Demo>> {
    let mut stems: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read demo directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "manifest"))
        .map(|p| p.with_extension(""))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Config(format!("no demonstrations found in {}", dir.display())));
    }
    stems.iter().map(|s| load_demo(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scripted::generate_demo;

    #[test]
    fn round_trip_and_replay() {
        let ep = generate_demo(Task::CanShelf, 4, 2, 8).unwrap();
        let demo = Demo::from_episode(&ep).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = save_demo(dir.path(), 2, &demo).unwrap();
        let back = load_demo(&stem).unwrap();
        assert_eq!(back, demo);
        let mut visits = 0;
        let end = back.replay(|_, _| {
            visits += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(visits, demo.len());
        assert_eq!(end, ep.world);
        let c = back.chunk(demo.len() - 2, 8).unwrap();
        assert_eq!(c.row(7), &[0.0, 0.0, 0.0, demo.actions.last().unwrap()[3]]);
        assert_eq!(load_demos(dir.path()).unwrap(), vec![demo]);
    }

    #[test]
    fn empty_directory_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_demos(dir.path()), Err(Error::Config(_))));
    }
}
