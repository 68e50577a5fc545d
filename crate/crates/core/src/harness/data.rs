//! Training examples built by replaying demonstrations through the world and
//! caching the frozen encoders' outputs.

use crate::backbone::{InstructionTokens, RobotState};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sim::{Demo, Task};

use super::model::{Example, Features, VlaModel};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub task: Task,
    pub features: Features,
    pub instruction: InstructionTokens,
    pub state: RobotState,
    /// `H × 4` demonstrated actions from this step on.
    pub target: Tensor,
}

impl Sample {
    pub fn example(&self) -> Example<'_> {
        Example { features: &self.features, instruction: &self.instruction, state: &self.state, target: &self.target }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One sample per demonstrated step of every demo whose task is in `tasks`.
pub fn build_dataset(model: &VlaModel, demos: &[Demo], tasks: &[Task]) -> Result<Dataset> {
    let horizon = model.cfg.expert.horizon;
    let mut samples = Vec::new();
    for task in tasks {
        if !demos.iter().any(|d| d.task == *task) {
            return Err(Error::Config(format!("no demonstrations for {task}")));
        }
    }
    for demo in demos.iter().filter(|d| tasks.contains(&d.task)) {
        let mut images = Vec::new();
        let mut instruction = None;
        demo.replay(|_, w| {
            let obs = w.observe(false)?;
            images.extend_from_slice(obs.images.data());
            instruction.get_or_insert(obs.instruction);
            Ok(())
        })?;
        let Some(instruction) = instruction else { continue };
        let n = demo.len();
        let per = images.len() / n;
        let side = ((per / (3 * model.cfg.backbone.views)) as f64).sqrt() as usize;
        let images = Tensor::new(&[n * model.cfg.backbone.views, side, side, 3], images)?;
        let feats = model.features(&images, n)?;
        for (t, features) in feats.into_iter().enumerate() {
            samples.push(Sample {
                task: demo.task,
                features,
                instruction: instruction.clone(),
                state: demo.states[t],
                target: demo.chunk(t, horizon)?.tensor().clone(),
            });
        }
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{ModelConfig, Variant};
    use crate::sim::generate_demo;

    #[test]
    fn one_sample_per_step() {
        let demo = Demo::from_episode(&generate_demo(Task::Rings, 2, 0, 8).unwrap()).unwrap();
        let model = VlaModel::init(&ModelConfig::default(), Variant::Baseline, 0, None).unwrap();
        let ds = build_dataset(&model, std::slice::from_ref(&demo), &[Task::Rings]).unwrap();
        assert_eq!(ds.len(), demo.len());
        assert_eq!(ds.samples[0].target, *demo.chunk(0, 8).unwrap().tensor());
        assert_eq!(ds.samples[3].state, demo.states[3]);
        assert_eq!(ds.samples[0].features.t2d.shape(), &[32, 64]);
        assert!(ds.samples[0].features.t3d.is_none());
        assert!(matches!(build_dataset(&model, &[demo], &[Task::PegHole]), Err(Error::Config(_))));
    }
}
