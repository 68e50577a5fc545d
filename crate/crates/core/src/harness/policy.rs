//! Closed-loop wrapper that lets a trained model drive the simulator.

use crate::error::Result;
use crate::numerics::rng::derive;
use crate::numerics::Checkpoint;
use crate::sim::{Observation, Policy, Scene};
use crate::expert::ActionChunk;

use super::model::VlaModel;

pub struct VlaPolicy {
    model: VlaModel,
    expert: Checkpoint,
    name: String,
    episode_seed: u64,
    calls: u64,
}

impl VlaPolicy {
    pub fn new(model: VlaModel, name: impl Into<String>) -> Result<Self> {
        let expert = model.expert_params()?;
        Ok(VlaPolicy { model, expert, name: name.into(), episode_seed: 0, calls: 0 })
    }

    pub fn model(&self) -> &VlaModel {
        &self.model
    }
}

impl Policy for VlaPolicy {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn begin_episode(&mut self, _scene: &Scene, seed: u64) -> Result<()> {
        self.episode_seed = seed;
        self.calls = 0;
        Ok(())
    }

    fn act(&mut self, obs: &Observation) -> Result<ActionChunk> {
        let feats = self.model.features(&obs.images, 1)?.remove(0);
        let seed = derive(self.episode_seed, "policy", &[self.calls]);
        self.calls += 1;
        self.model.act(&self.expert, &feats, &obs.instruction, &obs.state, seed)
    }
}
