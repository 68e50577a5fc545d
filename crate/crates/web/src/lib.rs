//! wasm-bindgen surface for `www/index.html`.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js(e: geovla::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Snapshot(demo::Snapshot);

#[wasm_bindgen]
impl Snapshot {
    pub fn size(&self) -> usize {
        self.0.size
    }
    pub fn views(&self) -> usize {
        self.0.rgb.len()
    }
    pub fn rgb(&self, view: usize) -> Vec<u8> {
        self.0.rgb[view].clone()
    }
    pub fn depth(&self, view: usize) -> Vec<u8> {
        self.0.depth[view].clone()
    }
    pub fn step(&self) -> usize {
        self.0.step
    }
    pub fn total_steps(&self) -> usize {
        self.0.total_steps
    }
    pub fn score(&self) -> u8 {
        self.0.score
    }
    pub fn instruction(&self) -> String {
        self.0.instruction.clone()
    }
}

/// Scripted rollout of `task` (1-5) paused after `step` actions.
#[wasm_bindgen]
pub fn snapshot(task: u8, seed: u32, step: usize, size: usize) -> Result<Snapshot, JsError> {
    demo::snapshot(task, seed as u64, step, size).map(Snapshot).map_err(js)
}

#[wasm_bindgen]
pub struct FlowDemo(demo::FlowDemo);

#[wasm_bindgen]
impl FlowDemo {
    pub fn losses(&self) -> Vec<f64> {
        self.0.losses.clone()
    }
    pub fn samples(&self) -> Vec<f64> {
        self.0.samples.clone()
    }
    pub fn paths(&self) -> usize {
        self.0.paths.len()
    }
    /// Positions of one particle across the Euler steps.
    pub fn path(&self, i: usize) -> Vec<f64> {
        self.0.paths[i].clone()
    }
}

/// Trains the two-point flow toy, then integrates with `euler_steps` steps.
#[wasm_bindgen]
pub fn flow_demo(train_steps: usize, euler_steps: usize, particles: usize, seed: u32) -> Result<FlowDemo, JsError> {
    demo::flow_demo(train_steps, euler_steps, particles, seed as u64).map(FlowDemo).map_err(js)
}
