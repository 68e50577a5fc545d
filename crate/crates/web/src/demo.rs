//! Plain-Rust halves of the browser operations, testable natively.

use geovla::expert::{sample_toy, toy_config, train_two_point_toy, v_net_forward};
use geovla::numerics::rng::{normal_tensor, stream};
use geovla::numerics::Tensor;
use geovla::sim::{generate_scene, render, run_episode, score, Camera, ScriptedExpert, Task, World, FAR};
use geovla::Result;

/// Both camera views of a scripted rollout, paused at one step.
pub struct Snapshot {
    pub size: usize,
    /// One RGBA buffer per view.
    pub rgb: Vec<Vec<u8>>,
    /// Depth as grey RGBA, near is bright.
    pub depth: Vec<Vec<u8>>,
    pub step: usize,
    pub total_steps: usize,
    pub score: u8,
    pub instruction: String,
}

fn rgba_from_rgb(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() / 3 * 4);
    for px in t.data().chunks(3) {
        out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out.push(255);
    }
    out
}

fn rgba_from_depth(t: &Tensor) -> Vec<u8> {
    let finite: Vec<f64> = t.data().iter().copied().filter(|&d| d < FAR).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let mut out = Vec::with_capacity(t.len() * 4);
    for &d in t.data() {
        // sensor dropouts show as a dark red
        let px = if d >= FAR { [90, 0, 0] } else { [(255.0 * (1.0 - (d - lo) / span)).round() as u8; 3] };
        out.extend_from_slice(&px);
        out.push(255);
    }
    out
}

/// Runs the scripted expert on `(task, seed)` and renders the world after
/// `step` actions (clamped to the episode length).
pub fn snapshot(task: u8, seed: u64, step: usize, size: usize) -> Result<Snapshot> {
    let task = Task::from_id(task)?;
    let mut expert = ScriptedExpert::oracle(8);
    let ep = run_episode(&mut expert, task, seed, seed)?;
    let final_score = score(&ep)?;
    let scene = generate_scene(task, seed);
    let instruction = scene.instruction.clone();
    let mut world = World::new(scene);
    let step = step.min(ep.steps.len());
    for rec in &ep.steps[..step] {
        world.step(&rec.action)?;
    }
    let (mut rgb, mut depth) = (Vec::new(), Vec::new());
    for (v, cam) in Camera::rig(size).iter().enumerate() {
        let f = render(&world.scene, Some(&world.gripper), cam, v as u64, step as u64);
        rgb.push(rgba_from_rgb(&f.image));
        depth.push(rgba_from_depth(&f.depth));
    }
    Ok(Snapshot { size, rgb, depth, step, total_steps: ep.steps.len(), score: final_score, instruction })
}

/// Flow-matching toy on the two-point target `{-1, +1}`.
pub struct FlowDemo {
    pub losses: Vec<f64>,
    /// Final samples.
    pub samples: Vec<f64>,
    /// `paths[i]` is particle `i` at every Euler step, `K + 1` values.
    pub paths: Vec<Vec<f64>>,
}

pub fn flow_demo(train_steps: usize, euler_steps: usize, particles: usize, seed: u64) -> Result<FlowDemo> {
    let run = train_two_point_toy(seed, train_steps, 128, 3e-3)?;
    let cfg = toy_config();
    let samples = sample_toy(&run.params, particles, euler_steps, seed + 1)?;
    let starts = normal_tensor(&mut stream(seed, "web-paths", &[]), &[particles.min(64)], 1.0);
    let h = 1.0 / euler_steps.max(1) as f64;
    let mut paths = Vec::new();
    for &x0 in starts.data() {
        let mut x = x0;
        let mut path = vec![x];
        for k in 0..euler_steps.max(1) {
            let v = v_net_forward(&Tensor::new(&[1, 1], vec![x])?, k as f64 * h, &[], &run.params, &cfg)?;
            x += h * v.data()[0];
            path.push(x);
        }
        paths.push(path);
    }
    Ok(FlowDemo { losses: run.losses, samples, paths })
}
