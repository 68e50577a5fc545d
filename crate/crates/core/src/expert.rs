//! Flow-matching action head.
//!
//! A small MLP learns the velocity of the straight path from Gaussian noise
//! to a demonstrated action chunk. At inference the field is integrated with
//! a fixed number of Euler steps starting from noise.

use rand::Rng as _;

use crate::backbone::ContextEmbedding;
use crate::error::{Error, Result};
use crate::nn::{init_const, init_normal, sinusoidal, INIT_STD};
use crate::numerics::rng::{normal, normal_tensor, stream, Rng};
use crate::numerics::{clip_grad_norm, AdamW, AdamWConfig, Bound, Bundle, Checkpoint, Graph, Tensor, Var};

pub const TAU_DIM: usize = 8;

/// Per-dimension affine map between raw actions and the unit-scale space
/// the flow is trained in, plus the execution bounds applied after sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSpace {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ActionSpace {
    pub fn identity(dim: usize) -> Self {
        Self {
            scale: vec![1.0; dim],
            offset: vec![0.0; dim],
            lo: vec![f64::NEG_INFINITY; dim],
            hi: vec![f64::INFINITY; dim],
        }
    }

    /// End-effector deltas of a few centimetres and a gripper command in `[0, 1]`.
    pub fn robot() -> Self {
        Self {
            scale: vec![0.02, 0.02, 0.02, 0.5],
            offset: vec![0.0, 0.0, 0.0, 0.5],
            lo: vec![-MAX_DELTA, -MAX_DELTA, -MAX_DELTA, 0.0],
            hi: vec![MAX_DELTA, MAX_DELTA, MAX_DELTA, 1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn normalize(&self, raw: &Tensor) -> Tensor {
        let d = self.dim();
        let mut out = raw.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.offset[i % d]) / self.scale[i % d];
        }
        out
    }

    pub fn denormalize(&self, unit: &Tensor) -> Tensor {
        let d = self.dim();
        let mut out = unit.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.scale[i % d] + self.offset[i % d];
        }
        out
    }

    pub fn clamp(&self, raw: &Tensor) -> Tensor {
        let d = self.dim();
        let mut out = raw.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = v.clamp(self.lo[i % d], self.hi[i % d]);
        }
        out
    }
}

pub const MAX_DELTA: f64 = 0.2;

/// `H_a × d_a` actions: xyz end-effector deltas and a gripper command.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    actions: Tensor,
}

impl ActionChunk {
    pub fn new(actions: Tensor) -> Result<Self> {
        if actions.shape().len() != 2 {
            return Err(Error::Shape(format!("action chunk must be 2-D, got {:?}", actions.shape())));
        }
        if !actions.is_finite() {
            return Err(Error::Numeric("non-finite action".into()));
        }
        Ok(Self { actions })
    }

    pub fn from_rows(rows: &[[f64; 4]]) -> Result<Self> {
        let data = rows.iter().flatten().copied().collect();
        Self::new(Tensor::new(&[rows.len(), 4], data)?)
    }

    pub fn horizon(&self) -> usize {
        self.actions.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.actions.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.actions.data()[i * d..(i + 1) * d]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.actions
    }

    pub fn within(&self, space: &ActionSpace) -> bool {
        let d = self.dim();
        self.actions.data().iter().enumerate().all(|(i, &v)| v >= space.lo[i % d] && v <= space.hi[i % d])
    }
}

/// One point on the noise-to-target path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x_tau: Tensor,
    pub tau: f64,
    pub noise: Tensor,
}

impl FlowSample {
    /// `x_τ = (1 − τ)·noise + τ·target`.
    pub fn new(target: &Tensor, tau: f64, noise: Tensor) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
        }
        if target.shape() != noise.shape() {
            return Err(Error::Shape(format!("target {:?} vs noise {:?}", target.shape(), noise.shape())));
        }
        let data = target.data().iter().zip(noise.data()).map(|(&a, &n)| (1.0 - tau) * n + tau * a).collect();
        Ok(Self { x_tau: Tensor::new(target.shape(), data)?, tau, noise })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertConfig {
    pub horizon: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub euler_steps: usize,
    /// Width of the pooled context; 0 for an unconditional head.
    pub context_dim: usize,
    pub space: ActionSpace,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self { horizon: 8, action_dim: 4, hidden: 128, euler_steps: 10, context_dim: 64, space: ActionSpace::robot() }
    }
}

impl ExpertConfig {
    pub fn flat(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn input_dim(&self) -> usize {
        self.flat() + TAU_DIM + self.context_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.action_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("expert dimensions must be positive".into()));
        }
        if self.euler_steps == 0 {
            return Err(Error::Config("at least one Euler step is required".into()));
        }
        if self.space.dim() != self.action_dim {
            return Err(Error::Config(format!(
                "action space has {} dims, expert expects {}",
                self.space.dim(),
                self.action_dim
            )));
        }
        Ok(())
    }
}

const LAYERS: [&str; 3] = ["expert.fc1", "expert.fc2", "expert.fc3"];

pub fn init_expert(cfg: &ExpertConfig, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut b = Bundle::new();
    let dims = [cfg.input_dim(), cfg.hidden, cfg.hidden, cfg.flat()];
    for (i, name) in LAYERS.iter().enumerate() {
        let std = if i == 2 { INIT_STD } else { (1.0 / dims[i] as f64).sqrt() };
        init_normal(&mut b, seed, &format!("{name}.w"), &[dims[i], dims[i + 1]], std, true)?;
        init_const(&mut b, &format!("{name}.b"), &[dims[i + 1]], 0.0, true)?;
    }
    Ok(b)
}

fn tau_features(taus: &[f64]) -> Result<Tensor> {
    let data = taus.iter().flat_map(|&t| sinusoidal(t, TAU_DIM)).collect();
    Tensor::new(&[taus.len(), TAU_DIM], data)
}

/// Velocity for a batch: `x` is `[B, H·d_a]`, `ctx` is `[B, context_dim]`.
pub fn v_net_graph(g: &mut Graph, p: &Bound, cfg: &ExpertConfig, x: Var, taus: &[f64], ctx: Option<Var>) -> Result<Var> {
    let bsz = taus.len();
    if g.shape(x) != [bsz, cfg.flat()] {
        return Err(Error::Shape(format!("x_tau {:?} is not [{bsz}, {}]", g.shape(x), cfg.flat())));
    }
    let t = g.constant(tau_features(taus)?);
    let mut cols = vec![x, t];
    match ctx {
        Some(c) if cfg.context_dim > 0 => {
            if g.shape(c) != [bsz, cfg.context_dim] {
                return Err(Error::Shape(format!("context {:?} is not [{bsz}, {}]", g.shape(c), cfg.context_dim)));
            }
            cols.push(c);
        }
        None if cfg.context_dim == 0 => {}
        _ => return Err(Error::Config("context presence does not match expert config".into())),
    }
    let mut h = g.concat_cols(&cols)?;
    for (i, name) in LAYERS.iter().enumerate() {
        h = g.linear(h, p.var(&format!("{name}.w"))?, Some(p.var(&format!("{name}.b"))?))?;
        if i < 2 {
            h = g.gelu(h);
        }
    }
    Ok(h)
}

/// Single-example velocity `H_a × d_a`.
pub fn v_net_forward(x_tau: &Tensor, tau: f64, context: &[f64], params: &Checkpoint, cfg: &ExpertConfig) -> Result<Tensor> {
    let out = v_net_batch(&x_tau.clone().reshaped(&[1, cfg.flat()])?, &[tau], context, params, cfg)?;
    out.reshaped(&[cfg.horizon, cfg.action_dim])
}

/// Rows of `x` share one context vector.
fn v_net_batch(x: &Tensor, taus: &[f64], context: &[f64], params: &Checkpoint, cfg: &ExpertConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_with(&mut g, |_| false);
    let xv = g.constant(x.clone());
    let ctx = if cfg.context_dim > 0 {
        if context.len() != cfg.context_dim {
            return Err(Error::Shape(format!("context of {} values, expected {}", context.len(), cfg.context_dim)));
        }
        let rows = taus.len();
        let data = (0..rows).flat_map(|_| context.iter().copied()).collect();
        Some(g.constant(Tensor::new(&[rows, cfg.context_dim], data)?))
    } else {
        None
    };
    let v = v_net_graph(&mut g, &p, cfg, xv, taus, ctx)?;
    Ok(g.value(v).clone())
}

/// Mean squared error between predicted and straight-line velocity over a
/// batch. Targets are raw actions; they are normalised here.
pub fn fm_loss_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &ExpertConfig,
    ctx: Option<Var>,
    targets: &[&Tensor],
    taus: &[f64],
    noises: &[&Tensor],
) -> Result<Var> {
    let bsz = targets.len();
    if taus.len() != bsz || noises.len() != bsz {
        return Err(Error::Shape(format!("{bsz} targets, {} taus, {} noises", taus.len(), noises.len())));
    }
    let flat = cfg.flat();
    let mut xs = Vec::with_capacity(bsz * flat);
    let mut vs = Vec::with_capacity(bsz * flat);
    for ((target, &tau), noise) in targets.iter().zip(taus).zip(noises) {
        if target.len() != flat || noise.len() != flat {
            return Err(Error::Shape(format!("action chunk {:?} does not hold {flat} values", target.shape())));
        }
        let unit = cfg.space.normalize(target);
        let s = FlowSample::new(&unit, tau, (*noise).clone())?;
        xs.extend_from_slice(s.x_tau.data());
        vs.extend(unit.data().iter().zip(noise.data()).map(|(a, n)| a - n));
    }
    let x = g.constant(Tensor::new(&[bsz, flat], xs)?);
    let v_target = g.constant(Tensor::new(&[bsz, flat], vs)?);
    let v = v_net_graph(g, p, cfg, x, taus, ctx)?;
    g.mse(v, v_target)
}

/// Flow-matching loss of one example conditioned on a context embedding.
pub fn fm_loss(
    z: &ContextEmbedding,
    target: &ActionChunk,
    tau: f64,
    noise: &Tensor,
    params: &Checkpoint,
    cfg: &ExpertConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = params.bind_with(&mut g, |_| false);
    let ctx = if cfg.context_dim > 0 {
        let pooled = z.pooled();
        Some(g.constant(Tensor::new(&[1, pooled.len()], pooled)?))
    } else {
        None
    };
    let loss = fm_loss_graph(&mut g, &p, cfg, ctx, &[target.tensor()], &[tau], &[noise])?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("flow-matching loss is {value} at tau {tau}")));
    }
    Ok(value)
}

/// Draws `τ ~ U[0, 1]` and a standard normal chunk.
pub fn draw_flow(rng: &mut Rng, cfg: &ExpertConfig) -> (f64, Tensor) {
    let tau = rng.random::<f64>();
    let noise = normal_tensor(rng, &[cfg.horizon, cfg.action_dim], 1.0);
    (tau, noise)
}

/// Forward Euler from `x0` over `[0, 1]` in `steps` equal increments.
pub fn euler_integrate<F>(x0: Tensor, steps: usize, mut velocity: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::Config("at least one Euler step is required".into()));
    }
    let h = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let v = velocity(&x, k as f64 * h)?;
        if v.shape() != x.shape() {
            return Err(Error::Shape(format!("velocity {:?} vs state {:?}", v.shape(), x.shape())));
        }
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += h * vi;
        }
    }
    Ok(x)
}

/// Integrates the learned field from seeded noise and clamps to the
/// execution bounds.
pub fn sample_from_context(
    context: &[f64],
    steps: usize,
    seed: u64,
    params: &Checkpoint,
    cfg: &ExpertConfig,
) -> Result<ActionChunk> {
    let mut rng = stream(seed, "expert-sample", &[]);
    let x0 = normal_tensor(&mut rng, &[cfg.horizon, cfg.action_dim], 1.0);
    let x = euler_integrate(x0, steps, |x, tau| v_net_forward(x, tau, context, params, cfg))?;
    let raw = cfg.space.denormalize(&x);
    let raw = Tensor::new(raw.shape(), raw.data().iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect())?;
    ActionChunk::new(cfg.space.clamp(&raw))
}

pub fn sample_actions(z: &ContextEmbedding, steps: usize, seed: u64, params: &Checkpoint, cfg: &ExpertConfig) -> Result<ActionChunk> {
    sample_from_context(&z.pooled(), steps, seed, params, cfg)
}

/// Unconditional one-dimensional head used to sanity-check the sampler.
pub fn toy_config() -> ExpertConfig {
    ExpertConfig { horizon: 1, action_dim: 1, hidden: 64, euler_steps: 10, context_dim: 0, space: ActionSpace::identity(1) }
}

pub struct ToyRun {
    pub params: Checkpoint,
    pub losses: Vec<f64>,
}

/// Fits the velocity field of the two-point target `{−1, +1}`.
pub fn train_two_point_toy(seed: u64, steps: usize, batch: usize, lr: f64) -> Result<ToyRun> {
    let cfg = toy_config();
    let mut params = init_expert(&cfg, seed)?;
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut rng = stream(seed, "toy-flow", &[]);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut targets = Vec::with_capacity(batch);
        let mut noises = Vec::with_capacity(batch);
        let mut taus = Vec::with_capacity(batch);
        for _ in 0..batch {
            let a = if rng.random::<bool>() { 1.0 } else { -1.0 };
            targets.push(Tensor::new(&[1, 1], vec![a])?);
            noises.push(Tensor::new(&[1, 1], vec![normal(&mut rng)])?);
            taus.push(rng.random::<f64>());
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let t: Vec<&Tensor> = targets.iter().collect();
        let n: Vec<&Tensor> = noises.iter().collect();
        let loss = fm_loss_graph(&mut g, &p, &cfg, None, &t, &taus, &n)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step, reason: format!("toy loss {value}") });
        }
        g.backward(loss)?;
        let mut grads = p.grads(&g);
        drop(p);
        clip_grad_norm(&mut grads, 1.0);
        let lr_t = lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos());
        opt.step(&mut params, &grads, lr_t)?;
        losses.push(value);
    }
    Ok(ToyRun { params, losses })
}

/// Draws `n` toy samples, all integrated as one batch.
pub fn sample_toy(params: &Checkpoint, n: usize, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let cfg = toy_config();
    let mut rng = stream(seed, "toy-sample", &[]);
    let x0 = normal_tensor(&mut rng, &[n, 1], 1.0);
    let x = euler_integrate(x0, steps, |x, tau| v_net_batch(x, &vec![tau; n], &[], params, &cfg))?;
    Ok(x.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cfg() -> ExpertConfig {
        ExpertConfig { hidden: 16, context_dim: 6, space: ActionSpace::identity(4), ..Default::default() }
    }

    fn ctx(cfg: &ExpertConfig) -> ContextEmbedding {
        let z = normal_tensor(&mut stream(2, "z", &[]), &[5, cfg.context_dim], 1.0);
        ContextEmbedding { z, valid: vec![true, true, false, true, true] }
    }

    #[test]
    fn interpolant_endpoints_are_exact() {
        let a = normal_tensor(&mut stream(1, "a", &[]), &[8, 4], 1.0);
        let n = normal_tensor(&mut stream(1, "n", &[]), &[8, 4], 1.0);
        assert_eq!(FlowSample::new(&a, 0.0, n.clone()).unwrap().x_tau, n);
        assert_eq!(FlowSample::new(&a, 1.0, n.clone()).unwrap().x_tau, a);
        assert!(FlowSample::new(&a, 1.5, n).is_err());
    }

    #[test]
    fn zero_network_has_zero_loss_on_degenerate_target() {
        let cfg = unit_cfg();
        let mut params = init_expert(&cfg, 0).unwrap();
        for e in params.entries_mut() {
            e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let n = normal_tensor(&mut stream(3, "n", &[]), &[8, 4], 1.0);
        let target = ActionChunk::new(n.clone()).unwrap();
        assert_eq!(fm_loss(&ctx(&cfg), &target, 0.3, &n, &params, &cfg).unwrap(), 0.0);
        for tau in [0.0, 0.5, 1.0] {
            let v = v_net_forward(&n, tau, &ctx(&cfg).pooled(), &params, &cfg).unwrap();
            assert!(v.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn oracle_velocity_single_euler_step_is_exact() {
        let a = normal_tensor(&mut stream(4, "a", &[]), &[8, 4], 1.0);
        let n = normal_tensor(&mut stream(4, "n", &[]), &[8, 4], 1.0);
        let v = Tensor::new(a.shape(), a.data().iter().zip(n.data()).map(|(x, y)| x - y).collect()).unwrap();
        for k in [1, 3, 10] {
            let out = euler_integrate(n.clone(), k, |_, _| Ok(v.clone())).unwrap();
            assert!(out.max_abs_diff(&a) < 1e-14, "K={k}");
        }
        assert!(euler_integrate(n.clone(), 0, |_, _| Ok(v.clone())).is_err());
        // on a dyadic grid the single step involves no rounding at all
        let grid = |t: &Tensor| t.map(|x| (x * 64.0).round() / 64.0);
        let (a, n) = (grid(&a), grid(&n));
        let v = Tensor::new(a.shape(), a.data().iter().zip(n.data()).map(|(x, y)| x - y).collect()).unwrap();
        assert_eq!(euler_integrate(n, 1, |_, _| Ok(v.clone())).unwrap(), a);
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let cfg = ExpertConfig { hidden: 16, context_dim: 6, ..Default::default() };
        let mut params = init_expert(&cfg, 9).unwrap();
        // blow up the output layer to exercise clamping
        params.get_mut("expert.fc3.w").unwrap().data_mut().iter_mut().for_each(|v| *v *= 500.0);
        let z = ctx(&cfg);
        let a = sample_actions(&z, 10, 5, &params, &cfg).unwrap();
        let b = sample_actions(&z, 10, 5, &params, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.within(&cfg.space));
        assert_eq!(a.horizon(), 8);
    }

    #[test]
    fn velocity_is_locally_lipschitz() {
        let cfg = unit_cfg();
        let params = init_expert(&cfg, 1).unwrap();
        let x = normal_tensor(&mut stream(5, "x", &[]), &[8, 4], 1.0);
        let c = ctx(&cfg).pooled();
        let eps = 1e-6;
        let mut xp = x.clone();
        xp.data_mut()[7] += eps;
        let v0 = v_net_forward(&x, 0.4, &c, &params, &cfg).unwrap();
        let v1 = v_net_forward(&xp, 0.4, &c, &params, &cfg).unwrap();
        assert!(v0.max_abs_diff(&v1) / eps < 1e3);
    }

    #[test]
    fn robot_space_round_trips() {
        let s = ActionSpace::robot();
        let raw = Tensor::new(&[2, 4], vec![0.01, -0.02, 0.0, 1.0, 0.0, 0.0, 0.02, 0.0]).unwrap();
        let back = s.denormalize(&s.normalize(&raw));
        assert!(back.max_abs_diff(&raw) < 1e-15);
        assert_eq!(s.normalize(&raw).data()[3], 1.0);
    }
}
