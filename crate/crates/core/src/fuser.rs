//! Per-view cross-attention that injects geometry tokens into the 2-D visual
//! token stream.
//!
//! For every view `i`, the visual tokens query that view's geometry tokens:
//!
//! ```text
//! Q = t2D_i W_Q,  K = t3D_i W_K,  V = t3D_i W_V
//! a_i = softmax(Q Kᵀ / √d) V
//! out_i = t2D_i + a_i W_O        (residual form, the default)
//! ```
//!
//! and the per-view results are stacked back along the view axis. Views never
//! exchange information here. `W_O` starts at zero, so a freshly initialised
//! fuser passes the visual tokens through unchanged.

use crate::error::{Error, Result};
use crate::nn::{init_const, init_normal, INIT_STD};
use crate::numerics::{Bound, Bundle, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Visual2D,
    Geo3D,
    Fused,
}

/// `views × tokens × dim` values from one token stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    values: Tensor,
    stream: Stream,
}

impl TokenSet {
    pub fn new(values: Tensor, stream: Stream) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::Shape(format!("token set must be views×tokens×dim, got {:?}", values.shape())));
        }
        if !values.is_finite() {
            return Err(Error::Numeric("token set contains non-finite values".into()));
        }
        Ok(Self { values, stream })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn views(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    /// Tokens of one view as `tokens × dim`.
    pub fn view(&self, i: usize) -> Tensor {
        let per = self.tokens();
        self.values.row_block(i * per, per)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FuserConfig {
    pub dim_2d: usize,
    pub dim_3d: usize,
    /// Attention width `d`.
    pub dim: usize,
    pub residual: bool,
}

impl FuserConfig {
    pub fn new(dim_2d: usize, dim_3d: usize) -> Self {
        Self { dim_2d, dim_3d, dim: dim_2d, residual: true }
    }
}

/// Projection matrices shared by all views.
#[derive(Clone, Debug, PartialEq)]
pub struct FuserParams {
    /// `d_2D × d`
    pub w_q: Tensor,
    /// `d_3D × d`
    pub w_k: Tensor,
    /// `d_3D × d`
    pub w_v: Tensor,
    /// `d × d_2D`
    pub w_o: Tensor,
}

pub const PARAM_NAMES: [&str; 4] = ["fuser.w_q", "fuser.w_k", "fuser.w_v", "fuser.w_o"];

impl FuserParams {
    pub fn init(cfg: &FuserConfig, seed: u64) -> Result<Self> {
        let mut b = Bundle::new();
        register(&mut b, cfg, seed)?;
        Self::from_bundle(&b)
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        Ok(Self {
            w_q: b.get(PARAM_NAMES[0])?.clone(),
            w_k: b.get(PARAM_NAMES[1])?.clone(),
            w_v: b.get(PARAM_NAMES[2])?.clone(),
            w_o: b.get(PARAM_NAMES[3])?.clone(),
        })
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut b = Bundle::new();
        for (name, t) in PARAM_NAMES.iter().zip([&self.w_q, &self.w_k, &self.w_v, &self.w_o]) {
            b.insert(name, t.clone(), true)?;
        }
        Ok(b)
    }

    fn check(&self, d2: usize, d3: usize) -> Result<usize> {
        let d = self.w_q.shape().get(1).copied().unwrap_or(0);
        let ok = self.w_q.shape() == [d2, d]
            && self.w_k.shape() == [d3, d]
            && self.w_v.shape() == [d3, d]
            && self.w_o.shape() == [d, d2];
        if !ok {
            return Err(Error::Config(format!(
                "fuser parameters W_Q{:?} W_K{:?} W_V{:?} W_O{:?} do not fit token widths d_2D={d2}, d_3D={d3}",
                self.w_q.shape(),
                self.w_k.shape(),
                self.w_v.shape(),
                self.w_o.shape()
            )));
        }
        Ok(d)
    }
}

/// Adds freshly initialised fuser parameters (all trainable) to `b`.
pub fn register(b: &mut Bundle, cfg: &FuserConfig, seed: u64) -> Result<()> {
    init_normal(b, seed, PARAM_NAMES[0], &[cfg.dim_2d, cfg.dim], INIT_STD, true)?;
    init_normal(b, seed, PARAM_NAMES[1], &[cfg.dim_3d, cfg.dim], INIT_STD, true)?;
    init_normal(b, seed, PARAM_NAMES[2], &[cfg.dim_3d, cfg.dim], INIT_STD, true)?;
    init_const(b, PARAM_NAMES[3], &[cfg.dim, cfg.dim_2d], 0.0, true)
}

/// Graph handles for the four projections.
#[derive(Clone, Copy, Debug)]
pub struct FuserVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl FuserVars {
    pub fn from_bound(p: &Bound) -> Result<Self> {
        Ok(Self {
            w_q: p.var(PARAM_NAMES[0])?,
            w_k: p.var(PARAM_NAMES[1])?,
            w_v: p.var(PARAM_NAMES[2])?,
            w_o: p.var(PARAM_NAMES[3])?,
        })
    }
}

/// Graph-level fusion over `groups` independent views.
///
/// `t2d` is `[groups, M_2D, d_2D]` and `t3d` is `[groups, M_3D, d_3D]` (any
/// shapes with those row layouts). Returns the fused tokens
/// `[groups, M_2D, d_2D]` and the attention weights `[groups, M_2D, M_3D]`.
pub fn fuse_graph(
    g: &mut Graph,
    t2d: Var,
    t3d: Var,
    w: &FuserVars,
    groups: usize,
    residual: bool,
) -> Result<(Var, Var)> {
    let d2 = g.value(t2d).last_dim();
    let (m2, m3) = (g.value(t2d).rows() / groups, g.value(t3d).rows() / groups);
    if m2 * groups != g.value(t2d).rows() || m3 * groups != g.value(t3d).rows() {
        return Err(Error::Shape(format!(
            "token rows {:?}/{:?} do not split into {groups} views",
            g.shape(t2d),
            g.shape(t3d)
        )));
    }
    let d = g.shape(w.w_q)[1];
    let q = g.matmul(t2d, w.w_q)?;
    let k = g.matmul(t3d, w.w_k)?;
    let v = g.matmul(t3d, w.w_v)?;
    let q = g.reshape(q, &[groups, m2, d])?;
    let k = g.reshape(k, &[groups, m3, d])?;
    let v = g.reshape(v, &[groups, m3, d])?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax_rows(scores)?;
    let ctx = g.bmm(attn, v, false)?;
    let delta = g.matmul(ctx, w.w_o)?;
    let out = if residual {
        let base = g.reshape(t2d, &[groups, m2, d2])?;
        g.add(base, delta)?
    } else {
        delta
    };
    Ok((out, attn))
}

fn run(t2d: &TokenSet, t3d: &TokenSet, params: &FuserParams, residual: bool) -> Result<(Tensor, Tensor)> {
    if t2d.views() != t3d.views() {
        return Err(Error::Shape(format!(
            "view counts differ: 2-D tokens {:?}, 3-D tokens {:?}",
            t2d.values.shape(),
            t3d.values.shape()
        )));
    }
    params.check(t2d.dim(), t3d.dim())?;
    let mut g = Graph::new();
    let a = g.constant(t2d.values.clone());
    let b = g.constant(t3d.values.clone());
    let w = FuserVars {
        w_q: g.constant(params.w_q.clone()),
        w_k: g.constant(params.w_k.clone()),
        w_v: g.constant(params.w_v.clone()),
        w_o: g.constant(params.w_o.clone()),
    };
    let (out, attn) = fuse_graph(&mut g, a, b, &w, t2d.views(), residual)?;
    Ok((g.value(out).clone(), g.value(attn).clone()))
}

/// Fuses with the default residual form.
pub fn fuse(t2d: &TokenSet, t3d: &TokenSet, params: &FuserParams) -> Result<TokenSet> {
    fuse_with(t2d, t3d, params, true)
}

pub fn fuse_with(t2d: &TokenSet, t3d: &TokenSet, params: &FuserParams, residual: bool) -> Result<TokenSet> {
    let (out, _) = run(t2d, t3d, params, residual)?;
    TokenSet::new(out, Stream::Fused)
}

/// Softmax weights used by [`fuse`], `views × M_2D × M_3D`.
pub fn attention_map(t2d: &TokenSet, t3d: &TokenSet, params: &FuserParams) -> Result<Tensor> {
    run(t2d, t3d, params, true).map(|(_, a)| a)
}
