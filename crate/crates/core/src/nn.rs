//! Transformer building blocks shared by the geometry encoder and the
//! backbone. Parameters live in a [`Bundle`] under a name prefix.

use crate::backbone::lora::{lora_apply, LoraVars};
use crate::error::Result;
use crate::numerics::rng::{normal_tensor, stream};
use crate::numerics::{Bound, Bundle, Graph, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Low-rank adapter settings for attention projections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Token layout for one attention call: `groups` independent sequences of
/// `tokens` rows each, stored contiguously.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub groups: usize,
    pub tokens: usize,
}

/// Seeds each parameter from its own name so that models sharing parameter
/// names share initial values regardless of what else they contain.
pub fn init_normal(b: &mut Bundle, seed: u64, name: &str, shape: &[usize], std: f64, trainable: bool) -> Result<()> {
    let t = normal_tensor(&mut stream(seed, name, &[]), shape, std);
    b.insert(name, t, trainable)
}

pub fn init_const(b: &mut Bundle, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<()> {
    b.insert(name, Tensor::full(shape, value), trainable)
}

pub const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

/// Registers one pre-norm transformer block (`width` wide, MLP `hidden` wide)
/// under `prefix`. Attention projections are stored `[out, in]`.
pub fn init_block(
    b: &mut Bundle,
    seed: u64,
    prefix: &str,
    width: usize,
    hidden: usize,
    trainable: bool,
    lora: Option<LoraSpec>,
) -> Result<()> {
    for ln in ["ln1", "ln2"] {
        init_const(b, &format!("{prefix}.{ln}.g"), &[width], 1.0, trainable)?;
        init_const(b, &format!("{prefix}.{ln}.b"), &[width], 0.0, trainable)?;
    }
    for p in PROJECTIONS {
        init_normal(b, seed, &format!("{prefix}.attn.{p}.w"), &[width, width], INIT_STD, trainable)?;
        if let Some(l) = lora {
            // B starts at zero so the adapter is an exact no-op.
            init_normal(b, seed, &format!("{prefix}.attn.{p}.lora_a"), &[l.rank, width], INIT_STD, true)?;
            init_const(b, &format!("{prefix}.attn.{p}.lora_b"), &[width, l.rank], 0.0, true)?;
        }
    }
    init_normal(b, seed, &format!("{prefix}.mlp.fc1.w"), &[width, hidden], INIT_STD, trainable)?;
    init_const(b, &format!("{prefix}.mlp.fc1.b"), &[hidden], 0.0, trainable)?;
    init_normal(b, seed, &format!("{prefix}.mlp.fc2.w"), &[hidden, width], INIT_STD, trainable)?;
    init_const(b, &format!("{prefix}.mlp.fc2.b"), &[width], 0.0, trainable)?;
    Ok(())
}

fn projection(g: &mut Graph, p: &Bound, prefix: &str, x: Var, lora: Option<LoraSpec>) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let adapter = match lora {
        Some(l) => Some(LoraVars {
            a: p.var(&format!("{prefix}.lora_a"))?,
            b: p.var(&format!("{prefix}.lora_b"))?,
            scale: l.scale(),
        }),
        None => None,
    };
    lora_apply(g, x, w, adapter.as_ref())
}

/// Multi-head scaled dot-product self-attention within each group.
///
/// `mask`, when given, is an additive `[groups·heads, tokens, tokens]` node
/// (`0` keep, `-inf` drop).
#[allow(clippy::too_many_arguments)]
pub fn self_attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    layout: Layout,
    heads: usize,
    mask: Option<Var>,
    lora: Option<LoraSpec>,
) -> Result<Var> {
    let Layout { groups, tokens } = layout;
    let d = g.value(x).last_dim();
    let q = projection(g, p, &format!("{prefix}.q"), x, lora)?;
    let k = projection(g, p, &format!("{prefix}.k"), x, lora)?;
    let v = projection(g, p, &format!("{prefix}.v"), x, lora)?;
    let q = g.split_heads(q, groups, tokens, heads)?;
    let k = g.split_heads(k, groups, tokens, heads)?;
    let v = g.split_heads(v, groups, tokens, heads)?;
    let scores = g.bmm(q, k, true)?;
    let mut scores = g.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let attn = g.softmax_rows(scores)?;
    let ctx = g.bmm(attn, v, false)?;
    let ctx = g.merge_heads(ctx, groups, tokens, heads)?;
    projection(g, p, &format!("{prefix}.o"), ctx, lora)
}

pub fn mlp(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = g.linear(x, p.var(&format!("{prefix}.fc1.w"))?, Some(p.var(&format!("{prefix}.fc1.b"))?))?;
    let h = g.gelu(h);
    g.linear(h, p.var(&format!("{prefix}.fc2.w"))?, Some(p.var(&format!("{prefix}.fc2.b"))?))
}

pub fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    g.layer_norm(x, p.var(&format!("{prefix}.g"))?, p.var(&format!("{prefix}.b"))?)
}

/// `x + attn(ln1(x))`, then `+ mlp(ln2(·))`.
#[allow(clippy::too_many_arguments)]
pub fn block(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    layout: Layout,
    heads: usize,
    mask: Option<Var>,
    lora: Option<LoraSpec>,
) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let a = self_attention(g, p, &format!("{prefix}.attn"), h, layout, heads, mask, lora)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, p, &format!("{prefix}.ln2"), x)?;
    let m = mlp(g, p, &format!("{prefix}.mlp"), h)?;
    g.add(x, m)
}

/// Sinusoidal features of a scalar in `[0, 1]`: `dim/2` sines then cosines at
/// geometrically spaced frequencies.
pub fn sinusoidal(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (1000f64).powf(i as f64 / half.max(1) as f64);
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}
