//! Frozen vision-language transformer with low-rank adapters.
//!
//! The backbone consumes per-view visual tokens (optionally already fused
//! with geometry), the instruction, and the robot state, and returns one
//! context token per input position. Every backbone weight is frozen; only the
//! adapters on the attention projections, the instruction embedding and the
//! state projection are trainable.

pub mod lora;

use crate::error::{Error, Result};
use crate::fuser::TokenSet;
use crate::geometry::patchify_stack;
use crate::nn::{self, init_const, init_normal, Layout, LoraSpec, INIT_STD};
use crate::numerics::{Bound, Bundle, Checkpoint, Graph, Tensor, Var};

/// Word-level vocabulary shared by all task instructions. Id 0 is padding.
pub const VOCAB: [&str; 32] = [
    "<pad>", "<unk>", "center", "the", "cylinder", "on", "target", "insert", "peg", "into", "left", "middle",
    "right", "hole", "pick", "up", "bottle", "place", "can", "shelf", "slot", "glass", "in", "a", "of", "to",
    "at", "board", "top", "rings", "lift", "and",
];

pub const PAD: usize = 0;

/// Padded word ids of one instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionTokens {
    ids: Vec<usize>,
}

impl InstructionTokens {
    pub fn new(ids: Vec<usize>, max_len: usize) -> Result<Self> {
        if ids.len() > max_len {
            return Err(Error::Config(format!("instruction of {} words exceeds {max_len}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= VOCAB.len()) {
            return Err(Error::Config(format!("word id {bad} outside vocabulary")));
        }
        let mut ids = ids;
        ids.resize(max_len, PAD);
        Ok(Self { ids })
    }

    /// Lower-cases and splits on whitespace; unknown words map to `<unk>`.
    pub fn from_text(text: &str, max_len: usize) -> Result<Self> {
        let ids = text
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                VOCAB.iter().position(|&v| v == w).unwrap_or(1)
            })
            .collect();
        Self::new(ids, max_len)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn is_pad(&self, i: usize) -> bool {
        self.ids[i] == PAD
    }

    pub fn text(&self) -> String {
        self.ids.iter().filter(|&&i| i != PAD).map(|&i| VOCAB[i]).collect::<Vec<_>>().join(" ")
    }
}

/// End-effector position followed by gripper aperture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotState {
    pub position: [f64; 3],
    pub aperture: f64,
}

impl RobotState {
    pub const DIM: usize = 4;

    pub fn to_vec(&self) -> [f64; 4] {
        [self.position[0], self.position[1], self.position[2], self.aperture]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.to_vec().iter().all(|v| v.is_finite()) || !(0.0..=1.0).contains(&self.aperture) {
            return Err(Error::Config(format!("invalid robot state {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_instr: usize,
    pub views: usize,
    pub image: usize,
    pub patch: usize,
    pub lora: Option<LoraSpec>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 4,
            heads: 4,
            mlp_hidden: 128,
            max_instr: 8,
            views: 2,
            image: 32,
            patch: 8,
            lora: Some(LoraSpec { rank: 4, alpha: 8.0 }),
        }
    }
}

impl BackboneConfig {
    pub fn visual_tokens_per_view(&self) -> usize {
        (self.image / self.patch).pow(2)
    }

    /// Context length `K = N·M_2D + instruction length + 1`.
    pub fn context_len(&self) -> usize {
        self.views * self.visual_tokens_per_view() + self.max_instr + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("backbone width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.patch == 0 || self.image % self.patch != 0 {
            return Err(Error::Config(format!("image {} not divisible by patch {}", self.image, self.patch)));
        }
        if let Some(l) = self.lora {
            if l.rank == 0 {
                return Err(Error::Config("LoRA rank must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `K × d` context tokens; rows at padded instruction positions are zero and
/// flagged invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEmbedding {
    pub z: Tensor,
    pub valid: Vec<bool>,
}

impl ContextEmbedding {
    /// Mean of the valid rows.
    pub fn pooled(&self) -> Vec<f64> {
        let d = self.z.last_dim();
        let mut out = vec![0.0; d];
        let n = self.valid.iter().filter(|&&v| v).count().max(1) as f64;
        for (r, &ok) in self.valid.iter().enumerate() {
            if ok {
                for j in 0..d {
                    out[j] += self.z.data()[r * d + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// Deterministic stand-in for a pretrained vision-language model.
///
/// Visual tower (`vision.*`) and transformer (`backbone.*`) weights are
/// frozen; LoRA factors and the `embed.*` input embeddings are trainable.
pub fn init_backbone(cfg: &BackboneConfig, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut b = Bundle::new();
    let d = cfg.width;
    let patch_dim = cfg.patch * cfg.patch * 3;
    init_normal(&mut b, seed, "vision.patch.w", &[patch_dim, d], INIT_STD, false)?;
    init_const(&mut b, "vision.patch.b", &[d], 0.0, false)?;
    init_normal(&mut b, seed, "vision.pos", &[cfg.visual_tokens_per_view(), d], INIT_STD, false)?;
    for i in 0..cfg.blocks {
        nn::init_block(&mut b, seed, &format!("backbone.block{i}"), d, cfg.mlp_hidden, false, cfg.lora)?;
    }
    init_const(&mut b, "backbone.ln_f.g", &[d], 1.0, false)?;
    init_const(&mut b, "backbone.ln_f.b", &[d], 0.0, false)?;
    init_normal(&mut b, seed, "embed.instr", &[VOCAB.len(), d], INIT_STD, true)?;
    init_normal(&mut b, seed, "embed.state.w", &[RobotState::DIM, d], INIT_STD, true)?;
    init_const(&mut b, "embed.state.b", &[d], 0.0, true)?;
    Ok(b)
}

/// Frozen patch-embedding tower: `[V, H, W, 3]` images to `[V·M_2D, d]` tokens.
pub fn visual_tokens_graph(g: &mut Graph, p: &Bound, cfg: &BackboneConfig, images: &Tensor) -> Result<Var> {
    let nviews = images.shape()[0];
    let patches = g.constant(patchify_stack(images, cfg.patch)?);
    let t = g.linear(patches, p.var("vision.patch.w")?, Some(p.var("vision.patch.b")?))?;
    let pos = p.var("vision.pos")?;
    let posrep = g.concat_rows(&vec![pos; nviews])?;
    g.add(t, posrep)
}

/// Visual tokens `N × M_2D × d` for one observation.
pub fn visual_tokens(images: &Tensor, params: &Checkpoint, cfg: &BackboneConfig) -> Result<TokenSet> {
    let mut g = Graph::new();
    let p = params.bind_with(&mut g, |_| false);
    let t = visual_tokens_graph(&mut g, &p, cfg, images)?;
    let n = images.shape()[0];
    let v = g.value(t).clone().reshaped(&[n, cfg.visual_tokens_per_view(), cfg.width])?;
    TokenSet::new(v, crate::fuser::Stream::Visual2D)
}

/// Graph handles for a batch of contexts.
pub struct ContextVars {
    /// `[B·K, d]`
    pub z: Var,
    /// `[B, d]` mean over valid rows.
    pub pooled: Var,
    pub valid: Vec<bool>,
}

/// Encodes a batch. `visual` holds `B·N·M_2D` rows of width `d`.
pub fn encode_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &BackboneConfig,
    visual: Var,
    instr: &[InstructionTokens],
    states: &[RobotState],
) -> Result<ContextVars> {
    let bsz = instr.len();
    let d = cfg.width;
    let m = cfg.views * cfg.visual_tokens_per_view();
    if states.len() != bsz || bsz == 0 {
        return Err(Error::Shape(format!("{} instructions for {} states", bsz, states.len())));
    }
    if g.value(visual).last_dim() != d {
        return Err(Error::Config(format!(
            "visual token width {} does not match backbone width {d}",
            g.value(visual).last_dim()
        )));
    }
    if g.value(visual).rows() != bsz * m {
        return Err(Error::Shape(format!("visual tokens {:?} are not {bsz}×{m} rows", g.shape(visual))));
    }
    for s in states {
        s.validate()?;
    }
    let li = cfg.max_instr;
    let k = cfg.context_len();

    let ids: Vec<usize> = instr
        .iter()
        .map(|t| {
            if t.ids().len() != li {
                Err(Error::Config(format!("instruction padded to {} not {li}", t.ids().len())))
            } else {
                Ok(t.ids().iter().copied())
            }
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let words = g.embedding_lookup(p.var("embed.instr")?, &ids)?;
    let state_in = Tensor::new(&[bsz, RobotState::DIM], states.iter().flat_map(|s| s.to_vec()).collect())?;
    let state_in = g.constant(state_in);
    let state_tok = g.linear(state_in, p.var("embed.state.w")?, Some(p.var("embed.state.b")?))?;

    let mut parts = Vec::with_capacity(bsz * 3);
    for b in 0..bsz {
        parts.push(g.slice_rows(visual, b * m, m)?);
        parts.push(g.slice_rows(words, b * li, li)?);
        parts.push(g.slice_rows(state_tok, b, 1)?);
    }
    let mut x = g.concat_rows(&parts)?;

    let mut valid = Vec::with_capacity(bsz * k);
    for t in instr {
        valid.extend(std::iter::repeat_n(true, m));
        valid.extend((0..li).map(|i| !t.is_pad(i)));
        valid.push(true);
    }
    let heads = cfg.heads;
    let mut mask = vec![0.0; bsz * heads * k * k];
    for b in 0..bsz {
        for j in 0..k {
            if !valid[b * k + j] {
                for h in 0..heads {
                    for q in 0..k {
                        mask[((b * heads + h) * k + q) * k + j] = f64::NEG_INFINITY;
                    }
                }
            }
        }
    }
    let any_pad = valid.iter().any(|v| !v);
    let mask = if any_pad { Some(g.constant(Tensor::new(&[bsz * heads, k, k], mask)?)) } else { None };

    let layout = Layout { groups: bsz, tokens: k };
    for i in 0..cfg.blocks {
        x = nn::block(g, p, &format!("backbone.block{i}"), x, layout, heads, mask, cfg.lora)?;
    }
    let z = nn::layer_norm(g, p, "backbone.ln_f", x)?;
    let z = if any_pad {
        let keep = Tensor::new(
            &[bsz * k, d],
            valid.iter().flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, d)).collect(),
        )?;
        let keep = g.constant(keep);
        g.mul(z, keep)?
    } else {
        z
    };
    let mut pool = vec![0.0; bsz * bsz * k];
    for b in 0..bsz {
        let n = valid[b * k..(b + 1) * k].iter().filter(|&&v| v).count() as f64;
        for j in 0..k {
            if valid[b * k + j] {
                pool[b * bsz * k + b * k + j] = 1.0 / n;
            }
        }
    }
    let pool = g.constant(Tensor::new(&[bsz, bsz * k], pool)?);
    let pooled = g.matmul(pool, z)?;
    Ok(ContextVars { z, pooled, valid })
}

/// Context embedding of one observation from its (fused or plain) visual tokens.
pub fn encode(
    visual: &TokenSet,
    instr: &InstructionTokens,
    state: &RobotState,
    params: &Checkpoint,
    cfg: &BackboneConfig,
) -> Result<ContextEmbedding> {
    if visual.dim() != cfg.width {
        return Err(Error::Config(format!("visual token width {} does not match backbone width {}", visual.dim(), cfg.width)));
    }
    let mut g = Graph::new();
    let p = params.bind_with(&mut g, |_| false);
    let v = g.constant(visual.values().clone());
    let out = encode_graph(&mut g, &p, cfg, v, std::slice::from_ref(instr), std::slice::from_ref(state))?;
    Ok(ContextEmbedding { z: g.value(out.z).clone(), valid: out.valid })
}

/// Names of trainable entries under `prefix`.
pub fn trainable_names<'a>(params: &'a Bundle, prefix: &str) -> Vec<&'a str> {
    params
        .entries()
        .iter()
        .filter(|e| e.trainable && e.name.starts_with(prefix))
        .map(|e| e.name.as_str())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuser::Stream;
    use crate::numerics::rng::{normal_tensor, stream};

    fn small() -> BackboneConfig {
        BackboneConfig { width: 8, heads: 2, mlp_hidden: 16, ..Default::default() }
    }

    fn inputs(cfg: &BackboneConfig, seed: u64) -> (TokenSet, InstructionTokens, RobotState) {
        let v = normal_tensor(&mut stream(seed, "vis", &[]), &[cfg.views, cfg.visual_tokens_per_view(), cfg.width], 1.0);
        (
            TokenSet::new(v, Stream::Fused).unwrap(),
            InstructionTokens::from_text("pick up the middle bottle", cfg.max_instr).unwrap(),
            RobotState { position: [0.01, -0.02, 0.1], aperture: 1.0 },
        )
    }

    #[test]
    fn context_length_default() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.context_len(), 41);
        let params = init_backbone(&cfg, 0).unwrap();
        let (v, i, s) = {
            let v = normal_tensor(&mut stream(1, "vis", &[]), &[2, 16, 64], 1.0);
            (
                TokenSet::new(v, Stream::Visual2D).unwrap(),
                InstructionTokens::from_text("insert the peg into the left hole", 8).unwrap(),
                RobotState { position: [0.0, 0.0, 0.1], aperture: 0.5 },
            )
        };
        let ctx = encode(&v, &i, &s, &params, &cfg).unwrap();
        assert_eq!(ctx.z.shape(), &[41, 64]);
        assert!(ctx.z.is_finite());
    }

    #[test]
    fn zero_adapters_match_plain_backbone() {
        let cfg = small();
        let with = init_backbone(&cfg, 3).unwrap();
        let without = init_backbone(&BackboneConfig { lora: None, ..cfg }, 3).unwrap();
        let (v, i, s) = inputs(&cfg, 4);
        let a = encode(&v, &i, &s, &with, &cfg).unwrap();
        let b = encode(&v, &i, &s, &without, &BackboneConfig { lora: None, ..cfg }).unwrap();
        assert!(a.z.max_abs_diff(&b.z) <= 1e-12);
    }

    #[test]
    fn padded_positions_do_not_leak() {
        let cfg = small();
        let mut params = init_backbone(&cfg, 5).unwrap();
        let (v, i, s) = inputs(&cfg, 6);
        let before = encode(&v, &i, &s, &params, &cfg).unwrap();
        // perturb the padding embedding row
        let table = params.get_mut("embed.instr").unwrap();
        for j in 0..cfg.width {
            table.data_mut()[j] += 3.0;
        }
        let after = encode(&v, &i, &s, &params, &cfg).unwrap();
        assert_eq!(before.z, after.z);
        assert!(!before.valid[2 * 16 + 6]);
    }

    #[test]
    fn init_is_deterministic_and_frozen_split() {
        let cfg = BackboneConfig::default();
        let a = init_backbone(&cfg, 11).unwrap();
        let b = init_backbone(&cfg, 11).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let backbone_trainable = trainable_names(&a, "backbone.");
        assert!(!backbone_trainable.is_empty());
        assert!(backbone_trainable.iter().all(|n| n.contains(".lora_")));
        assert!(trainable_names(&a, "vision.").is_empty());
        let lora: usize = a.entries().iter().filter(|e| e.name.contains(".lora_")).map(|e| e.value.len()).sum();
        assert!(a.frozen_count() > 10 * lora);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let cfg = small();
        let params = init_backbone(&cfg, 0).unwrap();
        let v = TokenSet::new(Tensor::zeros(&[2, 16, 4]), Stream::Fused).unwrap();
        let i = InstructionTokens::from_text("pick up", 8).unwrap();
        let s = RobotState { position: [0.0; 3], aperture: 0.0 };
        assert!(matches!(encode(&v, &i, &s, &params, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn tokenizer() {
        let t = InstructionTokens::from_text("Place the can on the shelf slot", 8).unwrap();
        assert_eq!(t.ids().len(), 8);
        assert_eq!(t.text(), "place the can on the shelf slot");
        assert!(InstructionTokens::from_text("a a a a a a a a a", 8).is_err());
    }
}
