//! The full policy: frozen vision tower, optional geometry encoder and fuser,
//! LoRA-adapted backbone and flow-matching head, held in one checkpoint.

use crate::backbone::{self, InstructionTokens, RobotState};
use crate::error::{Error, Result};
use crate::expert::{self, ActionChunk};
use crate::fuser::{self, FuserConfig, FuserVars};
use crate::geometry;
use crate::numerics::{Bound, Bundle, Checkpoint, Graph, Tensor, Var};

use super::config::{ModelConfig, TrainConfig, Variant};

/// Per-observation inputs the trainable part of the model consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    /// `[V·M_2D, d]` frozen visual tokens.
    pub t2d: Tensor,
    /// `[V·M_3D, d_3D]` geometry tokens (fused variant with a frozen encoder).
    pub t3d: Option<Tensor>,
    /// Raw views, kept only when the geometry encoder is trained.
    pub images: Option<Tensor>,
}

/// One supervised example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<'a> {
    pub features: &'a Features,
    pub instruction: &'a InstructionTokens,
    pub state: &'a RobotState,
    /// `H × d_a` raw action chunk.
    pub target: &'a Tensor,
}

#[derive(Clone, Debug)]
pub struct VlaModel {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub params: Checkpoint,
}

impl VlaModel {
    /// Fresh model. Every parameter is seeded by `(seed, name)`, so the two
    /// variants agree on all shared entries.
    pub fn init(cfg: &ModelConfig, variant: Variant, seed: u64, geo: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let mut params = backbone::init_backbone(&cfg.backbone, seed)?;
        params.merge(&expert::init_expert(&cfg.expert, seed)?)?;
        let mut model = VlaModel { cfg: cfg.clone(), variant, params };
        if variant == Variant::Fused {
            let geo = geo.ok_or_else(|| Error::Config("the fused variant needs a geometry checkpoint".into()))?;
            check_geometry(geo, cfg)?;
            for e in geo.entries().iter().filter(|e| e.name.starts_with("geo.")) {
                model.params.put(&e.name, e.value.clone(), false)?;
            }
            let fcfg = model.fuser_config();
            fuser::register(&mut model.params, &fcfg, seed)?;
        }
        Ok(model)
    }

    pub fn fuser_config(&self) -> FuserConfig {
        FuserConfig {
            dim_2d: self.cfg.backbone.width,
            dim_3d: self.cfg.geo.width,
            dim: self.cfg.backbone.width,
            residual: self.cfg.fuser_residual,
        }
    }

    pub fn set_geometry_trainable(&mut self, on: bool) {
        self.params.set_trainable("geo.", on);
    }

    pub fn geometry_trainable(&self) -> bool {
        self.params.entries().iter().any(|e| e.trainable && e.name.starts_with("geo."))
    }

    /// Checkpoint with the run configuration recorded as metadata.
    pub fn to_checkpoint(&self, train: &TrainConfig) -> Checkpoint {
        let mut b = self.params.clone();
        b.set_meta("kind", "policy");
        for (k, v) in train.entries() {
            b.set_meta(&k, v);
        }
        b.set_meta("train.variant", self.variant);
        b
    }

    pub fn from_checkpoint(b: Checkpoint) -> Result<(Self, TrainConfig)> {
        if b.meta("kind") != Some("policy") {
            return Err(Error::Format("checkpoint is not a policy checkpoint".into()));
        }
        let mut cfg = TrainConfig::default();
        for (k, v) in b.meta_entries() {
            if k != "kind" {
                cfg.set(k, v)?;
            }
        }
        cfg.model.validate()?;
        let model = VlaModel { cfg: cfg.model.clone(), variant: cfg.variant, params: b };
        for name in ["vision.patch.w", "expert.fc1.w", "backbone.ln_f.g"] {
            model.params.get(name)?;
        }
        if model.variant == Variant::Fused {
            model.params.get(fuser::PARAM_NAMES[0])?;
            check_geometry(&model.params, &model.cfg)?;
        }
        Ok((model, cfg))
    }

    /// Flow-matching head parameters only.
    pub fn expert_params(&self) -> Result<Checkpoint> {
        let mut b = Bundle::new();
        for e in self.params.entries().iter().filter(|e| e.name.starts_with("expert.")) {
            b.insert(&e.name, e.value.clone(), e.trainable)?;
        }
        Ok(b)
    }

    /// Features of `scenes` observations stacked as `[scenes·V, H, W, 3]`.
    pub fn features(&self, images: &Tensor, scenes: usize) -> Result<Vec<Features>> {
        let views = self.cfg.backbone.views;
        if images.shape().len() != 4 || images.shape()[0] != scenes * views {
            return Err(Error::Shape(format!("{:?} is not {scenes} observations of {views} views", images.shape())));
        }
        let t2d = backbone::visual_tokens(images, &self.params, &self.cfg.backbone)?.into_values();
        let (m2, d) = (self.cfg.backbone.visual_tokens_per_view() * views, self.cfg.backbone.width);
        let t2d = t2d.reshaped(&[scenes * m2, d])?;
        let keep_images = self.variant == Variant::Fused && self.geometry_trainable();
        let t3d = if self.variant == Variant::Fused && !keep_images {
            Some(geometry::geometry_tokens(images, scenes, &self.params, &self.cfg.geo)?)
        } else {
            None
        };
        let m3 = self.cfg.geo.patches() * views;
        let per_image = images.len() / scenes;
        (0..scenes)
            .map(|s| {
                Ok(Features {
                    t2d: t2d.row_block(s * m2, m2),
                    t3d: t3d.as_ref().map(|t| t.row_block(s * m3, m3)),
                    images: keep_images.then(|| {
                        let shape = [views, images.shape()[1], images.shape()[2], 3];
                        Tensor::new(&shape, images.data()[s * per_image..(s + 1) * per_image].to_vec())
                    }).transpose()?,
                })
            })
            .collect()
    }

    /// Visual tokens entering the backbone, `[B·V·M_2D, d]`.
    pub fn visual_graph(&self, g: &mut Graph, p: &Bound, feats: &[&Features]) -> Result<Var> {
        let t2d = g.constant(stack(feats.iter().map(|f| &f.t2d))?);
        if self.variant == Variant::Baseline {
            return Ok(t2d);
        }
        let groups = feats.len() * self.cfg.backbone.views;
        let t3d = if feats.iter().all(|f| f.t3d.is_some()) {
            g.constant(stack(feats.iter().map(|f| f.t3d.as_ref().expect("checked")))?)
        } else {
            let images = stack4(feats.iter().map(|f| f.images.as_ref()))?;
            geometry::encode_graph(g, p, &self.cfg.geo, &images, feats.len())?.geometry
        };
        let (fused, _) = fuser::fuse_graph(g, t2d, t3d, &FuserVars::from_bound(p)?, groups, self.cfg.fuser_residual)?;
        let rows = g.value(t2d).rows();
        g.reshape(fused, &[rows, self.cfg.backbone.width])
    }

    /// Pooled context `[B, d]` for a batch of observations.
    pub fn context_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        feats: &[&Features],
        instr: &[InstructionTokens],
        states: &[RobotState],
    ) -> Result<Var> {
        let visual = self.visual_graph(g, p, feats)?;
        Ok(backbone::encode_graph(g, p, &self.cfg.backbone, visual, instr, states)?.pooled)
    }

    /// Mean flow-matching loss over `batch` with the given interpolation
    /// times and noise draws.
    pub fn loss_graph(&self, g: &mut Graph, p: &Bound, batch: &[Example], taus: &[f64], noises: &[&Tensor]) -> Result<Var> {
        let feats: Vec<&Features> = batch.iter().map(|e| e.features).collect();
        let instr: Vec<InstructionTokens> = batch.iter().map(|e| e.instruction.clone()).collect();
        let states: Vec<RobotState> = batch.iter().map(|e| *e.state).collect();
        let ctx = self.context_graph(g, p, &feats, &instr, &states)?;
        let targets: Vec<&Tensor> = batch.iter().map(|e| e.target).collect();
        expert::fm_loss_graph(g, p, &self.cfg.expert, Some(ctx), &targets, taus, noises)
    }

    pub fn loss(&self, batch: &[Example], taus: &[f64], noises: &[&Tensor]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind_with(&mut g, |_| false);
        let l = self.loss_graph(&mut g, &p, batch, taus, noises)?;
        Ok(g.value(l).data()[0])
    }

    pub fn context(&self, feats: &Features, instr: &InstructionTokens, state: &RobotState) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind_with(&mut g, |_| false);
        let c = self.context_graph(&mut g, &p, &[feats], std::slice::from_ref(instr), std::slice::from_ref(state))?;
        Ok(g.value(c).data().to_vec())
    }

    /// Samples one action chunk; `expert` is [`Self::expert_params`].
    pub fn act(
        &self,
        expert: &Checkpoint,
        feats: &Features,
        instr: &InstructionTokens,
        state: &RobotState,
        seed: u64,
    ) -> Result<ActionChunk> {
        let ctx = self.context(feats, instr, state)?;
        expert::sample_from_context(&ctx, self.cfg.expert.euler_steps, seed, expert, &self.cfg.expert)
    }
}

fn check_geometry(geo: &Checkpoint, cfg: &ModelConfig) -> Result<()> {
    let w = geo.get("geo.patch.w")?;
    let last = format!("geo.block{}.ln1.g", cfg.geo.blocks - 1);
    if w.shape() != [cfg.geo.patch_dim(), cfg.geo.width] || !geo.contains(&last) {
        return Err(Error::Config(format!(
            "geometry checkpoint (patch embedding {:?}) does not match width {} with {} blocks",
            w.shape(),
            cfg.geo.width,
            cfg.geo.blocks
        )));
    }
    Ok(())
}

fn stack<'a>(parts: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let parts: Vec<&Tensor> = parts.collect();
    let d = parts.first().map_or(0, |t| t.last_dim());
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&[data.len() / d.max(1), d], data)
}

fn stack4<'a>(parts: impl Iterator<Item = Option<&'a Tensor>>) -> Result<Tensor> {
    let parts = parts
        .map(|p| p.ok_or_else(|| Error::Config("features carry neither geometry tokens nor images".into())))
        .collect::<Result<Vec<_>>>()?;
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::new(&shape, parts.iter().flat_map(|t| t.data().iter().copied()).collect())
}
