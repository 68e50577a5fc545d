//! Plain-text `key = value` run configuration.

use std::fmt;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::expert::ExpertConfig;
use crate::geometry::GeoConfig;
use crate::nn::LoraSpec;
use crate::sim::Task;

use super::schedule::LrSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// 2D tokens go straight to the backbone.
    Baseline,
    /// 2D tokens attend to geometry tokens before the backbone.
    Fused,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "fused" => Ok(Variant::Fused),
            other => Err(Error::Config(format!("unknown variant `{other}`; expected baseline or fused"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Fused => "fused",
        })
    }
}

/// Architecture of the full policy.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub expert: ExpertConfig,
    pub geo: GeoConfig,
    pub fuser_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            expert: ExpertConfig::default(),
            geo: GeoConfig::default(),
            fuser_residual: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.geo.validate()?;
        let mut expert = self.expert.clone();
        expert.context_dim = self.backbone.width;
        expert.validate()?;
        if self.expert.context_dim != self.backbone.width {
            return Err(Error::Config(format!(
                "expert context width {} does not match backbone width {}",
                self.expert.context_dim, self.backbone.width
            )));
        }
        if self.geo.image != self.backbone.image || self.geo.patch != self.backbone.patch {
            return Err(Error::Config("geometry encoder and backbone disagree on image or patch size".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub clip: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Tasks trained jointly; one policy serves all of them.
    pub tasks: Vec<Task>,
    pub unfreeze_geo: bool,
    pub log_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 2.5e-5,
            lr_final: 2.5e-6,
            warmup_steps: 1000,
            weight_decay: 1e-10,
            batch_size: 32,
            total_steps: 5000,
            clip: 1.0,
            seed: 0,
            variant: Variant::Fused,
            tasks: Task::ALL.to_vec(),
            unfreeze_geo: false,
            log_every: 1,
            model: ModelConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
}

fn parse_tasks(v: &str) -> Result<Vec<Task>> {
    let mut tasks = v
        .split(',')
        .map(|s| parse::<u8>("train.tasks", s.trim()).and_then(Task::from_id))
        .collect::<Result<Vec<_>>>()?;
    tasks.sort();
    tasks.dedup();
    Ok(tasks)
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { warmup: self.warmup_steps, total: self.total_steps, peak: self.lr_peak, floor: self.lr_final }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final < self.lr_peak) {
            return Err(Error::Config(format!("lr_final {} must be below lr_peak {}", self.lr_final, self.lr_peak)));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks configured".into()));
        }
        self.model.validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "train.lr_peak" => self.lr_peak = parse(key, v)?,
            "train.lr_final" => self.lr_final = parse(key, v)?,
            "train.warmup_steps" => self.warmup_steps = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.total_steps" => self.total_steps = parse(key, v)?,
            "train.clip" => self.clip = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.variant" => self.variant = v.parse()?,
            "train.tasks" => self.tasks = parse_tasks(v)?,
            "train.unfreeze_geo" => self.unfreeze_geo = parse(key, v)?,
            "train.log_every" => self.log_every = parse(key, v)?,
            "backbone.width" => {
                m.backbone.width = parse(key, v)?;
                m.expert.context_dim = m.backbone.width;
            }
            "backbone.blocks" => m.backbone.blocks = parse(key, v)?,
            "backbone.heads" => m.backbone.heads = parse(key, v)?,
            "backbone.mlp_hidden" => m.backbone.mlp_hidden = parse(key, v)?,
            "lora.rank" => {
                let rank: usize = parse(key, v)?;
                let alpha = m.backbone.lora.map_or(8.0, |l| l.alpha);
                m.backbone.lora = (rank > 0).then_some(LoraSpec { rank, alpha });
            }
            "lora.alpha" => {
                let alpha: f64 = parse(key, v)?;
                if let Some(l) = m.backbone.lora.as_mut() {
                    l.alpha = alpha;
                }
            }
            "expert.horizon" => m.expert.horizon = parse(key, v)?,
            "expert.euler_steps" => m.expert.euler_steps = parse(key, v)?,
            "expert.hidden" => m.expert.hidden = parse(key, v)?,
            "geo.width" => m.geo.width = parse(key, v)?,
            "geo.blocks" => m.geo.blocks = parse(key, v)?,
            "geo.heads" => m.geo.heads = parse(key, v)?,
            "geo.mlp_hidden" => m.geo.mlp_hidden = parse(key, v)?,
            "geo.registers" => m.geo.registers = parse(key, v)?,
            "geo.extract_layer" => m.geo.extract_layer = parse(key, v)?,
            "fuser.residual" => m.fuser_residual = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Every setting as `key = value` pairs, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let tasks = self.tasks.iter().map(|t| t.id().to_string()).collect::<Vec<_>>().join(",");
        let lora = m.backbone.lora;
        let rows: Vec<(&str, String)> = vec![
            ("train.lr_peak", self.lr_peak.to_string()),
            ("train.lr_final", self.lr_final.to_string()),
            ("train.warmup_steps", self.warmup_steps.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.total_steps", self.total_steps.to_string()),
            ("train.clip", self.clip.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.variant", self.variant.to_string()),
            ("train.tasks", tasks),
            ("train.unfreeze_geo", self.unfreeze_geo.to_string()),
            ("train.log_every", self.log_every.to_string()),
            ("backbone.width", m.backbone.width.to_string()),
            ("backbone.blocks", m.backbone.blocks.to_string()),
            ("backbone.heads", m.backbone.heads.to_string()),
            ("backbone.mlp_hidden", m.backbone.mlp_hidden.to_string()),
            ("lora.rank", lora.map_or(0, |l| l.rank).to_string()),
            ("lora.alpha", lora.map_or(8.0, |l| l.alpha).to_string()),
            ("expert.horizon", m.expert.horizon.to_string()),
            ("expert.euler_steps", m.expert.euler_steps.to_string()),
            ("expert.hidden", m.expert.hidden.to_string()),
            ("geo.width", m.geo.width.to_string()),
            ("geo.blocks", m.geo.blocks.to_string()),
            ("geo.heads", m.geo.heads.to_string()),
            ("geo.mlp_hidden", m.geo.mlp_hidden.to_string()),
            ("geo.registers", m.geo.registers.to_string()),
            ("geo.extract_layer", m.geo.extract_layer.to_string()),
            ("fuser.residual", m.fuser_residual.to_string()),
        ];
        rows.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
