//! Toy multi-view geometry transformer.
//!
//! Each view is cut into `p×p` patches, embedded, and prefixed with one
//! camera token and `R` register tokens. Blocks alternate between attention
//! inside each view (frame-wise) and attention across all tokens of all views
//! (global). Depth and pointmap heads read the geometry (patch) tokens and
//! exist only to supervise pretraining; downstream consumers take the tokens.
//!
//! There is no view-index embedding, so permuting the input views permutes the
//! outputs the same way.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::{self, init_const, init_normal, Layout, INIT_STD};
use crate::numerics::rng::stream;
use crate::numerics::{clip_grad_norm, AdamW, AdamWConfig, Bound, Bundle, Checkpoint, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeoConfig {
    pub image: usize,
    pub patch: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub registers: usize,
    /// 1-based block whose output is exported as tokens.
    pub extract_layer: usize,
}

impl Default for GeoConfig {
    fn default() -> Self {
        Self { image: 32, patch: 8, width: 64, blocks: 4, heads: 4, mlp_hidden: 128, registers: 2, extract_layer: 4 }
    }
}

impl GeoConfig {
    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens per view: camera + registers + patches.
    pub fn tokens_per_view(&self) -> usize {
        1 + self.registers + self.patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image % self.patch != 0 {
            return Err(Error::Config(format!("image size {} not divisible by patch {}", self.image, self.patch)));
        }
        if self.blocks == 0 || self.blocks % 2 != 0 {
            return Err(Error::Config(format!("geometry blocks must be a positive even count, got {}", self.blocks)));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.extract_layer == 0 || self.extract_layer > self.blocks {
            return Err(Error::Config(format!("extract layer {} outside 1..={}", self.extract_layer, self.blocks)));
        }
        Ok(())
    }
}

/// `N × H × W × 3` images with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    images: Tensor,
}

impl ViewBatch {
    pub fn new(images: Tensor) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::Shape(format!("views must be N×H×W×3, got {s:?}")));
        }
        Ok(Self { images })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn views(&self) -> usize {
        self.images.shape()[0]
    }
}

/// Final-layer tokens of every view.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoTokens {
    /// `N × 1 × d`
    pub camera: Tensor,
    /// `N × R × d`
    pub register: Tensor,
    /// `N × M × d`
    pub geometry: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoPrediction {
    /// `N × g × g`
    pub depth: Tensor,
    /// `N × g × g × 3`, world frame
    pub pointmap: Tensor,
}

/// Row `r`, column `c` of a patch index on a grid `grid_w` patches wide.
pub fn patch_coords(index: usize, grid_w: usize) -> (usize, usize) {
    (index / grid_w, index % grid_w)
}

pub fn patch_index(row: usize, col: usize, grid_w: usize) -> usize {
    row * grid_w + col
}

/// Splits one `H × W × C` view into non-overlapping `p × p` patches,
/// flattened `(dy, dx, c)`, in row-major patch order.
pub fn patchify(view: &Tensor, patch: usize) -> Result<Tensor> {
    let s = view.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("view must be H×W×C, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!("view {h}×{w} not divisible into {patch}×{patch} patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(h * w * c);
    for pi in 0..gh * gw {
        let (pr, pc) = patch_coords(pi, gw);
        for dy in 0..patch {
            let row = pr * patch + dy;
            let start = (row * w + pc * patch) * c;
            out.extend_from_slice(&view.data()[start..start + patch * c]);
        }
    }
    Tensor::new(&[gh * gw, patch * patch * c], out)
}

/// Patchifies a stack of views `[V, H, W, 3]` into `[V·M, p·p·3]`.
pub fn patchify_stack(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected V×H×W×C views, got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    let mut data = Vec::with_capacity(images.len());
    let mut rows = 0;
    let mut cols = 0;
    for v in 0..s[0] {
        let view = Tensor::new(&s[1..], images.data()[v * per..(v + 1) * per].to_vec())?;
        let p = patchify(&view, patch)?;
        rows += p.shape()[0];
        cols = p.shape()[1];
        data.extend(p.into_data());
    }
    Tensor::new(&[rows, cols], data)
}

/// Averages a `H × W × C` map over `p × p` patches into `H/p × W/p × C`.
pub fn patch_average(map: &Tensor, patch: usize) -> Result<Tensor> {
    let s = map.shape();
    let (h, w, c) = match s.len() {
        2 => (s[0], s[1], 1),
        3 => (s[0], s[1], s[2]),
        _ => return Err(Error::Shape(format!("map must be H×W or H×W×C, got {s:?}"))),
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!("map {h}×{w} not divisible by {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = vec![0.0; gh * gw * c];
    for y in 0..h {
        for x in 0..w {
            let o = ((y / patch) * gw + x / patch) * c;
            for k in 0..c {
                out[o + k] += map.data()[(y * w + x) * c + k];
            }
        }
    }
    let n = (patch * patch) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    let shape: Vec<usize> = if s.len() == 2 { vec![gh, gw] } else { vec![gh, gw, c] };
    Tensor::new(&shape, out)
}

/// Fresh encoder parameters, all trainable, under the `geo.` prefix.
pub fn init_geometry(cfg: &GeoConfig, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut b = Bundle::new();
    let d = cfg.width;
    init_normal(&mut b, seed, "geo.patch.w", &[cfg.patch_dim(), d], INIT_STD, true)?;
    init_const(&mut b, "geo.patch.b", &[d], 0.0, true)?;
    init_normal(&mut b, seed, "geo.pos", &[cfg.patches(), d], INIT_STD, true)?;
    init_normal(&mut b, seed, "geo.camera", &[1, d], INIT_STD, true)?;
    init_normal(&mut b, seed, "geo.register", &[cfg.registers.max(1), d], INIT_STD, true)?;
    for i in 0..cfg.blocks {
        nn::init_block(&mut b, seed, &format!("geo.block{i}"), d, cfg.mlp_hidden, true, None)?;
    }
    init_const(&mut b, "geo.ln_f.g", &[d], 1.0, true)?;
    init_const(&mut b, "geo.ln_f.b", &[d], 0.0, true)?;
    init_normal(&mut b, seed, "geo.head.depth.w", &[d, 1], INIT_STD, true)?;
    init_const(&mut b, "geo.head.depth.b", &[1], 0.0, true)?;
    init_normal(&mut b, seed, "geo.head.point.w", &[d, 3], INIT_STD, true)?;
    init_const(&mut b, "geo.head.point.b", &[3], 0.0, true)?;
    b.set_meta("kind", "geometry");
    Ok(b)
}

/// Whether block `i` (0-based) attends within each view.
pub fn is_frame_block(i: usize) -> bool {
    i % 2 == 0
}

/// Runs `blocks` alternating blocks over `x: [scenes·views·T, d]`.
pub fn alternating_encode(
    g: &mut Graph,
    p: &Bound,
    cfg: &GeoConfig,
    x: Var,
    scenes: usize,
    views: usize,
    blocks: usize,
) -> Result<Var> {
    let t = cfg.tokens_per_view();
    if g.value(x).rows() != scenes * views * t {
        return Err(Error::Shape(format!("{:?} is not {scenes}×{views}×{t} tokens", g.shape(x))));
    }
    let mut h = x;
    for i in 0..blocks {
        let layout = if is_frame_block(i) {
            Layout { groups: scenes * views, tokens: t }
        } else {
            Layout { groups: scenes, tokens: views * t }
        };
        h = nn::block(g, p, &format!("geo.block{i}"), h, layout, cfg.heads, None, None)?;
    }
    Ok(h)
}

/// Graph outputs of one encoder pass.
pub struct GeoVars {
    /// `[scenes·views·T, d]` tokens from the extraction layer (normalised).
    pub tokens: Var,
    /// `[scenes·views·M, d]` geometry tokens only.
    pub geometry: Var,
    /// `[scenes·views·M, 1]`
    pub depth: Var,
    /// `[scenes·views·M, 3]`
    pub points: Var,
}

/// Token sequence before the first block: per view `[camera, registers, patches + pos]`.
pub fn embed_views(g: &mut Graph, p: &Bound, cfg: &GeoConfig, images: &Tensor) -> Result<Var> {
    let nviews = images.shape()[0];
    let m = cfg.patches();
    if images.shape()[1] != cfg.image || images.shape()[2] != cfg.image {
        return Err(Error::Config(format!("views {:?} do not match image size {}", images.shape(), cfg.image)));
    }
    let patches = g.constant(patchify_stack(images, cfg.patch)?);
    let pe = g.linear(patches, p.var("geo.patch.w")?, Some(p.var("geo.patch.b")?))?;
    let pos = p.var("geo.pos")?;
    let posrep = g.concat_rows(&vec![pos; nviews])?;
    let pe = g.add(pe, posrep)?;
    let cam = p.var("geo.camera")?;
    let reg = p.var("geo.register")?;
    let reg = g.slice_rows(reg, 0, cfg.registers.max(1))?;
    let mut parts = Vec::with_capacity(nviews * 3);
    for v in 0..nviews {
        parts.push(cam);
        if cfg.registers > 0 {
            parts.push(reg);
        }
        parts.push(g.slice_rows(pe, v * m, m)?);
    }
    g.concat_rows(&parts)
}

pub fn encode_graph(g: &mut Graph, p: &Bound, cfg: &GeoConfig, images: &Tensor, scenes: usize) -> Result<GeoVars> {
    cfg.validate()?;
    let nviews = images.shape()[0];
    if scenes == 0 || nviews % scenes != 0 {
        return Err(Error::Shape(format!("{nviews} views do not split into {scenes} scenes")));
    }
    let views = nviews / scenes;
    let x = embed_views(g, p, cfg, images)?;
    let h = alternating_encode(g, p, cfg, x, scenes, views, cfg.extract_layer)?;
    let tokens = nn::layer_norm(g, p, "geo.ln_f", h)?;
    let (t, m, skip) = (cfg.tokens_per_view(), cfg.patches(), 1 + cfg.registers);
    let parts = (0..nviews).map(|v| g.slice_rows(tokens, v * t + skip, m)).collect::<Result<Vec<_>>>()?;
    let geometry = g.concat_rows(&parts)?;
    let depth = g.linear(geometry, p.var("geo.head.depth.w")?, Some(p.var("geo.head.depth.b")?))?;
    let depth = g.softplus(depth);
    let points = g.linear(geometry, p.var("geo.head.point.w")?, Some(p.var("geo.head.point.b")?))?;
    Ok(GeoVars { tokens, geometry, depth, points })
}

/// Pure forward pass for one multi-view observation.
pub fn encode(views: &ViewBatch, params: &Checkpoint, cfg: &GeoConfig) -> Result<(GeoTokens, GeoPrediction)> {
    let mut g = Graph::new();
    let p = params.bind_with(&mut g, |_| false);
    let out = encode_graph(&mut g, &p, cfg, views.images(), 1)?;
    let n = views.views();
    let (t, m, r, d, gr) = (cfg.tokens_per_view(), cfg.patches(), cfg.registers, cfg.width, cfg.grid());
    let tok = g.value(out.tokens);
    let mut camera = Vec::with_capacity(n * d);
    let mut register = Vec::with_capacity(n * r * d);
    for v in 0..n {
        camera.extend_from_slice(&tok.data()[v * t * d..(v * t + 1) * d]);
        register.extend_from_slice(&tok.data()[(v * t + 1) * d..(v * t + 1 + r) * d]);
    }
    let tokens = GeoTokens {
        camera: Tensor::new(&[n, 1, d], camera)?,
        register: if r > 0 { Tensor::new(&[n, r, d], register)? } else { Tensor::zeros(&[n, 1, d]) },
        geometry: g.value(out.geometry).clone().reshaped(&[n, m, d])?,
    };
    let pred = GeoPrediction {
        depth: g.value(out.depth).clone().reshaped(&[n, gr, gr])?,
        pointmap: g.value(out.points).clone().reshaped(&[n, gr, gr, 3])?,
    };
    Ok((tokens, pred))
}

/// Geometry tokens `[V·M, d]` for a stack of views grouped into `scenes`.
pub fn geometry_tokens(images: &Tensor, scenes: usize, params: &Checkpoint, cfg: &GeoConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_with(&mut g, |_| false);
    let out = encode_graph(&mut g, &p, cfg, images, scenes)?;
    Ok(g.value(out.geometry).clone())
}

/// One supervised scene: views plus patch-resolution depth and pointmap.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoSample {
    /// `N × H × W × 3`
    pub images: Tensor,
    /// `N × g × g`
    pub depth: Tensor,
    /// `N × g × g × 3`
    pub pointmap: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self { steps: 2000, batch: 8, lr: 1e-3, warmup: 100, seed: 0 }
    }
}

#[derive(Debug)]
pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    /// Set when a non-finite loss stopped training; `checkpoint` then holds
    /// the last parameters that produced a finite loss.
    pub diverged_at: Option<usize>,
}

fn stack(samples: &[&GeoSample], pick: impl Fn(&GeoSample) -> &Tensor) -> Result<Tensor> {
    let first = pick(samples[0]);
    let mut shape = first.shape().to_vec();
    shape[0] *= samples.len();
    let data = samples.iter().flat_map(|s| pick(s).data().iter().copied()).collect();
    Tensor::new(&shape, data)
}

/// Depth + pointmap L1 loss on a batch of scenes.
pub fn supervised_loss(g: &mut Graph, p: &Bound, cfg: &GeoConfig, batch: &[&GeoSample]) -> Result<Var> {
    let images = stack(batch, |s| &s.images)?;
    let out = encode_graph(g, p, cfg, &images, batch.len())?;
    let rows = g.value(out.depth).rows();
    let depth_gt = g.constant(stack(batch, |s| &s.depth)?.reshaped(&[rows, 1])?);
    let points_gt = g.constant(stack(batch, |s| &s.pointmap)?.reshaped(&[rows, 3])?);
    let ld = g.l1(out.depth, depth_gt)?;
    let lp = g.l1(out.points, points_gt)?;
    g.add(ld, lp)
}

/// Minimises depth + pointmap L1 with AdamW (linear warmup, cosine decay to
/// a tenth of the peak rate).
pub fn pretrain_geometry(
    samples: &[GeoSample],
    cfg: &GeoConfig,
    init: Checkpoint,
    opts: &PretrainOptions,
) -> Result<PretrainRun> {
    if opts.steps > 0 && samples.is_empty() {
        return Err(Error::Config("geometry pretraining needs at least one scene".into()));
    }
    let mut params = init;
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut rng = stream(opts.seed, "geo-pretrain", &[]);
    let mut losses = Vec::with_capacity(opts.steps);
    let batch = opts.batch.max(1).min(samples.len().max(1));
    for step in 0..opts.steps {
        let picks: Vec<&GeoSample> = (0..batch).map(|_| &samples[rng.random_range(0..samples.len())]).collect();
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let loss = supervised_loss(&mut g, &p, cfg, &picks)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Ok(PretrainRun { checkpoint: params, losses, diverged_at: Some(step) });
        }
        g.backward(loss)?;
        let mut grads = p.grads(&g);
        drop(p);
        clip_grad_norm(&mut grads, 1.0);
        let lr = crate::harness::schedule::warmup_cosine(step + 1, opts.warmup, opts.steps, opts.lr, opts.lr * 0.1);
        // a rejected step leaves the parameters untouched
        if opt.step(&mut params, &grads, lr).is_err() {
            return Ok(PretrainRun { checkpoint: params, losses, diverged_at: Some(step) });
        }
        losses.push(value);
    }
    Ok(PretrainRun { checkpoint: params, losses, diverged_at: None })
}
