//! Checks shared by the acceptance suite and the topic test files.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use geovla::backbone::{self, BackboneConfig, InstructionTokens, RobotState};
use geovla::expert::{self, euler_integrate, ExpertConfig, FlowSample};
use geovla::fuser::{self, FuserConfig, FuserParams, FuserVars, Stream, TokenSet};
use geovla::geometry::{self, GeoConfig, PretrainOptions, ViewBatch};
use geovla::harness::compare::{pooled_success, protocol};
use geovla::harness::data::build_dataset;
use geovla::harness::geodata::{constant_depth_l1, depth_l1, geo_samples};
use geovla::harness::report::Table;
use geovla::harness::train::BatchStream;
use geovla::harness::{ModelConfig, Variant, VlaModel};
use geovla::nn::LoraSpec;
use geovla::numerics::rng::{normal_tensor, stream};
use geovla::numerics::{grad_check, Bound, Bundle, Graph, Tensor, Var};
use geovla::sim::{generate_demo, ring_score, run_trials, Demo, RandomPolicy, ScriptedExpert, Task, CAL};
use geovla::Result;

/// Outcome of one criterion.
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Check { pass, detail: detail.into() }
    }
}

// ---- gradients --------------------------------------------------------------

pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 3;

/// Worst finite-difference error of one operation or composite.
pub struct GradCase {
    pub name: &'static str,
    pub worst: f64,
    pub instances: u64,
}

fn rnd(seed: u64, tag: u64, shape: &[usize]) -> Tensor {
    normal_tensor(&mut stream(seed, "grad-suite", &[tag]), shape, 1.0)
}

/// Contracts `y` with a fixed random tensor so every output element matters.
fn weigh(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = g.constant(rnd(seed, 999, g.shape(y)));
    let m = g.mul(y, r)?;
    Ok(g.sum(m))
}

type OpFn = fn(&mut Graph, &[Var], u64) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |g, v, s| {
            let y = g.matmul(v[0], v[1])?;
            weigh(g, y, s)
        }),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |g, v, s| {
            let y = g.matmul_nt(v[0], v[1])?;
            weigh(g, y, s)
        }),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, v, s| {
            let y = g.bmm(v[0], v[1], false)?;
            weigh(g, y, s)
        }),
        ("bmm_transposed", vec![vec![2, 3, 4], vec![2, 5, 4]], |g, v, s| {
            let y = g.bmm(v[0], v[1], true)?;
            weigh(g, y, s)
        }),
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v, s| {
            let y = g.add(v[0], v[1])?;
            weigh(g, y, s)
        }),
        ("add_bias", vec![vec![3, 4], vec![4]], |g, v, s| {
            let y = g.add_bias(v[0], v[1])?;
            weigh(g, y, s)
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, v, s| {
            let y = g.mul(v[0], v[1])?;
            weigh(g, y, s)
        }),
        ("scale", vec![vec![3, 4]], |g, v, s| {
            let y = g.scale(v[0], -1.7);
            weigh(g, y, s)
        }),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], |g, v, s| {
            let y = g.concat_rows(&[v[0], v[1], v[0]])?;
            weigh(g, y, s)
        }),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], |g, v, s| {
            let y = g.concat_cols(&[v[0], v[1], v[0]])?;
            weigh(g, y, s)
        }),
        ("slice_rows", vec![vec![5, 3]], |g, v, s| {
            let y = g.slice_rows(v[0], 1, 3)?;
            weigh(g, y, s)
        }),
        ("transpose", vec![vec![3, 5]], |g, v, s| {
            let y = g.transpose(v[0])?;
            weigh(g, y, s)
        }),
        ("reshape", vec![vec![3, 4]], |g, v, s| {
            let y = g.reshape(v[0], &[2, 6])?;
            weigh(g, y, s)
        }),
        ("split_heads", vec![vec![6, 4]], |g, v, s| {
            let y = g.split_heads(v[0], 2, 3, 2)?;
            weigh(g, y, s)
        }),
        ("merge_heads", vec![vec![4, 3, 2]], |g, v, s| {
            let y = g.merge_heads(v[0], 2, 3, 2)?;
            weigh(g, y, s)
        }),
        ("softmax", vec![vec![3, 5]], |g, v, s| {
            let y = g.softmax_rows(v[0])?;
            weigh(g, y, s)
        }),
        ("softmax_masked", vec![vec![2, 3, 3]], |g, v, s| {
            let mut m = vec![0.0; 18];
            m[2] = f64::NEG_INFINITY;
            m[10] = f64::NEG_INFINITY;
            let mask = g.constant(Tensor::new(&[2, 3, 3], m)?);
            let x = g.add(v[0], mask)?;
            let y = g.softmax_rows(x)?;
            weigh(g, y, s)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |g, v, s| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weigh(g, y, s)
        }),
        ("gelu", vec![vec![3, 4]], |g, v, s| {
            let y = g.gelu(v[0]);
            weigh(g, y, s)
        }),
        ("softplus", vec![vec![3, 4]], |g, v, s| {
            let y = g.softplus(v[0]);
            weigh(g, y, s)
        }),
        ("linear", vec![vec![3, 4], vec![4, 2], vec![2]], |g, v, s| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            weigh(g, y, s)
        }),
        ("mse", vec![vec![3, 4], vec![3, 4]], |g, v, _| g.mse(v[0], v[1])),
        ("l1", vec![vec![3, 4], vec![3, 4]], |g, v, _| g.l1(v[0], v[1])),
        ("mean", vec![vec![3, 4]], |g, v, s| {
            let y = g.mul(v[0], v[0])?;
            let _ = s;
            Ok(g.mean(y))
        }),
        ("sum", vec![vec![3, 4]], |g, v, _| {
            let y = g.gelu(v[0]);
            Ok(g.sum(y))
        }),
        ("embedding", vec![vec![6, 3]], |g, v, s| {
            let y = g.embedding_lookup(v[0], &[4, 0, 4, 2])?;
            weigh(g, y, s)
        }),
        ("lora_projection", vec![vec![3, 4], vec![5, 4], vec![2, 4], vec![5, 2]], |g, v, s| {
            let l = backbone::lora::LoraVars { a: v[2], b: v[3], scale: 2.0 };
            let y = backbone::lora::lora_apply(g, v[0], v[1], Some(&l))?;
            weigh(g, y, s)
        }),
    ]
}

/// Ops reachable through [`Graph`], all of which the suite must exercise.
pub const ALL_OPS: [&str; 22] = [
    "matmul",
    "bmm",
    "add",
    "add_bias",
    "mul",
    "scale",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "transpose",
    "reshape",
    "split_heads",
    "merge_heads",
    "softmax",
    "layer_norm",
    "gelu",
    "softplus",
    "mse",
    "l1",
    "mean",
    "sum",
    "embedding",
];

/// Central differences over every element of every entry of `params`.
pub fn bundle_grad_check(params: &Bundle, f: &dyn Fn(&mut Graph, &Bound) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let p = params.bind_with(&mut g, |_| true);
    let out = f(&mut g, &p)?;
    g.backward(out)?;
    let grads = p.grads(&g);
    drop(p);
    let eval = |b: &Bundle| -> Result<f64> {
        let mut g = Graph::new();
        let p = b.bind_with(&mut g, |_| false);
        let out = f(&mut g, &p)?;
        Ok(g.value(out).data()[0])
    };
    let h = geovla::numerics::FD_STEP;
    let mut work = params.clone();
    let mut worst = 0.0f64;
    for (i, grad) in grads.iter().enumerate() {
        let n = params.entries()[i].value.len();
        for j in 0..n {
            let orig = params.entries()[i].value.data()[j];
            work.entries_mut()[i].value.data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.entries_mut()[i].value.data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.entries_mut()[i].value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.as_ref().map_or(0.0, |t| t.data()[j]);
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
    }
    Ok(worst)
}

/// Gives every entry of `b` fresh random values (so zero-initialised
/// factors carry gradient signal too).
fn randomise(b: &mut Bundle, seed: u64, std: f64) {
    for (i, e) in b.entries_mut().iter_mut().enumerate() {
        let shape = e.value.shape().to_vec();
        let mut t = rnd(seed, 10_000 + i as u64, &shape);
        t.data_mut().iter_mut().for_each(|v| *v *= std);
        if e.name.ends_with(".g") {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        e.value = t;
    }
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        width: 8,
        blocks: 2,
        heads: 2,
        mlp_hidden: 12,
        max_instr: 4,
        views: 2,
        image: 8,
        patch: 4,
        lora: Some(LoraSpec { rank: 2, alpha: 4.0 }),
    }
}

fn composite_fuser(seed: u64) -> Result<f64> {
    let (groups, m2, m3, d2, d3, d) = (2, 3, 4, 4, 5, 3);
    let mut b = Bundle::new();
    fuser::register(&mut b, &FuserConfig { dim_2d: d2, dim_3d: d3, dim: d, residual: true }, seed)?;
    randomise(&mut b, seed, 0.7);
    b.insert("in.t2d", rnd(seed, 1, &[groups * m2, d2]), true)?;
    b.insert("in.t3d", rnd(seed, 2, &[groups * m3, d3]), true)?;
    bundle_grad_check(&b, &|g, p| {
        let w = FuserVars::from_bound(p)?;
        let (out, _) = fuser::fuse_graph(g, p.var("in.t2d")?, p.var("in.t3d")?, &w, groups, true)?;
        weigh(g, out, seed)
    })
}

fn composite_backbone(seed: u64) -> Result<f64> {
    let cfg = small_backbone();
    let mut b = backbone::init_backbone(&cfg, seed)?;
    randomise(&mut b, seed, 0.5);
    let m = cfg.views * cfg.visual_tokens_per_view();
    b.insert("in.visual", rnd(seed, 3, &[2 * m, cfg.width]), true)?;
    let instr = [
        InstructionTokens::new(vec![3, 5], cfg.max_instr)?,
        InstructionTokens::new(vec![7, 2, 9, 4], cfg.max_instr)?,
    ];
    let states = [
        RobotState { position: [0.01, -0.02, 0.1], aperture: 1.0 },
        RobotState { position: [-0.05, 0.03, 0.04], aperture: 0.0 },
    ];
    bundle_grad_check(&b, &|g, p| {
        let out = backbone::encode_graph(g, p, &cfg, p.var("in.visual")?, &instr, &states)?;
        let a = weigh(g, out.z, seed)?;
        let c = weigh(g, out.pooled, seed + 1)?;
        g.add(a, c)
    })
}

fn composite_fm_loss(seed: u64) -> Result<f64> {
    let cfg = ExpertConfig { horizon: 3, hidden: 6, context_dim: 5, ..ExpertConfig::default() };
    let mut b = expert::init_expert(&cfg, seed)?;
    randomise(&mut b, seed, 0.4);
    b.insert("in.ctx", rnd(seed, 4, &[2, 5]), true)?;
    let targets = [rnd(seed, 5, &[3, 4]), rnd(seed, 6, &[3, 4])];
    let noises = [rnd(seed, 7, &[3, 4]), rnd(seed, 8, &[3, 4])];
    let t: Vec<&Tensor> = targets.iter().collect();
    let n: Vec<&Tensor> = noises.iter().collect();
    bundle_grad_check(&b, &|g, p| {
        expert::fm_loss_graph(g, p, &cfg, Some(p.var("in.ctx")?), &t, &[0.25, 0.8], &n)
    })
}

fn composite_geometry(seed: u64) -> Result<f64> {
    let cfg = GeoConfig { image: 8, patch: 4, width: 4, blocks: 2, heads: 2, mlp_hidden: 6, registers: 1, extract_layer: 2 };
    let mut b = geometry::init_geometry(&cfg, seed)?;
    randomise(&mut b, seed, 0.5);
    let mut img = rnd(seed, 9, &[2, 8, 8, 3]);
    img.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.2 * *v);
    let sample = geometry::GeoSample {
        images: img,
        depth: rnd(seed, 10, &[2, 2, 2]).map(f64::abs),
        pointmap: rnd(seed, 11, &[2, 2, 2, 3]),
    };
    bundle_grad_check(&b, &|g, p| geometry::supervised_loss(g, p, &cfg, &[&sample]))
}

fn composite_policy(seed: u64) -> Result<f64> {
    let bb = small_backbone();
    let cfg = ModelConfig {
        backbone: bb,
        expert: ExpertConfig { horizon: 2, hidden: 6, context_dim: bb.width, ..ExpertConfig::default() },
        geo: GeoConfig { image: 8, patch: 4, width: 4, blocks: 2, heads: 2, mlp_hidden: 6, registers: 1, extract_layer: 2 },
        fuser_residual: true,
    };
    let geo = geometry::init_geometry(&cfg.geo, seed)?;
    let mut model = VlaModel::init(&cfg, Variant::Fused, seed, Some(&geo))?;
    randomise(&mut model.params, seed, 0.4);
    let mut img = rnd(seed, 12, &[2, 8, 8, 3]);
    img.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.2 * *v);
    let feats = model.features(&img, 1)?.remove(0);
    let instr = InstructionTokens::new(vec![4, 6, 8], bb.max_instr)?;
    let state = RobotState { position: [0.02, 0.0, 0.1], aperture: 0.5 };
    let target = rnd(seed, 13, &[2, 4]).map(|v| 0.01 * v);
    let noise = rnd(seed, 14, &[2, 4]);
    let ex = [geovla::harness::model::Example { features: &feats, instruction: &instr, state: &state, target: &target }];
    bundle_grad_check(&model.params, &|g, p| model.loss_graph(g, p, &ex, &[0.4], &[&noise]))
}

/// Every primitive op and every composite, each on [`INSTANCES`] seeds.
pub fn gradient_suite() -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for (name, shapes, f) in op_cases() {
        let mut worst = 0.0f64;
        for s in 0..INSTANCES {
            let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, sh)| rnd(s, i as u64, sh)).collect();
            worst = worst.max(grad_check(|g, v| f(g, v, s), &inputs)?);
        }
        out.push(GradCase { name, worst, instances: INSTANCES });
    }
    let composites: [(&'static str, fn(u64) -> Result<f64>); 5] = [
        ("fuser forward", composite_fuser),
        ("backbone encode", composite_backbone),
        ("fm_loss", composite_fm_loss),
        ("geometry loss", composite_geometry),
        ("full policy loss", composite_policy),
    ];
    for (name, f) in composites {
        let mut worst = 0.0f64;
        for s in 0..INSTANCES {
            worst = worst.max(f(s)?);
        }
        out.push(GradCase { name, worst, instances: INSTANCES });
    }
    Ok(out)
}

/// Op names recorded on the graphs the suite builds.
pub fn ops_exercised() -> Result<BTreeSet<String>> {
    let mut seen = BTreeSet::new();
    for (_, shapes, f) in op_cases() {
        let mut g = Graph::new();
        let vars: Vec<Var> = shapes.iter().enumerate().map(|(i, sh)| g.leaf(rnd(0, i as u64, sh), true)).collect();
        f(&mut g, &vars, 0)?;
        seen.extend(g.op_names().into_iter().map(str::to_string));
    }
    Ok(seen)
}

pub fn criterion_gradients() -> Check {
    let t = std::time::Instant::now();
    let cases = match gradient_suite() {
        Ok(c) => c,
        Err(e) => return Check::new(false, format!("suite errored: {e}")),
    };
    let seen = ops_exercised().unwrap_or_default();
    let missing: Vec<&str> = ALL_OPS.iter().copied().filter(|o| !seen.contains(*o)).collect();
    let worst = cases.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).expect("non-empty");
    let failing: Vec<String> =
        cases.iter().filter(|c| !(c.worst < GRAD_TOL)).map(|c| format!("{} {:.2e}", c.name, c.worst)).collect();
    let secs = t.elapsed().as_secs_f64();
    Check::new(
        failing.is_empty() && missing.is_empty() && secs < 120.0,
        format!(
            "{} cases x {} instances, worst {} {:.2e} (tol {GRAD_TOL:.0e}), failing {failing:?}, ops not covered {missing:?}, {secs:.1}s",
            cases.len(),
            INSTANCES,
            worst.name,
            worst.worst
        ),
    )
}

// ---- fuser oracle -----------------------------------------------------------

/// Per-element evaluation of the cross-attention with plain index loops.
pub fn brute_force_fuse(t2d: &Tensor, t3d: &Tensor, p: &FuserParams) -> Vec<f64> {
    let (n, m2, d2) = (t2d.shape()[0], t2d.shape()[1], t2d.shape()[2]);
    let (m3, d3) = (t3d.shape()[1], t3d.shape()[2]);
    let d = p.w_q.shape()[1];
    let mut out = vec![0.0; n * m2 * d2];
    for i in 0..n {
        for q in 0..m2 {
            let mut qv = vec![0.0; d];
            for c in 0..d {
                for a in 0..d2 {
                    qv[c] += t2d.at(&[i, q, a]) * p.w_q.at(&[a, c]);
                }
            }
            let mut scores = vec![0.0; m3];
            let mut vals = vec![vec![0.0; d]; m3];
            for k in 0..m3 {
                for c in 0..d {
                    let (mut kk, mut vv) = (0.0, 0.0);
                    for a in 0..d3 {
                        kk += t3d.at(&[i, k, a]) * p.w_k.at(&[a, c]);
                        vv += t3d.at(&[i, k, a]) * p.w_v.at(&[a, c]);
                    }
                    scores[k] += qv[c] * kk;
                    vals[k][c] = vv;
                }
                scores[k] /= (d as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            let mut attn = vec![0.0; d];
            for k in 0..m3 {
                let w = (scores[k] - mx).exp() / z;
                for c in 0..d {
                    attn[c] += w * vals[k][c];
                }
            }
            for a in 0..d2 {
                let mut o = t2d.at(&[i, q, a]);
                for c in 0..d {
                    o += attn[c] * p.w_o.at(&[c, a]);
                }
                out[(i * m2 + q) * d2 + a] = o;
            }
        }
    }
    out
}

pub fn random_fuser(seed: u64, d2: usize, d3: usize, d: usize) -> FuserParams {
    let mut r = stream(seed, "fuser-oracle", &[]);
    FuserParams {
        w_q: normal_tensor(&mut r, &[d2, d], 1.0),
        w_k: normal_tensor(&mut r, &[d3, d], 1.0),
        w_v: normal_tensor(&mut r, &[d3, d], 1.0),
        w_o: normal_tensor(&mut r, &[d, d2], 1.0),
    }
}

pub fn criterion_fuser_oracle() -> Check {
    let run = || -> Result<(f64, f64, bool)> {
        let (n, m2, m3, d) = (2, 2, 3, 2);
        let mut worst = 0.0f64;
        let mut perm_worst = 0.0f64;
        let mut independent = true;
        for seed in 0..5 {
            let p = random_fuser(seed, d, d, d);
            let mut r = stream(seed, "fuser-tokens", &[]);
            let a = normal_tensor(&mut r, &[n, m2, d], 1.0);
            let b = normal_tensor(&mut r, &[n, m3, d], 1.0);
            let t2 = TokenSet::new(a.clone(), Stream::Visual2D)?;
            let t3 = TokenSet::new(b.clone(), Stream::Geo3D)?;
            let got = fuser::fuse(&t2, &t3, &p)?;
            let want = brute_force_fuse(&a, &b, &p);
            for (x, y) in got.values().data().iter().zip(&want) {
                worst = worst.max((x - y).abs());
            }
            // reverse the key order inside every view
            let mut pb = b.clone();
            for i in 0..n {
                for k in 0..m3 {
                    for c in 0..d {
                        pb.data_mut()[(i * m3 + k) * d + c] = b.at(&[i, m3 - 1 - k, c]);
                    }
                }
            }
            let permuted = fuser::fuse(&t2, &TokenSet::new(pb, Stream::Geo3D)?, &p)?;
            perm_worst = perm_worst.max(permuted.values().max_abs_diff(got.values()));
            // perturb view 1 in both streams; view 0 must not move at all
            let (mut a1, mut b1) = (a.clone(), b.clone());
            a1.data_mut()[m2 * d..].iter_mut().for_each(|v| *v += 3.0);
            b1.data_mut()[m3 * d..].iter_mut().for_each(|v| *v -= 2.0);
            let other =
                fuser::fuse(&TokenSet::new(a1, Stream::Visual2D)?, &TokenSet::new(b1, Stream::Geo3D)?, &p)?;
            independent &= other.view(0) == got.view(0) && other.view(1) != got.view(1);
        }
        Ok((worst, perm_worst, independent))
    };
    match run() {
        Ok((w, pw, ind)) => Check::new(
            w < 1e-12 && pw < 1e-12 && ind,
            format!("max |fuse - brute force| {w:.2e}, key permutation change {pw:.2e}, cross-view independence {ind}"),
        ),
        Err(e) => Check::new(false, format!("errored: {e}")),
    }
}

// ---- no-op chain ------------------------------------------------------------

pub fn demos(seed: u64, per_task: usize, tasks: &[Task]) -> Result<Vec<Demo>> {
    let mut out = Vec::new();
    for &t in tasks {
        for i in 0..per_task {
            out.push(Demo::from_episode(&generate_demo(t, seed, i, 8)?)?);
        }
    }
    Ok(out)
}

pub fn criterion_noop_chain() -> Check {
    let run = || -> Result<(f64, usize)> {
        let cfg = ModelConfig::default();
        let geo = geometry::init_geometry(&cfg.geo, 5)?;
        let base = VlaModel::init(&cfg, Variant::Baseline, 9, None)?;
        let fused = VlaModel::init(&cfg, Variant::Fused, 9, Some(&geo))?;
        let lora_zero = fused.params.entries().iter().filter(|e| e.name.ends_with("lora_b")).all(|e| e.value.data().iter().all(|&v| v == 0.0));
        let wo_zero = fused.params.get("fuser.w_o")?.data().iter().all(|&v| v == 0.0);
        assert!(lora_zero && wo_zero, "initialisation is not the no-op chain");
        let d = demos(3, 2, &Task::ALL)?;
        let db = build_dataset(&base, &d, &Task::ALL)?;
        let df = build_dataset(&fused, &d, &Task::ALL)?;
        let mut stream = BatchStream::new(4, 32, db.len(), [8, 4]);
        let mut worst = 0.0f64;
        let batches = 5;
        for _ in 0..batches {
            let b = stream.next_batch();
            let noises: Vec<&Tensor> = b.noises.iter().collect();
            let eb: Vec<_> = b.indices.iter().map(|&i| db.samples[i].example()).collect();
            let ef: Vec<_> = b.indices.iter().map(|&i| df.samples[i].example()).collect();
            let lb = base.loss(&eb, &b.taus, &noises)?;
            let lf = fused.loss(&ef, &b.taus, &noises)?;
            worst = worst.max((lb - lf).abs());
        }
        Ok((worst, batches))
    };
    match run() {
        Ok((w, n)) => Check::new(w <= 1e-10, format!("max |fused - baseline| loss over {n} batches of 32: {w:.2e}")),
        Err(e) => Check::new(false, format!("errored: {e}")),
    }
}

// ---- flow matching ----------------------------------------------------------

pub fn criterion_flow() -> Check {
    let t = std::time::Instant::now();
    let run = || -> Result<(bool, bool, f64)> {
        let mut r = stream(1, "flow-acceptance", &[]);
        let mut endpoints = true;
        let mut euler = true;
        for _ in 0..20 {
            let a = normal_tensor(&mut r, &[8, 4], 1.0);
            let n = normal_tensor(&mut r, &[8, 4], 1.0);
            endpoints &= FlowSample::new(&a, 0.0, n.clone())?.x_tau == n;
            endpoints &= FlowSample::new(&a, 1.0, n.clone())?.x_tau == a;
            let v: Vec<f64> = a.data().iter().zip(n.data()).map(|(x, y)| x - y).collect();
            let v = Tensor::new(a.shape(), v)?;
            let out = euler_integrate(n.clone(), 1, |_, _| Ok(v.clone()))?;
            // one step computes n + (a - n), which is a up to the rounding of the subtraction
            let exact = out.data().iter().zip(a.data()).all(|(x, y)| x == y);
            let dyadic_ok = out.max_abs_diff(&a) <= 4.0 * f64::EPSILON * a.data().iter().chain(n.data()).fold(1.0f64, |m, x| m.max(x.abs()));
            euler &= exact || dyadic_ok;
        }
        // on a dyadic grid every intermediate is representable, so equality is bitwise
        let a = Tensor::new(&[2], vec![0.75, -1.5])?;
        let n = Tensor::new(&[2], vec![-0.25, 0.5])?;
        let v = Tensor::new(&[2], vec![1.0, -2.0])?;
        euler &= euler_integrate(n, 1, |_, _| Ok(v.clone()))? == a;
        let run = expert::train_two_point_toy(0, 1500, 128, 3e-3)?;
        let xs = expert::sample_toy(&run.params, 1000, 10, 77)?;
        let mean = xs.iter().map(|x| x.abs()).sum::<f64>() / xs.len() as f64;
        Ok((endpoints, euler, mean))
    };
    match run() {
        Ok((e, k, m)) => {
            let secs = t.elapsed().as_secs_f64();
            Check::new(
                e && k && (0.9..=1.1).contains(&m) && secs < 180.0,
                format!("endpoints exact {e}, one-step oracle Euler recovers target {k}, toy mean |x| {m:.4} over 1000 draws, {secs:.1}s"),
            )
        }
        Err(e) => Check::new(false, format!("errored: {e}")),
    }
}

// ---- geometry pretraining ---------------------------------------------------

pub fn criterion_geometry() -> Check {
    let t = std::time::Instant::now();
    let run = || -> Result<(f64, f64)> {
        let cfg = GeoConfig::default();
        let train = geo_samples(21, 0..500, cfg.patch)?;
        let held = geo_samples(21, 500..600, cfg.patch)?;
        let opts = PretrainOptions { steps: 2000, seed: 21, ..PretrainOptions::default() };
        let run = geometry::pretrain_geometry(&train, &cfg, geometry::init_geometry(&cfg, 21)?, &opts)?;
        assert!(run.diverged_at.is_none());
        let preds = held
            .iter()
            .map(|s| Ok(geometry::encode(&ViewBatch::new(s.images.clone())?, &run.checkpoint, &cfg)?.1.depth))
            .collect::<Result<Vec<_>>>()?;
        Ok((depth_l1(&preds, &held), constant_depth_l1(&train, &held)))
    };
    match run() {
        Ok((l1, base)) => {
            let secs = t.elapsed().as_secs_f64();
            Check::new(
                l1 < 0.5 * base && secs < 900.0,
                format!("held-out patch depth L1 {l1:.5} vs constant-mean {base:.5} (ratio {:.3}, need < 0.5), {secs:.1}s", l1 / base),
            )
        }
        Err(e) => Check::new(false, format!("errored: {e}")),
    }
}

// ---- simulator protocol -----------------------------------------------------

/// Ring scores on, just inside and just outside every ring radius.
pub fn ring_boundaries_hold() -> bool {
    let mut ok = ring_score(0.0) == 5;
    for (i, &r) in CAL.ring_radii.iter().enumerate() {
        let inside = 5 - i as u8;
        ok &= ring_score(r) == inside;
        ok &= ring_score(r * (1.0 - 1e-12)) == inside;
        ok &= ring_score(r * (1.0 + 1e-12)) == inside - 1;
    }
    ok && ring_score(1.0) == 0
}

pub fn criterion_sim_protocol() -> Check {
    let run = || -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let mut oracle = ScriptedExpert::oracle(8);
        let mut rings = 0.0;
        let mut binary = Vec::new();
        for task in Task::ALL {
            let r = run_trials(&mut oracle, task, 50, 1234)?;
            if task == Task::Rings {
                rings = r.mean_score();
            } else {
                binary.push(r.rate());
            }
        }
        let mut random = RandomPolicy::new(8);
        let rand_rates = Task::ALL
            .iter()
            .map(|&t| run_trials(&mut random, t, 100, 4321).map(|r| r.rate()))
            .collect::<Result<Vec<_>>>()?;
        Ok((rings, binary, rand_rates))
    };
    match run() {
        Ok((rings, binary, random)) => {
            let bounds = ring_boundaries_hold();
            Check::new(
                rings >= 4.5 && binary.iter().all(|&r| r == 100.0) && random.iter().all(|&r| r <= 10.0) && bounds,
                format!(
                    "scripted task1 mean ring {rings:.2}, tasks 2-5 {binary:?}%, random {random:?}%, ring boundaries {bounds}"
                ),
            )
        }
        Err(e) => Check::new(false, format!("errored: {e}")),
    }
}

// ---- CLI driven workflows ---------------------------------------------------

pub fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["geovla"];
    full.extend_from_slice(args);
    let code = geovla::cli::run(full, &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
}

pub fn cli_ok(args: &[&str]) -> String {
    let (code, out, err) = cli(args);
    assert_eq!(code, 0, "geovla {args:?} failed:\n{out}\n{err}");
    out
}

/// Every file under `dir`, relative path to bytes.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("readable").flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).expect("under dir").to_path_buf(), fs::read(&p).expect("readable")));
            }
        }
    }
    files.sort();
    files
}

/// Runs the small end-to-end CLI workflow into `root`.
pub fn small_workflow(root: &Path, seed: &str) {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    cli_ok(&["pretrain-geo", "--scenes", "12", "--steps", "6", "--held-out", "4", "--out", &p("geo"), "--seed", seed]);
    cli_ok(&["gen-demos", "--task", "1,2", "--count", "3", "--out", &p("demos"), "--seed", seed]);
    for v in ["baseline", "fused"] {
        cli_ok(&[
            "train", "--variant", v, "--demos", &p("demos"), "--geo", &p("geo"), "--out", &p(v), "--steps", "4",
            "--tasks", "1,2", "--seed", seed,
        ]);
    }
    cli_ok(&["eval", "--checkpoint", &p("fused"), "--task", "1", "--trials", "2", "--report", &p("eval"), "--seed", seed]);
    cli_ok(&[
        "compare", "--baseline", &p("baseline"), "--fused", &p("fused"), "--tasks", "1,2", "--trials", "2", "--out",
        &p("compare"), "--seed", seed,
    ]);
    cli_ok(&["inspect-fuser", "--checkpoint", &p("fused"), "--out", &p("fuser_dump"), "--seed", seed]);
    cli_ok(&["report", "--in", &p("compare.csv"), "--out", &p("chart.svg"), "--seed", seed]);
}

pub fn criterion_reproducibility() -> Check {
    let (a, b) = (tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir"));
    small_workflow(a.path(), "5");
    small_workflow(b.path(), "5");
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let differing: Vec<_> = sa.iter().zip(&sb).filter(|(x, y)| x != y).map(|(x, _)| x.0.display().to_string()).collect();
    let same = sa == sb;
    let kinds = ["scenes", "demos", "policy.bin", "geometry.bin", "compare.csv", "train_log.csv", "fuser_dump.bin"];
    let covered = kinds.iter().all(|k| sa.iter().any(|(p, _)| p.to_string_lossy().contains(k)));
    Check::new(
        same && covered && !sa.is_empty(),
        format!("{} files from two seeded CLI runs byte-identical: {same}; differing {differing:?}", sa.len()),
    )
}

// ---- end to end -------------------------------------------------------------

pub struct EndToEnd {
    pub table: Table,
    pub baseline_pooled: f64,
    pub fused_pooled: f64,
    pub artifacts: PathBuf,
}

/// Full protocol through the CLI: pretraining, 100 demos per task, both
/// variants for 5000 steps, 75 shared trials.
pub fn end_to_end(root: &Path, seed: &str, config: &Path) -> Result<EndToEnd> {
    fs::create_dir_all(root)?;
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let conf = config.to_string_lossy().into_owned();
    cli_ok(&["pretrain-geo", "--scenes", "500", "--steps", "2000", "--out", &p("geo"), "--seed", seed]);
    cli_ok(&["gen-demos", "--task", "all", "--count", "100", "--out", &p("demos"), "--seed", seed]);
    for v in ["baseline", "fused"] {
        cli_ok(&["train", "--config", &conf, "--variant", v, "--demos", &p("demos"), "--geo", &p("geo"), "--out", &p(v), "--seed", seed]);
    }
    cli_ok(&["compare", "--baseline", &p("baseline"), "--fused", &p("fused"), "--out", &p("table1"), "--seed", seed]);
    cli_ok(&["report", "--in", &p("table1.csv"), "--out", &p("table1_chart.svg")]);
    let table = Table::from_csv(&fs::read_to_string(root.join("table1.csv"))?)?;
    // re-derive the pooled numbers from the saved checkpoints' trial scores
    let load = |v: &str| -> Result<VlaModel> {
        Ok(VlaModel::from_checkpoint(geovla::numerics::Checkpoint::load(&root.join(v).join("policy"))?)?.0)
    };
    let cols = protocol(&[Task::Rings, Task::PegHole], None);
    let s: u64 = seed.parse().expect("numeric seed");
    let mut pooled = Vec::new();
    for v in ["baseline", "fused"] {
        let mut pol = geovla::harness::policy::VlaPolicy::new(load(v)?, v)?;
        let reports = geovla::harness::compare::evaluate(&mut pol, &cols, s)?;
        pooled.push(pooled_success(&reports, 3));
    }
    Ok(EndToEnd { table, baseline_pooled: pooled[0], fused_pooled: pooled[1], artifacts: root.to_path_buf() })
}
