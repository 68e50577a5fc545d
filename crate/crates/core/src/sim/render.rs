//! Pinhole ray caster for the tabletop.
//!
//! Each pixel casts one ray through its centre and keeps the nearest hit.
//! Depth is measured along the optical axis; the pointmap is the
//! back-projection of that depth, so reprojecting it lands on the same pixel.

use rand::Rng as _;

use super::scene::{Scene, Shape, Target, CAL};
use super::world::GripperState;
use crate::error::Result;
use crate::geometry::patch_average;
use crate::numerics::rng::{normal, stream, Rng};
use crate::numerics::Tensor;

/// Depth recorded where a ray hits nothing.
pub const FAR: f64 = 2.0;
pub const TABLE_HALF: f64 = 0.4;
pub const BACKGROUND: [f64; 3] = [0.78, 0.82, 0.9];
const EPS: f64 = 1e-9;

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn mul(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
fn unit(a: V3) -> V3 {
    mul(a, 1.0 / dot(a, a).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub eye: V3,
    pub forward: V3,
    pub right: V3,
    pub up: V3,
    /// Focal length in pixels.
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn look_at(eye: V3, target: V3, fov_deg: f64, size: usize) -> Self {
        let forward = unit(sub(target, eye));
        let world_up = if forward[2].abs() > 0.999 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
        let right = unit(cross(forward, world_up));
        let up = cross(right, forward);
        let focal = 0.5 * size as f64 / (0.5 * fov_deg.to_radians()).tan();
        Camera { eye, forward, right, up, focal, width: size, height: size }
    }

    /// Camera on a sphere around `target`; azimuth 0 looks along `-x`.
    pub fn orbit(target: V3, distance: f64, azimuth_deg: f64, elevation_deg: f64, fov_deg: f64, size: usize) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let offset = [distance * az.cos() * el.cos(), distance * az.sin() * el.cos(), distance * el.sin()];
        Self::look_at(add(target, offset), target, fov_deg, size)
    }

    /// The two observation cameras: front (30° elevation) and a side view
    /// rotated 60° in azimuth.
    pub fn rig(size: usize) -> [Camera; 2] {
        let target = [0.0, 0.0, 0.03];
        [
            Camera::orbit(target, 0.42, 180.0, 30.0, 45.0, size),
            Camera::orbit(target, 0.42, 120.0, 40.0, 45.0, size),
        ]
    }

    /// Ray through the centre of pixel `(row, col)`, scaled so its component
    /// along `forward` is one.
    pub fn ray(&self, row: usize, col: usize) -> V3 {
        let x = (col as f64 + 0.5 - 0.5 * self.width as f64) / self.focal;
        let y = (row as f64 + 0.5 - 0.5 * self.height as f64) / self.focal;
        add(self.forward, sub(mul(self.right, x), mul(self.up, y)))
    }

    /// Continuous `(row, col)` image coordinates, `None` behind the camera.
    pub fn project(&self, p: V3) -> Option<(f64, f64)> {
        let d = sub(p, self.eye);
        let z = dot(d, self.forward);
        if z <= EPS {
            return None;
        }
        let col = dot(d, self.right) / z * self.focal + 0.5 * self.width as f64;
        let row = -dot(d, self.up) / z * self.focal + 0.5 * self.height as f64;
        Some((row, col))
    }

    pub fn pixel_of(&self, p: V3) -> Option<(usize, usize)> {
        let (r, c) = self.project(p)?;
        if r < 0.0 || c < 0.0 || r >= self.height as f64 || c >= self.width as f64 {
            return None;
        }
        Some((r.floor() as usize, c.floor() as usize))
    }
}

/// One rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `H × W × 3` in `[0, 1]`
    pub image: Tensor,
    /// `H × W`
    pub depth: Tensor,
    /// `H × W × 3` world coordinates
    pub pointmap: Tensor,
    pub foreground: Vec<bool>,
}

enum Geom {
    Cyl { base: V3, axis: V3, radius: f64, height: f64 },
    Box { min: V3, max: V3 },
    Sphere { center: V3, radius: f64 },
}

enum Mark {
    Plain,
    Holes([[f64; 2]; 3]),
    Slot([f64; 2]),
}

struct Prim {
    geom: Geom,
    color: V3,
    alpha: f64,
    mark: Mark,
}

struct Hit {
    t: f64,
    normal: V3,
    prim: Option<usize>,
}

fn hit_disc(o: V3, d: V3, c: V3, n: V3, r: f64) -> Option<f64> {
    let dn = dot(d, n);
    if dn.abs() < EPS {
        return None;
    }
    let t = dot(sub(c, o), n) / dn;
    let p = add(o, mul(d, t));
    let q = sub(p, c);
    (t > EPS && dot(q, q) <= r * r).then_some(t)
}

fn intersect(g: &Geom, o: V3, d: V3) -> Option<(f64, V3)> {
    match *g {
        Geom::Sphere { center, radius } => {
            let w = sub(o, center);
            let (a, b, c) = (dot(d, d), 2.0 * dot(d, w), dot(w, w) - radius * radius);
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)].into_iter().find(|&t| t > EPS)?;
            Some((t, unit(sub(add(o, mul(d, t)), center))))
        }
        Geom::Box { min, max } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis0 = 0;
            for k in 0..3 {
                if d[k].abs() < EPS {
                    if o[k] < min[k] || o[k] > max[k] {
                        return None;
                    }
                    continue;
                }
                let (mut a, mut b) = ((min[k] - o[k]) / d[k], (max[k] - o[k]) / d[k]);
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                if a > t0 {
                    t0 = a;
                    axis0 = k;
                }
                t1 = t1.min(b);
            }
            if t0 > t1 || t0 <= EPS {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis0] = -d[axis0].signum();
            Some((t0, n))
        }
        Geom::Cyl { base, axis, radius, height } => {
            let w = sub(o, base);
            let dp = sub(d, mul(axis, dot(d, axis)));
            let wp = sub(w, mul(axis, dot(w, axis)));
            let mut best: Option<(f64, V3)> = None;
            let a = dot(dp, dp);
            if a > EPS {
                let b = 2.0 * dot(dp, wp);
                let c = dot(wp, wp) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let s = disc.sqrt();
                    for t in [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)] {
                        if t <= EPS {
                            continue;
                        }
                        let h = dot(add(w, mul(d, t)), axis);
                        if (0.0..=height).contains(&h) {
                            let n = unit(add(wp, mul(dp, t)));
                            best = Some((t, n));
                            break;
                        }
                    }
                }
            }
            for (c, n) in [(base, mul(axis, -1.0)), (add(base, mul(axis, height)), axis)] {
                if let Some(t) = hit_disc(o, d, c, n, radius) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, n));
                    }
                }
            }
            best
        }
    }
}

fn object_prims(scene: &Scene) -> Vec<Prim> {
    let mut prims = Vec::new();
    for (i, o) in scene.objects.iter().enumerate() {
        let mark = match scene.target {
            Target::Hole { board, holes, .. } if board == i => Mark::Holes(holes),
            Target::Slot { shelf, center } if shelf == i => Mark::Slot([center[0], center[1]]),
            _ => Mark::Plain,
        };
        let (radius, height) = (o.shape.radius(), o.shape.height());
        let (base, axis) = if o.fallen {
            ([o.pos[0] - 0.5 * height, o.pos[1], o.pos[2] + radius], [1.0, 0.0, 0.0])
        } else {
            (o.pos, [0.0, 0.0, 1.0])
        };
        let mut push = |geom| prims.push(Prim { geom, color: o.color, alpha: o.alpha, mark: Mark::Plain });
        match o.shape {
            Shape::Cylinder { .. } => push(Geom::Cyl { base, axis, radius, height }),
            Shape::Bottle { .. } => {
                push(Geom::Cyl { base, axis, radius, height: 0.75 * height });
                let neck = add(base, mul(axis, 0.75 * height));
                push(Geom::Cyl { base: neck, axis, radius: 0.45 * radius, height: 0.25 * height });
            }
            Shape::Box { half } => {
                let min = [o.pos[0] - half[0], o.pos[1] - half[1], o.pos[2]];
                let max = [o.pos[0] + half[0], o.pos[1] + half[1], o.pos[2] + 2.0 * half[2]];
                prims.push(Prim { geom: Geom::Box { min, max }, color: o.color, alpha: o.alpha, mark });
            }
        }
    }
    prims
}

fn gripper_prim(gr: &GripperState) -> Prim {
    let color = if gr.aperture >= 0.5 { [0.95, 0.85, 0.2] } else { [0.95, 0.45, 0.1] };
    Prim { geom: Geom::Sphere { center: gr.position, radius: 0.01 }, color, alpha: 1.0, mark: Mark::Plain }
}

fn nearest(prims: &[Prim], table: bool, o: V3, d: V3, opaque_only: bool) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    if table && d[2] < -EPS {
        let t = -o[2] / d[2];
        let p = add(o, mul(d, t));
        if t > EPS && p[0].abs() <= TABLE_HALF && p[1].abs() <= TABLE_HALF {
            best = Some(Hit { t, normal: [0.0, 0.0, 1.0], prim: None });
        }
    }
    for (i, pr) in prims.iter().enumerate() {
        if opaque_only && pr.alpha < 1.0 {
            continue;
        }
        if let Some((t, normal)) = intersect(&pr.geom, o, d) {
            if best.as_ref().is_none_or(|b| t < b.t) {
                best = Some(Hit { t, normal, prim: Some(i) });
            }
        }
    }
    best
}

fn table_color(scene: &Scene, p: V3) -> V3 {
    if let Target::Rings { center } = scene.target {
        let r = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
        if let Some(band) = CAL.ring_radii.iter().position(|&rr| r <= rr) {
            return if band % 2 == 0 { [0.9, 0.15, 0.15] } else { [0.97, 0.97, 0.97] };
        }
    }
    let cell = (p[0] / 0.05).floor() as i64 + (p[1] / 0.05).floor() as i64;
    if cell.rem_euclid(2) == 0 {
        [0.62, 0.6, 0.56]
    } else {
        [0.7, 0.68, 0.64]
    }
}

fn shade(scene: &Scene, prims: &[Prim], hit: &Hit, p: V3) -> V3 {
    let light = unit([-0.3, 0.4, 1.0]);
    let lambert = 0.55 + 0.45 * dot(hit.normal, light).max(0.0);
    let base = match hit.prim {
        None => table_color(scene, p),
        Some(i) => {
            let pr = &prims[i];
            let top = hit.normal[2] > 0.5;
            match pr.mark {
                Mark::Holes(holes) if top => {
                    let inside = holes.iter().any(|h| (p[0] - h[0]).powi(2) + (p[1] - h[1]).powi(2) <= CAL.hole_radius.powi(2));
                    if inside {
                        [0.08, 0.06, 0.05]
                    } else {
                        pr.color
                    }
                }
                Mark::Slot(c) if top && (p[0] - c[0]).abs() <= 0.02 && (p[1] - c[1]).abs() <= 0.02 => [0.2, 0.8, 0.3],
                _ => pr.color,
            }
        }
    };
    mul(base, lambert)
}

/// Renders `scene` (plus the gripper, if given) from `camera`.
///
/// Transparent objects blend with what lies behind them, receive additive
/// glare and, with fixed probability per pixel, let the depth reading pass
/// through to the surface behind. Those draws come from a stream keyed by
/// the scene's noise seed, `view` and `frame`.
pub fn render(scene: &Scene, gripper: Option<&GripperState>, camera: &Camera, view: u64, frame: u64) -> Frame {
    let mut prims = object_prims(scene);
    if let Some(gr) = gripper {
        prims.push(gripper_prim(gr));
    }
    let (h, w) = (camera.height, camera.width);
    let mut image = vec![0.0; h * w * 3];
    let mut depth = vec![FAR; h * w];
    let mut points = vec![0.0; h * w * 3];
    let mut foreground = vec![false; h * w];
    let mut rng: Option<Rng> = None;
    for r in 0..h {
        for c in 0..w {
            let px = r * w + c;
            let d = camera.ray(r, c);
            let hit = nearest(&prims, scene.table, camera.eye, d, false);
            let (color, z) = match hit {
                None => (BACKGROUND, FAR),
                Some(hit) => {
                    foreground[px] = true;
                    let p = add(camera.eye, mul(d, hit.t));
                    let front = shade(scene, &prims, &hit, p);
                    match hit.prim.map(|i| prims[i].alpha).filter(|&a| a < 1.0) {
                        None => (front, hit.t),
                        Some(alpha) => {
                            let rng = rng.get_or_insert_with(|| stream(scene.noise_seed, "render", &[view, frame]));
                            let behind = nearest(&prims, scene.table, camera.eye, d, true);
                            let (back_color, back_t) = match &behind {
                                Some(b) => (shade(scene, &prims, b, add(camera.eye, mul(d, b.t))), b.t),
                                None => (BACKGROUND, FAR),
                            };
                            let mut col = [0.0; 3];
                            for k in 0..3 {
                                col[k] = alpha * front[k] + (1.0 - alpha) * back_color[k] + CAL.glare_std * normal(rng);
                            }
                            let z = if rng.random::<f64>() < CAL.depth_dropout { back_t } else { hit.t };
                            (col, z)
                        }
                    }
                }
            };
            for k in 0..3 {
                image[px * 3 + k] = color[k].clamp(0.0, 1.0);
            }
            depth[px] = z;
            let p = add(camera.eye, mul(d, z));
            points[px * 3..px * 3 + 3].copy_from_slice(&p);
        }
    }
    Frame {
        image: Tensor::new(&[h, w, 3], image).expect("image shape"),
        depth: Tensor::new(&[h, w], depth).expect("depth shape"),
        pointmap: Tensor::new(&[h, w, 3], points).expect("pointmap shape"),
        foreground,
    }
}

/// Patch-averaged depth `[g, g]` and pointmap `[g, g, 3]` of a frame.
pub fn patch_targets(frame: &Frame, patch: usize) -> Result<(Tensor, Tensor)> {
    Ok((patch_average(&frame.depth, patch)?, patch_average(&frame.pointmap, patch)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scene::{generate_scene, Object, Task};

    #[test]
    fn empty_scene_is_background() {
        let cam = Camera::rig(32)[0];
        let f = render(&Scene::empty(), None, &cam, 0, 0);
        assert!(f.depth.data().iter().all(|&d| d == FAR));
        for px in f.image.data().chunks(3) {
            assert_eq!(px, BACKGROUND);
        }
        assert!(f.foreground.iter().all(|&b| !b));
    }

    #[test]
    fn cylinder_silhouette_matches_projected_area() {
        let (radius, height, dist) = (0.1, 0.1, 0.6);
        let mut scene = Scene::empty();
        scene.objects.push(Object {
            shape: Shape::Cylinder { radius, height },
            pos: [0.0, 0.0, 0.0],
            color: [1.0, 0.0, 0.0],
            alpha: 1.0,
            fallen: false,
            movable: true,
        });
        let cam = Camera::look_at([0.0, 0.0, dist], [0.0, 0.0, 0.0], 60.0, 32);
        let f = render(&scene, None, &cam, 0, 0);
        let count = f.foreground.iter().filter(|&&b| b).count() as f64;
        // the top cap is the nearest cross-section and bounds the silhouette
        let r_px = cam.focal * radius / (dist - height);
        let expected = std::f64::consts::PI * r_px * r_px;
        assert!((count - expected).abs() <= 0.15 * expected, "{count} vs {expected}");
    }

    #[test]
    fn pointmap_reprojects_to_its_pixel() {
        for task in Task::ALL {
            let scene = generate_scene(task, 3);
            for (v, cam) in Camera::rig(32).iter().enumerate() {
                let f = render(&scene, None, cam, v as u64, 0);
                for r in 0..32 {
                    for c in 0..32 {
                        if !f.foreground[r * 32 + c] {
                            continue;
                        }
                        let i = (r * 32 + c) * 3;
                        let p = [f.pointmap.data()[i], f.pointmap.data()[i + 1], f.pointmap.data()[i + 2]];
                        assert_eq!(cam.pixel_of(p), Some((r, c)));
                    }
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let scene = generate_scene(Task::GlassShelf, 8);
        let cam = Camera::rig(32)[1];
        let a = render(&scene, None, &cam, 1, 4);
        assert_eq!(a, render(&scene, None, &cam, 1, 4));
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.foreground.iter().filter(|&&b| b).count() > 512);
    }

    #[test]
    fn transparent_depth_drops_out_on_about_half_the_pixels() {
        let scene = generate_scene(Task::GlassShelf, 2);
        let cam = Camera::rig(32)[0];
        let noisy = render(&scene, None, &cam, 0, 0);
        let mut solid = scene.clone();
        solid.objects[0].alpha = 1.0;
        let solid = render(&solid, None, &cam, 0, 0);
        let mut gone = scene.clone();
        gone.objects[0].pos = [5.0, 5.0, 0.0];
        let gone = render(&gone, None, &cam, 0, 0);
        let (mut covered, mut dropped) = (0usize, 0usize);
        for i in 0..32 * 32 {
            let (n, s, g) = (noisy.depth.data()[i], solid.depth.data()[i], gone.depth.data()[i]);
            if s != g {
                covered += 1;
                assert!(n == s || n == g);
                dropped += usize::from(n == g);
            }
        }
        assert!(covered >= 10, "{covered}");
        let frac = dropped as f64 / covered as f64;
        assert!(frac > 0.15 && frac < 0.85, "{dropped}/{covered}");
    }
}
