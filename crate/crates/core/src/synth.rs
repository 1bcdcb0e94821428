//! Ray-cast test scenes: textured planes seen by a moving camera, with a
//! sphere passing in front of them.
//!
//! Every frame is rendered twice, with and without the sphere, so the
//! occluded background is known exactly. The mask marks every pixel any of
//! whose 2×2 subsamples hits the sphere.

use std::fs;
use std::path::Path;

use nalgebra::{Point3, Vector3};

use crate::dataset::{save_sequence, write_color, write_depth, CameraIntrinsics, Frame, Pose, Sequence, TUM_DEPTH_SCALE};
use crate::error::Result;
use crate::grid::{DepthMap, Grid, Rgb, Rgb8Image};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub focal: f64,
    /// Distance of the back wall in meters.
    pub wall_z: f64,
    pub sphere_radius: f64,
    pub sphere_z: f64,
    /// Horizontal sphere travel from the first to the last frame.
    pub sphere_travel: f64,
    /// Horizontal camera travel from the first to the last frame.
    pub camera_travel: f64,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            frames: 60,
            focal: 260.0,
            wall_z: 3.0,
            sphere_radius: 0.18,
            sphere_z: 1.5,
            sphere_travel: 1.6,
            camera_travel: 0.5,
            seed: 0,
        }
    }
}

/// Rendered sequence plus the occluder-free ground truth of every frame.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub sequence: Sequence,
    pub background: Vec<Rgb8Image>,
    pub background_depth: Vec<DepthMap>,
}

fn hash(mut v: u64) -> u64 {
    v ^= v >> 33;
    v = v.wrapping_mul(0xff51_afd7_ed55_8ccd);
    v ^= v >> 33;
    v = v.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    v ^ (v >> 33)
}

fn hash2(seed: u64, a: i64, b: i64) -> u64 {
    hash(seed ^ hash(a as u64 ^ hash(b as u64).rotate_left(17)))
}

fn unit(h: u64, k: u32) -> f32 {
    ((h >> (k * 10)) & 1023) as f32 / 1023.0
}

/// Tiles of varied color with a disc in every other tile.
fn texture(seed: u64, a: f64, b: f64, base: Rgb) -> Rgb {
    let tile = 0.15;
    let (ia, ib) = ((a / tile).floor() as i64, (b / tile).floor() as i64);
    let h = hash2(seed, ia, ib);
    let mut c = [0.0f32; 3];
    for (k, v) in c.iter_mut().enumerate() {
        *v = base[k] + 0.35 * (unit(h, k as u32) - 0.5);
    }
    if h & (1 << 40) != 0 {
        let (fa, fb) = (a / tile - ia as f64, b / tile - ib as f64);
        let (ca, cb) = (0.3 + 0.4 * unit(h, 3) as f64, 0.3 + 0.4 * unit(h, 4) as f64);
        let r = 0.12 + 0.12 * unit(h, 5) as f64;
        if (fa - ca).powi(2) + (fb - cb).powi(2) < r * r {
            let dark = h & (1 << 41) != 0;
            for v in c.iter_mut() {
                *v = if dark { *v * 0.25 } else { 0.6 + *v * 0.4 };
            }
        }
    }
    c.map(|v| v.clamp(0.0, 1.0))
}

#[derive(Clone, Copy)]
enum Hit {
    Background { t: f64, color: Rgb },
    Sphere { t: f64, color: Rgb },
}

struct Scene {
    params: SceneParams,
}

impl Scene {
    /// Nearest background surface along a world ray.
    fn background(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<(f64, Rgb)> {
        let p = &self.params;
        let mut best: Option<(f64, Rgb)> = None;
        let mut consider = |t: f64, color: Rgb| {
            if t > 1e-6 && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, color));
            }
        };
        // Back wall.
        if d.z.abs() > 1e-12 {
            let t = (p.wall_z - o.z) / d.z;
            let q = o + d * t;
            consider(t, texture(p.seed, q.x, q.y, [0.55, 0.5, 0.42]));
        }
        // Floor.
        if d.y.abs() > 1e-12 {
            let t = (0.8 - o.y) / d.y;
            let q = o + d * t;
            if q.z < p.wall_z {
                consider(t, texture(p.seed.wrapping_add(1), q.x, q.z, [0.35, 0.42, 0.5]));
            }
        }
        // Free-standing panel.
        if d.z.abs() > 1e-12 {
            let t = (2.1 - o.z) / d.z;
            let q = o + d * t;
            if (0.55..1.3).contains(&q.x) && (-0.7..0.3).contains(&q.y) {
                consider(t, texture(p.seed.wrapping_add(2), q.x, q.y, [0.45, 0.55, 0.35]));
            }
        }
        best
    }

    fn sphere_center(&self, k: usize) -> Point3<f64> {
        let p = &self.params;
        let s = if p.frames > 1 { k as f64 / (p.frames - 1) as f64 } else { 0.5 };
        Point3::new(-0.5 * p.sphere_travel + p.sphere_travel * s, 0.05, p.sphere_z)
    }

    fn camera(&self, k: usize) -> Pose {
        let p = &self.params;
        let s = if p.frames > 1 { k as f64 / (p.frames - 1) as f64 } else { 0.5 };
        let t = Vector3::new(-0.5 * p.camera_travel + p.camera_travel * s, 0.04 * (std::f64::consts::TAU * s).sin(), 0.15 * s);
        Pose::from_axis_angle(Vector3::new(0.0, 0.08 * (s - 0.5), 0.0), t)
    }

    fn trace(&self, k: usize, o: &Point3<f64>, d: &Vector3<f64>, with_sphere: bool) -> Option<Hit> {
        let bg = self.background(o, d);
        if with_sphere {
            let c = self.sphere_center(k);
            let r = self.params.sphere_radius;
            let oc = o - c;
            let b = oc.dot(d);
            let disc = b * b - (oc.norm_squared() - r * r);
            if disc >= 0.0 {
                let t = -b - disc.sqrt();
                if t > 1e-6 && bg.is_none_or(|(bt, _)| t < bt) {
                    let n = ((o + d * t) - c) / r;
                    let shade = (0.35 + 0.65 * n.dot(&Vector3::new(-0.4, -0.6, -0.7).normalize()).max(0.0)) as f32;
                    return Some(Hit::Sphere {
                        t,
                        color: [0.85 * shade, 0.15 * shade, 0.1 * shade],
                    });
                }
            }
        }
        bg.map(|(t, color)| Hit::Background { t, color })
    }
}

struct Render {
    color: Rgb8Image,
    depth: DepthMap,
    mask: Grid<bool>,
}

fn render(scene: &Scene, intr: &CameraIntrinsics, k: usize, with_sphere: bool) -> Render {
    let (w, h) = (intr.width, intr.height);
    let pose = scene.camera(k);
    let origin = Point3::from(pose.translation);
    let ray = |u: f64, v: f64| -> Vector3<f64> {
        let dc = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
        pose.transform_vector(&dc).normalize()
    };
    let rows = par::map_range(h, |y| {
        (0..w)
            .map(|x| {
                let mut acc = [0.0f32; 3];
                let mut masked = false;
                for (sx, sy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                    match scene.trace(k, &origin, &ray(x as f64 + sx, y as f64 + sy), with_sphere) {
                        Some(Hit::Background { color, .. }) => (0..3).for_each(|c| acc[c] += color[c] / 4.0),
                        Some(Hit::Sphere { color, .. }) => {
                            masked = true;
                            (0..3).for_each(|c| acc[c] += color[c] / 4.0);
                        }
                        None => {}
                    }
                }
                let dc = Vector3::new((x as f64 - intr.cx) / intr.fx, (y as f64 - intr.cy) / intr.fy, 1.0);
                let dir = pose.transform_vector(&dc);
                // Ray parameter along an unnormalized camera ray is camera z.
                let z = match scene.trace(k, &origin, &dir.normalize(), with_sphere) {
                    Some(Hit::Background { t, .. } | Hit::Sphere { t, .. }) => (t / dir.norm()) as f32,
                    None => 0.0,
                };
                let z = f32::from(crate::dataset::depth_to_units(z, intr.depth_scale)) / intr.depth_scale as f32;
                (acc.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8), z, masked)
            })
            .collect::<Vec<_>>()
    });
    let px: Vec<_> = rows.into_iter().flatten().collect();
    Render {
        color: Grid::from_vec(w, h, px.iter().map(|p| p.0).collect()),
        depth: Grid::from_vec(w, h, px.iter().map(|p| p.1).collect()),
        mask: Grid::from_vec(w, h, px.iter().map(|p| p.2).collect()),
    }
}

pub fn intrinsics(params: &SceneParams) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: params.focal,
        fy: params.focal,
        cx: (params.width as f64 - 1.0) / 2.0,
        cy: (params.height as f64 - 1.0) / 2.0,
        width: params.width,
        height: params.height,
        depth_scale: TUM_DEPTH_SCALE,
    }
}

/// Renders the scene. Depth is quantized to the 16-bit PNG grid so that a
/// save/load round trip is lossless.
pub fn render_scene(params: &SceneParams) -> SyntheticScene {
    let scene = Scene { params: *params };
    let intr = intrinsics(params);
    let mut frames = Vec::with_capacity(params.frames);
    let mut background = Vec::with_capacity(params.frames);
    let mut background_depth = Vec::with_capacity(params.frames);
    for k in 0..params.frames {
        let seen = render(&scene, &intr, k, true);
        let clean = render(&scene, &intr, k, false);
        let timestamp = 1.0 + k as f64 / 30.0;
        frames.push(Frame {
            id: k,
            timestamp,
            stamp: format!("{timestamp:.6}"),
            color: seen.color,
            depth: seen.depth,
            mask: seen.mask,
            pose: Some(scene.camera(k)),
            files: None,
        });
        background.push(clean.color);
        background_depth.push(clean.depth);
    }
    SyntheticScene {
        sequence: Sequence { frames, intrinsics: intr },
        background,
        background_depth,
    }
}

/// Writes the sequence in TUM layout plus `background/` ground truth.
pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    save_sequence(dir, &scene.sequence)?;
    fs::create_dir_all(dir.join("background"))?;
    for (f, (c, d)) in scene.sequence.frames.iter().zip(scene.background.iter().zip(&scene.background_depth)) {
        write_color(&dir.join("background").join(format!("{}.png", f.stamp)), c)?;
        write_depth(&dir.join("background").join(format!("{}_depth.png", f.stamp)), d, scene.sequence.intrinsics.depth_scale)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneParams {
        SceneParams {
            width: 80,
            height: 60,
            frames: 5,
            focal: 65.0,
            ..SceneParams::default()
        }
    }

    #[test]
    fn mask_matches_color_difference() {
        let s = render_scene(&small());
        for (k, f) in s.sequence.frames.iter().enumerate() {
            for (x, y, m) in f.mask.enumerate() {
                if !*m {
                    assert_eq!(f.color.get(x, y), s.background[k].get(x, y));
                }
            }
        }
        assert!(s.sequence.frames[2].mask.any());
    }

    #[test]
    fn wall_depth_at_principal_ray() {
        let p = small();
        let s = render_scene(&p);
        let f = &s.sequence.frames[0];
        // First camera sits at z = 0 with a small yaw; wall is 3 m away.
        let d = *s.background_depth[0].get(p.width / 2, p.height / 4);
        assert!((d - 3.0).abs() < 0.05, "{d}");
        assert!(f.depth.iter().all(|d| *d > 0.0));
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_scene(&small());
        let b = render_scene(&small());
        assert_eq!(a.background, b.background);
        assert_eq!(a.sequence.frames[3].color, b.sequence.frames[3].color);
    }
}
