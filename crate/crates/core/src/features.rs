//! Local features and bag-of-visual-words retrieval.
//!
//! The detector finds scale-space extrema of a difference-of-Gaussians
//! pyramid and describes each with a 128-bin gradient orientation histogram
//! (4×4 spatial cells × 8 orientations), rotated to the dominant gradient
//! direction. Descriptors are unit L2 vectors.
//!
//! Retrieval uses a hierarchical k-means vocabulary tree with idf-weighted,
//! L1-normalized word histograms scored by `1 - ½‖a - b‖₁`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GrayImage, Grid, Mask};
use crate::par;

pub const DESCRIPTOR_LEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    /// Gaussian scale in base-image pixels.
    pub scale: f32,
    /// Radians.
    pub orientation: f32,
    pub response: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    /// Row-major `keypoints.len() × 128`.
    pub descriptors: Vec<f32>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * DESCRIPTOR_LEN..(i + 1) * DESCRIPTOR_LEN]
    }

    pub fn push(&mut self, kp: Keypoint, desc: &[f32]) {
        debug_assert_eq!(desc.len(), DESCRIPTOR_LEN);
        self.keypoints.push(kp);
        self.descriptors.extend_from_slice(desc);
    }

    /// Subset of features whose keypoint satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&Keypoint) -> bool) -> FeatureSet {
        let mut out = FeatureSet::default();
        for (i, kp) in self.keypoints.iter().enumerate() {
            if keep(kp) {
                out.push(*kp, self.descriptor(i));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub scales_per_octave: usize,
    pub max_octaves: usize,
    pub sigma: f32,
    /// DoG contrast threshold on `[0, 1]` intensities.
    pub contrast_threshold: f32,
    /// Principal curvature ratio bound.
    pub edge_ratio: f32,
    /// Keep at most this many strongest keypoints (0 = unlimited).
    pub max_features: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            scales_per_octave: 3,
            max_octaves: 5,
            sigma: 1.6,
            contrast_threshold: 0.03,
            edge_ratio: 10.0,
            max_features: 1500,
        }
    }
}

impl DetectorParams {
    fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in [
            self.scales_per_octave as u64,
            self.max_octaves as u64,
            self.sigma.to_bits() as u64,
            self.contrast_threshold.to_bits() as u64,
            self.edge_ratio.to_bits() as u64,
            self.max_features as u64,
        ] {
            h = (h ^ v).wrapping_mul(0x100_0000_01b3);
        }
        h
    }
}

struct Octave {
    gauss: Vec<GrayImage>,
    dog: Vec<GrayImage>,
}

fn build_pyramid(image: &GrayImage, p: &DetectorParams) -> Vec<Octave> {
    let s = p.scales_per_octave;
    let k = 2f32.powf(1.0 / s as f32);
    // assume the camera already applied σ = 0.5
    let init = (p.sigma * p.sigma - 0.25).max(0.01).sqrt();
    let mut base = image.gaussian_blur(init);
    let mut octaves = Vec::new();
    for o in 0..p.max_octaves {
        if base.width() < 16 || base.height() < 16 {
            break;
        }
        let mut gauss = vec![base.clone()];
        let mut prev_sigma = p.sigma;
        for i in 1..s + 3 {
            let sig = p.sigma * k.powi(i as i32);
            let inc = (sig * sig - prev_sigma * prev_sigma).sqrt();
            let next = gauss[i - 1].gaussian_blur(inc);
            gauss.push(next);
            prev_sigma = sig;
        }
        let dog = gauss
            .windows(2)
            .map(|w| {
                Grid::from_vec(
                    w[0].width(),
                    w[0].height(),
                    w[1].iter().zip(w[0].iter()).map(|(a, b)| a - b).collect(),
                )
            })
            .collect();
        let next_base = gauss[s].downsample();
        octaves.push(Octave { gauss, dog });
        base = next_base;
        let _ = o;
    }
    octaves
}

const BORDER: usize = 5;

fn is_extremum(dog: &[GrayImage], l: usize, x: usize, y: usize) -> bool {
    let v = *dog[l].get(x, y);
    let mut is_max = true;
    let mut is_min = true;
    for layer in &dog[l - 1..=l + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                let n = *layer.get(xx, yy);
                if std::ptr::eq(layer, &dog[l]) && xx == x && yy == y {
                    continue;
                }
                if n >= v {
                    is_max = false;
                }
                if n <= v {
                    is_min = false;
                }
            }
        }
        if !is_max && !is_min {
            return false;
        }
    }
    is_max || is_min
}

/// Sub-pixel/sub-scale refinement; returns `(x, y, layer, response)` in
/// octave coordinates.
fn refine(dog: &[GrayImage], p: &DetectorParams, mut l: usize, mut x: usize, mut y: usize) -> Option<(f32, f32, f32, f32)> {
    let s = p.scales_per_octave;
    let (w, h) = (dog[0].width(), dog[0].height());
    let mut off = [0.0f32; 3];
    let mut converged = false;
    for _ in 0..5 {
        let d = |dl: isize, dx: isize, dy: isize| -> f32 {
            *dog[(l as isize + dl) as usize].get((x as isize + dx) as usize, (y as isize + dy) as usize)
        };
        let v = d(0, 0, 0);
        let g = [
            0.5 * (d(0, 1, 0) - d(0, -1, 0)),
            0.5 * (d(0, 0, 1) - d(0, 0, -1)),
            0.5 * (d(1, 0, 0) - d(-1, 0, 0)),
        ];
        let dxx = d(0, 1, 0) + d(0, -1, 0) - 2.0 * v;
        let dyy = d(0, 0, 1) + d(0, 0, -1) - 2.0 * v;
        let dss = d(1, 0, 0) + d(-1, 0, 0) - 2.0 * v;
        let dxy = 0.25 * (d(0, 1, 1) - d(0, -1, 1) - d(0, 1, -1) + d(0, -1, -1));
        let dxs = 0.25 * (d(1, 1, 0) - d(1, -1, 0) - d(-1, 1, 0) + d(-1, -1, 0));
        let dys = 0.25 * (d(1, 0, 1) - d(1, 0, -1) - d(-1, 0, 1) + d(-1, 0, -1));
        let hm = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let sol = hm.lu().solve(&nalgebra::Vector3::new(-g[0], -g[1], -g[2]))?;
        off = [sol[0], sol[1], sol[2]];
        if off.iter().all(|o| o.abs() < 0.5) {
            converged = true;
            break;
        }
        if off.iter().any(|o| !o.is_finite() || o.abs() > 1e4) {
            return None;
        }
        let nx = x as isize + off[0].round() as isize;
        let ny = y as isize + off[1].round() as isize;
        let nl = l as isize + off[2].round() as isize;
        if nl < 1 || nl > s as isize || nx < BORDER as isize || ny < BORDER as isize || nx >= (w - BORDER) as isize || ny >= (h - BORDER) as isize {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        l = nl as usize;
    }
    if !converged {
        return None;
    }
    let d = |dl: isize, dx: isize, dy: isize| -> f32 {
        *dog[(l as isize + dl) as usize].get((x as isize + dx) as usize, (y as isize + dy) as usize)
    };
    let v = d(0, 0, 0);
    let g = [
        0.5 * (d(0, 1, 0) - d(0, -1, 0)),
        0.5 * (d(0, 0, 1) - d(0, 0, -1)),
        0.5 * (d(1, 0, 0) - d(-1, 0, 0)),
    ];
    let response = v + 0.5 * (g[0] * off[0] + g[1] * off[1] + g[2] * off[2]);
    if response.abs() * (s as f32) < p.contrast_threshold {
        return None;
    }
    let dxx = d(0, 1, 0) + d(0, -1, 0) - 2.0 * v;
    let dyy = d(0, 0, 1) + d(0, 0, -1) - 2.0 * v;
    let dxy = 0.25 * (d(0, 1, 1) - d(0, -1, 1) - d(0, 1, -1) + d(0, -1, -1));
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    let r = p.edge_ratio;
    if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
        return None;
    }
    Some((x as f32 + off[0], y as f32 + off[1], l as f32 + off[2], response))
}

fn orientations(img: &GrayImage, x: f32, y: f32, sigma: f32) -> Vec<f32> {
    const BINS: usize = 36;
    let radius = (3.0 * 1.5 * sigma).round() as isize;
    let weight_denom = 2.0 * (1.5 * sigma) * (1.5 * sigma);
    let (xi, yi) = (x.round() as isize, y.round() as isize);
    let mut hist = [0.0f32; BINS];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (px, py) = (xi + dx, yi + dy);
            if px < 1 || py < 1 || px >= img.width() as isize - 1 || py >= img.height() as isize - 1 {
                continue;
            }
            let gx = img.get((px + 1) as usize, py as usize) - img.get((px - 1) as usize, py as usize);
            let gy = img.get(px as usize, (py + 1) as usize) - img.get(px as usize, (py - 1) as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            let ang = gy.atan2(gx);
            let w = (-((dx * dx + dy * dy) as f32) / weight_denom).exp();
            let bin = ((ang / std::f32::consts::TAU * BINS as f32).round() as isize).rem_euclid(BINS as isize) as usize;
            hist[bin] += w * mag;
        }
    }
    // circular smoothing
    for _ in 0..2 {
        let prev = hist;
        for i in 0..BINS {
            hist[i] = 0.25 * prev[(i + BINS - 1) % BINS] + 0.5 * prev[i] + 0.25 * prev[(i + 1) % BINS];
        }
    }
    let max = hist.iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return vec![0.0];
    }
    let mut out = Vec::new();
    for i in 0..BINS {
        let l = hist[(i + BINS - 1) % BINS];
        let r = hist[(i + 1) % BINS];
        let c = hist[i];
        if c > l && c > r && c >= 0.8 * max {
            let interp = 0.5 * (l - r) / (l - 2.0 * c + r);
            let bin = i as f32 + interp;
            let mut ang = bin / BINS as f32 * std::f32::consts::TAU;
            if ang > std::f32::consts::PI {
                ang -= std::f32::consts::TAU;
            }
            out.push(ang);
        }
    }
    out
}

fn describe(img: &GrayImage, x: f32, y: f32, sigma: f32, angle: f32) -> [f32; DESCRIPTOR_LEN] {
    const D: usize = 4;
    const N: usize = 8;
    let hist_width = 3.0 * sigma;
    let radius = (hist_width * std::f32::consts::SQRT_2 * (D as f32 + 1.0) * 0.5).round() as isize;
    let (cos_t, sin_t) = (angle.cos(), angle.sin());
    let (xi, yi) = (x.round() as isize, y.round() as isize);
    let mut hist = [0.0f32; (D + 2) * (D + 2) * (N + 2)];
    let idx = |r: usize, c: usize, o: usize| (r * (D + 2) + c) * (N + 2) + o;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let rx = (cos_t * dx as f32 + sin_t * dy as f32) / hist_width;
            let ry = (-sin_t * dx as f32 + cos_t * dy as f32) / hist_width;
            let rbin = ry + D as f32 / 2.0 - 0.5;
            let cbin = rx + D as f32 / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= D as f32 || cbin <= -1.0 || cbin >= D as f32 {
                continue;
            }
            let (px, py) = (xi + dx, yi + dy);
            if px < 1 || py < 1 || px >= img.width() as isize - 1 || py >= img.height() as isize - 1 {
                continue;
            }
            let gx = img.get((px + 1) as usize, py as usize) - img.get((px - 1) as usize, py as usize);
            let gy = img.get(px as usize, (py + 1) as usize) - img.get(px as usize, (py - 1) as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            let mut ori = gy.atan2(gx) - angle;
            ori = ori.rem_euclid(std::f32::consts::TAU);
            let obin = ori / std::f32::consts::TAU * N as f32;
            let w = (-(rx * rx + ry * ry) / (0.5 * (D * D) as f32)).exp() * mag;

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            let (r0, c0) = ((r0 as isize + 1) as usize, (c0 as isize + 1) as usize);
            let o0 = (o0 as usize) % N;
            for (dr, wr) in [(0usize, 1.0 - fr), (1, fr)] {
                for (dc, wc) in [(0usize, 1.0 - fc), (1, fc)] {
                    for (dor, wo) in [(0usize, 1.0 - fo), (1, fo)] {
                        hist[idx(r0 + dr, c0 + dc, (o0 + dor) % N)] += w * wr * wc * wo;
                    }
                }
            }
        }
    }
    let mut desc = [0.0f32; DESCRIPTOR_LEN];
    for r in 0..D {
        for c in 0..D {
            for o in 0..N {
                desc[(r * D + c) * N + o] = hist[idx(r + 1, c + 1, o)];
            }
        }
    }
    normalize_descriptor(&mut desc);
    desc
}

fn normalize_descriptor(desc: &mut [f32]) {
    let norm = desc.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm <= 0.0 {
        // featureless window: fall back to a fixed unit vector
        desc.iter_mut().for_each(|v| *v = 0.0);
        desc[0] = 1.0;
        return;
    }
    for v in desc.iter_mut() {
        *v = (*v / norm).min(0.2);
    }
    let norm = desc.iter().map(|v| v * v).sum::<f32>().sqrt();
    desc.iter_mut().for_each(|v| *v /= norm);
}

/// Detects and describes features, keeping only keypoints whose rounded
/// location is set in `region` (when given).
pub fn detect_describe(image: &GrayImage, region: Option<&Mask>, params: &DetectorParams) -> FeatureSet {
    if image.is_empty() {
        return FeatureSet::default();
    }
    let s = params.scales_per_octave;
    let pyramid = build_pyramid(image, params);
    let prefilter = 0.5 * params.contrast_threshold / s as f32;

    let mut found: Vec<(Keypoint, [f32; DESCRIPTOR_LEN])> = Vec::new();
    for (o, oct) in pyramid.iter().enumerate() {
        let (w, h) = (oct.dog[0].width(), oct.dog[0].height());
        if w <= 2 * BORDER || h <= 2 * BORDER {
            continue;
        }
        let scale = 2f32.powi(o as i32);
        for l in 1..=s {
            let rows = par::map_range(h - 2 * BORDER, |row| {
                let y = row + BORDER;
                let mut out = Vec::new();
                for x in BORDER..w - BORDER {
                    let v = *oct.dog[l].get(x, y);
                    if v.abs() <= prefilter || !is_extremum(&oct.dog, l, x, y) {
                        continue;
                    }
                    let Some((fx, fy, fl, resp)) = refine(&oct.dog, params, l, x, y) else {
                        continue;
                    };
                    let (bx, by) = (fx * scale, fy * scale);
                    if let Some(region) = region {
                        let (rx, ry) = (bx.round() as isize, by.round() as isize);
                        if !region.in_bounds(rx, ry) || !*region.get(rx as usize, ry as usize) {
                            continue;
                        }
                    }
                    if bx < 0.0 || by < 0.0 || bx > (image.width() - 1) as f32 || by > (image.height() - 1) as f32 {
                        continue;
                    }
                    let sigma_oct = params.sigma * 2f32.powf(fl / s as f32);
                    let layer = fl.round().clamp(0.0, (s + 2) as f32) as usize;
                    let gimg = &oct.gauss[layer];
                    for angle in orientations(gimg, fx, fy, sigma_oct) {
                        let desc = describe(gimg, fx, fy, sigma_oct, angle);
                        out.push((
                            Keypoint {
                                x: bx,
                                y: by,
                                scale: sigma_oct * scale,
                                orientation: angle,
                                response: resp.abs(),
                            },
                            desc,
                        ));
                    }
                }
                out
            });
            found.extend(rows.into_iter().flatten());
        }
    }
    if params.max_features > 0 && found.len() > params.max_features {
        // stable: strongest first, then by position
        found.sort_by(|a, b| {
            b.0.response
                .total_cmp(&a.0.response)
                .then(a.0.y.total_cmp(&b.0.y))
                .then(a.0.x.total_cmp(&b.0.x))
        });
        found.truncate(params.max_features);
    }
    let mut set = FeatureSet::default();
    for (kp, d) in found {
        set.push(kp, &d);
    }
    set
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub frame_a: usize,
    pub frame_b: usize,
    pub pairs: Vec<Match>,
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Best and second-best neighbour of every descriptor of `a` in `b`.
fn nearest_two(a: &FeatureSet, b: &FeatureSet) -> Vec<Option<(usize, f32, f32)>> {
    par::map_range(a.len(), |i| {
        let da = a.descriptor(i);
        let mut best = (usize::MAX, f32::INFINITY);
        let mut second = f32::INFINITY;
        for j in 0..b.len() {
            let d = sq_dist(da, b.descriptor(j));
            if d < best.1 {
                second = best.1;
                best = (j, d);
            } else if d < second {
                second = d;
            }
        }
        (best.0 != usize::MAX).then(|| (best.0, best.1.sqrt(), second.sqrt()))
    })
}

/// Nearest-neighbour matching with Lowe's ratio test and a mutual
/// cross-check. A match passes when `d1 < ratio · d2` in both directions
/// (or the other set has a single descriptor).
pub fn match_features(a: &FeatureSet, b: &FeatureSet, ratio: f32) -> MatchSet {
    let ab = nearest_two(a, b);
    let ba = nearest_two(b, a);
    let mut pairs = Vec::new();
    for (i, nn) in ab.iter().enumerate() {
        let Some((j, d1, d2)) = *nn else { continue };
        if d2.is_finite() && d1 >= ratio * d2 {
            continue;
        }
        // Cross-check, with the ratio test applied from `b`'s side as well
        // so that matching is symmetric.
        let Some((back, e1, e2)) = ba[j] else { continue };
        if back != i || (e2.is_finite() && e1 >= ratio * e2) {
            continue;
        }
        pairs.push(Match {
            index_a: i,
            index_b: j,
            distance: d1,
        });
    }
    MatchSet {
        frame_a: 0,
        frame_b: 0,
        pairs,
    }
}

// ---------------------------------------------------------------------------
// Vocabulary tree

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VocabNode {
    centroid: Vec<f32>,
    children: Vec<usize>,
    word: Option<usize>,
}

/// Hierarchical k-means vocabulary with an inverted index over the training
/// documents. Document `i` is the `i`-th training feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabTree {
    pub branching: usize,
    pub depth: usize,
    nodes: Vec<VocabNode>,
    idf: Vec<f64>,
    /// Inverted index: word → documents containing it.
    inverted: Vec<Vec<usize>>,
    documents: Vec<BTreeMap<usize, f64>>,
}

/// Cap on descriptors used for clustering; the rest are only quantized.
const MAX_TRAINING_DESCRIPTORS: usize = 60_000;

fn kmeans(data: &[&[f32]], k: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f32>>, Vec<usize>) {
    let n = data.len();
    // k-means++ seeding
    let mut centers: Vec<Vec<f32>> = vec![data[rng.gen_range(0..n)].to_vec()];
    let mut dist: Vec<f32> = data.iter().map(|d| sq_dist(d, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().map(|d| *d as f64).sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in dist.iter().enumerate() {
                target -= *d as f64;
                if target <= 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        };
        centers.push(data[pick].to_vec());
        let c = centers.last().unwrap();
        for (d, x) in dist.iter_mut().zip(data) {
            *d = d.min(sq_dist(x, c));
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..15 {
        let next: Vec<usize> = par::map_range(n, |i| {
            let mut best = (0, f32::INFINITY);
            for (c, ctr) in centers.iter().enumerate() {
                let d = sq_dist(data[i], ctr);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        });
        let changed = next != assign;
        assign = next;
        let dim = data[0].len();
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, a) in data.iter().zip(&assign) {
            counts[*a] += 1;
            for (s, v) in sums[*a].iter_mut().zip(x.iter()) {
                *s += *v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| (*s / counts[c] as f64) as f32).collect();
            }
        }
        if !changed {
            break;
        }
    }
    (centers, assign)
}

/// Builds a `branching`-ary tree of depth `depth` by recursive k-means.
/// Deterministic for a fixed `seed`.
pub fn build_vocab(training: &[FeatureSet], branching: usize, depth: usize, seed: u64) -> Result<VocabTree> {
    if branching < 2 || depth < 1 {
        return Err(Error::Input("vocabulary needs branching >= 2 and depth >= 1".into()));
    }
    let total: usize = training.iter().map(FeatureSet::len).sum();
    if total < branching {
        return Err(Error::Input(format!(
            "vocabulary needs at least {branching} descriptors, got {total}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<&[f32]> = training
        .iter()
        .flat_map(|f| (0..f.len()).map(move |i| f.descriptor(i)))
        .collect();
    if all.len() > MAX_TRAINING_DESCRIPTORS {
        // partial Fisher–Yates for a deterministic subsample
        for i in 0..MAX_TRAINING_DESCRIPTORS {
            let j = rng.gen_range(i..all.len());
            all.swap(i, j);
        }
        all.truncate(MAX_TRAINING_DESCRIPTORS);
    }

    let mut nodes = vec![VocabNode {
        centroid: vec![0.0; DESCRIPTOR_LEN],
        children: Vec::new(),
        word: None,
    }];
    let mut words = 0usize;
    let mut stack: Vec<(usize, Vec<usize>, usize)> = vec![(0, (0..all.len()).collect(), 0)];
    while let Some((node, members, level)) = stack.pop() {
        let distinct = {
            let first = all[members[0]];
            members.iter().any(|m| all[*m] != first)
        };
        if level == depth || members.len() < branching || !distinct {
            nodes[node].word = Some(words);
            words += 1;
            continue;
        }
        let data: Vec<&[f32]> = members.iter().map(|m| all[*m]).collect();
        let mut node_rng = ChaCha8Rng::seed_from_u64(seed ^ (node as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (centers, assign) = kmeans(&data, branching, &mut node_rng);
        let mut groups = vec![Vec::new(); branching];
        for (m, a) in members.iter().zip(&assign) {
            groups[*a].push(*m);
        }
        let mut pending = Vec::new();
        for (c, group) in centers.into_iter().zip(groups) {
            if group.is_empty() {
                continue;
            }
            let id = nodes.len();
            nodes.push(VocabNode {
                centroid: c,
                children: Vec::new(),
                word: None,
            });
            nodes[node].children.push(id);
            pending.push((id, group, level + 1));
        }
        // depth-first in child order keeps word numbering deterministic
        stack.extend(pending.into_iter().rev());
    }

    let mut tree = VocabTree {
        branching,
        depth,
        nodes,
        idf: vec![0.0; words],
        inverted: vec![Vec::new(); words],
        documents: Vec::new(),
    };
    let doc_words: Vec<Vec<usize>> = par::map_slice(training, |f| tree.quantize_all(f));
    let n_docs = training.len() as f64;
    let mut doc_freq = vec![0usize; words];
    for (doc, ws) in doc_words.iter().enumerate() {
        let mut uniq = ws.clone();
        uniq.sort_unstable();
        uniq.dedup();
        for w in uniq {
            doc_freq[w] += 1;
            tree.inverted[w].push(doc);
        }
    }
    for (w, df) in doc_freq.iter().enumerate() {
        tree.idf[w] = if *df == 0 { 0.0 } else { (n_docs / *df as f64).ln() };
    }
    tree.documents = doc_words.iter().map(|ws| tree.weight(ws)).collect();
    Ok(tree)
}

impl VocabTree {
    pub fn num_words(&self) -> usize {
        self.idf.len()
    }

    pub fn num_documents(&self) -> usize {
        self.documents.len()
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    /// Documents containing `word`.
    pub fn postings(&self, word: usize) -> &[usize] {
        &self.inverted[word]
    }

    /// Leaf word of a descriptor.
    pub fn quantize(&self, desc: &[f32]) -> usize {
        let mut node = 0;
        loop {
            let n = &self.nodes[node];
            if let Some(w) = n.word {
                return w;
            }
            let mut best = (n.children[0], f32::INFINITY);
            for c in &n.children {
                let d = sq_dist(desc, &self.nodes[*c].centroid);
                if d < best.1 {
                    best = (*c, d);
                }
            }
            node = best.0;
        }
    }

    fn quantize_all(&self, f: &FeatureSet) -> Vec<usize> {
        (0..f.len()).map(|i| self.quantize(f.descriptor(i))).collect()
    }

    /// idf-weighted, L1-normalized word histogram.
    fn weight(&self, words: &[usize]) -> BTreeMap<usize, f64> {
        let mut v = BTreeMap::new();
        for w in words {
            *v.entry(*w).or_insert(0.0) += self.idf[*w];
        }
        let sum: f64 = v.values().sum();
        if sum > 0.0 {
            v.values_mut().for_each(|x| *x /= sum);
            v.retain(|_, x| *x > 0.0);
        } else {
            v.clear();
        }
        v
    }

    pub fn bow(&self, features: &FeatureSet) -> BTreeMap<usize, f64> {
        self.weight(&self.quantize_all(features))
    }

    /// Similarity in `[0, 1]` between a query and indexed document `frame_id`.
    pub fn similarity(&self, query: &FeatureSet, frame_id: usize) -> Result<f64> {
        let doc = self
            .documents
            .get(frame_id)
            .ok_or_else(|| Error::Input(format!("frame {frame_id} is not indexed in the vocabulary")))?;
        Ok(score(&self.bow(query), doc))
    }

    /// Similarities of a query against every indexed document.
    pub fn similarities(&self, query: &FeatureSet) -> Vec<f64> {
        let q = self.bow(query);
        self.documents.iter().map(|d| score(&q, d)).collect()
    }
}

pub fn similarity(query: &FeatureSet, frame_id: usize, tree: &VocabTree) -> Result<f64> {
    tree.similarity(query, frame_id)
}

fn score(a: &BTreeMap<usize, f64>, b: &BTreeMap<usize, f64>) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut l1 = 0.0;
    for (w, va) in a {
        l1 += (va - b.get(w).copied().unwrap_or(0.0)).abs();
    }
    for (w, vb) in b {
        if !a.contains_key(w) {
            l1 += vb;
        }
    }
    (1.0 - 0.5 * l1).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// On-disk cache

const CACHE_MAGIC: &[u8; 4] = b"MVFS";
const CACHE_VERSION: u32 = 1;

/// Writes a feature set with a header carrying the frame id and a
/// fingerprint of the detector parameters.
pub fn save_features(path: &Path, frame_id: usize, params: &DetectorParams, set: &FeatureSet) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(frame_id as u64).to_le_bytes())?;
    w.write_all(&params.fingerprint().to_le_bytes())?;
    w.write_all(&(set.len() as u64).to_le_bytes())?;
    for kp in &set.keypoints {
        for v in [kp.x, kp.y, kp.scale, kp.orientation, kp.response] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for v in &set.descriptors {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a cached feature set; `None` if the header does not match the
/// requested frame and parameters.
pub fn load_features(path: &Path, frame_id: usize, params: &DetectorParams) -> Result<Option<FeatureSet>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |reason: &str| Error::Artifact {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 32 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("not a feature cache"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != CACHE_VERSION {
        return Ok(None);
    }
    if u64_at(8) != frame_id as u64 || u64_at(16) != params.fingerprint() {
        return Ok(None);
    }
    let n = u64_at(24) as usize;
    let expected = 32 + n * 5 * 4 + n * DESCRIPTOR_LEN * 4;
    if bytes.len() != expected {
        return Err(bad("truncated feature cache"));
    }
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let mut set = FeatureSet::default();
    let mut o = 32;
    for _ in 0..n {
        let v: Vec<f32> = (0..5).map(|k| f32_at(o + 4 * k)).collect();
        set.keypoints.push(Keypoint {
            x: v[0],
            y: v[1],
            scale: v[2],
            orientation: v[3],
            response: v[4],
        });
        o += 20;
    }
    set.descriptors = (0..n * DESCRIPTOR_LEN).map(|k| f32_at(o + 4 * k)).collect();
    Ok(Some(set))
}
