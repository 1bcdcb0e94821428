//! Per-mask sub-images and source frame ranking.
//!
//! Each 8-connected mask component of the target is handled on its own
//! bounding rectangle. Candidate sources are first shortlisted by
//! bag-of-words similarity of the unmasked part of that rectangle, then
//! ranked by
//!
//! ```text
//! S = (w1·s - w2·d) · q_i / q_t
//! ```
//!
//! with `s` and `d` min–max normalized over the shortlist.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dataset::{CameraIntrinsics, Frame, FrameId, Pose, Sequence};
use crate::error::{Error, Result};
use crate::features::{FeatureSet, VocabTree};
use crate::grid::{gradient_magnitude, GrayImage, Grid, Mask, Rect};

/// One connected mask component and its tight bounding rectangle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRegion {
    pub mask_id: usize,
    /// Tight bound of the component, in target pixels.
    pub rect: Rect,
    /// Every masked target pixel inside `rect` (this component and any other
    /// component overlapping the rectangle).
    pub mask_pixels: Mask,
    /// Pixels of this component only.
    pub component: Mask,
}

impl MaskRegion {
    /// Unmasked remainder of the rectangle.
    pub fn ring_pixels(&self) -> Mask {
        self.mask_pixels.map(|m| !m)
    }
}

/// Splits a mask into 8-connected components, ordered by their first pixel
/// in raster order.
pub fn extract_mask_regions(mask: &Mask) -> Vec<MaskRegion> {
    let (w, h) = (mask.width(), mask.height());
    let mut label = Grid::new(w, h, usize::MAX);
    let mut comps: Vec<Vec<(usize, usize)>> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !*mask.get(x, y) || *label.get(x, y) != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut pixels = Vec::new();
            let mut queue = VecDeque::from([(x, y)]);
            label.set(x, y, id);
            while let Some((cx, cy)) = queue.pop_front() {
                pixels.push((cx, cy));
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (nx, ny) = (cx as isize + dx, cy as isize + dy);
                        if !mask.in_bounds(nx, ny) {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if *mask.get(nx, ny) && *label.get(nx, ny) == usize::MAX {
                            label.set(nx, ny, id);
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            comps.push(pixels);
        }
    }
    comps
        .iter()
        .enumerate()
        .map(|(id, pixels)| {
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for (x, y) in pixels {
                x0 = x0.min(*x);
                y0 = y0.min(*y);
                x1 = x1.max(*x);
                y1 = y1.max(*y);
            }
            let rect = Rect::new(x0, y0, x1, y1);
            let mask_pixels = mask.crop(&rect);
            let component = Grid::from_fn(rect.width(), rect.height(), |x, y| *label.get(x + x0, y + y0) == id);
            MaskRegion {
                mask_id: id,
                rect,
                mask_pixels,
                component,
            }
        })
        .collect()
}

/// Share of nonzero Sobel magnitudes exceeding `tau_ratio × max magnitude`.
pub fn image_quality(image: &GrayImage, tau_ratio: f64) -> f64 {
    let mag = gradient_magnitude(image);
    let max = mag.iter().cloned().fold(0.0f32, f32::max) as f64;
    if max <= 1e-12 {
        return 0.0;
    }
    let tau = tau_ratio * max;
    let nonzero = mag.iter().filter(|m| **m as f64 > 1e-12).count();
    let large = mag.iter().filter(|m| **m as f64 > tau).count();
    large as f64 / nonzero as f64
}

/// Rotation angle plus translation norm of the relative pose; `None` when
/// either pose is unknown.
pub fn frame_distance(a: Option<&Pose>, b: Option<&Pose>) -> Option<f64> {
    let (a, b) = (a?, b?);
    let rel = a.inverse().compose(b);
    Some(rel.rotation_angle() + rel.translation.norm())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    /// Shortlist size of the similarity step.
    pub candidates: usize,
    /// Sources returned.
    pub selected: usize,
    pub w1: f64,
    pub w2: f64,
    /// Gradient threshold as a fraction of the maximum Sobel magnitude.
    pub gradient_ratio: f64,
    /// Sources whose mask covers more than this share of the region's
    /// footprint are dropped.
    pub max_mask_coverage: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            candidates: 50,
            selected: 8,
            w1: 1.0,
            w2: 0.5,
            gradient_ratio: 0.1,
            max_mask_coverage: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuitabilityScore {
    pub frame_id: FrameId,
    /// Normalized similarity.
    pub s: f64,
    /// Normalized distance.
    pub d: f64,
    pub q_ratio: f64,
    pub score: f64,
}

/// Normalizes `s` and `d` over the candidates (min–max; a flat range maps to
/// 0), scores them and returns them best first, ties by ascending frame id.
/// Candidates with unsolvable distance are discarded.
pub fn rank_candidates(raw: &[(FrameId, f64, Option<f64>, f64)], w1: f64, w2: f64) -> Vec<SuitabilityScore> {
    let solved: Vec<_> = raw.iter().filter_map(|(id, s, d, q)| d.map(|d| (*id, *s, d, *q))).collect();
    let norm = |vals: Vec<f64>| -> Vec<f64> {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        vals.iter()
            .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect()
    };
    let s_n = norm(solved.iter().map(|c| c.1).collect());
    let d_n = norm(solved.iter().map(|c| c.2).collect());
    let mut scores: Vec<SuitabilityScore> = solved
        .iter()
        .zip(s_n.iter().zip(&d_n))
        .map(|((id, _, _, q), (s, d))| SuitabilityScore {
            frame_id: *id,
            s: *s,
            d: *d,
            q_ratio: *q,
            score: (w1 * s - w2 * d) * q,
        })
        .collect();
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.frame_id.cmp(&b.frame_id)));
    scores
}

/// Fraction of the region's footprint in `source` that falls on the
/// source's own mask. The footprint is found by back-projecting the region
/// rectangle with target depth (masked pixels take the median depth of the
/// unmasked ones) and reprojecting with the known poses; without poses the
/// same pixel rectangle is used.
pub fn mask_coverage(region: &MaskRegion, target: &Frame, source: &Frame, intr: &CameraIntrinsics) -> f64 {
    let rect = region.rect;
    let step = ((rect.area() as f64 / 4000.0).sqrt().ceil() as usize).max(1);
    let relative = match (target.pose, source.pose) {
        (Some(t), Some(s)) => Some(s.inverse().compose(&t)),
        _ => None,
    };
    let mut ring_depths: Vec<f32> = Vec::new();
    let ctx = rect.expand(rect.width().max(rect.height()) / 4 + 2, target.width(), target.height());
    for y in ctx.y0..=ctx.y1 {
        for x in ctx.x0..=ctx.x1 {
            let d = *target.depth.get(x, y);
            if !*target.mask.get(x, y) && d > 0.0 {
                ring_depths.push(d);
            }
        }
    }
    let fill_depth = if ring_depths.is_empty() {
        None
    } else {
        let mid = ring_depths.len() / 2;
        ring_depths.select_nth_unstable_by(mid, f32::total_cmp);
        Some(ring_depths[mid])
    };
    let (mut landed, mut covered) = (0usize, 0usize);
    for y in (rect.y0..=rect.y1).step_by(step) {
        for x in (rect.x0..=rect.x1).step_by(step) {
            let (sx, sy) = match relative {
                Some(rel) => {
                    let d = *target.depth.get(x, y);
                    let d = if !*target.mask.get(x, y) && d > 0.0 { Some(d) } else { fill_depth };
                    let Some(d) = d else { continue };
                    let p = rel.transform_point(&intr.unproject_pixel(x as f64, y as f64, d as f64));
                    let pr = intr.project_point(&p);
                    if pr.out_of_bounds {
                        continue;
                    }
                    (pr.u.round() as isize, pr.v.round() as isize)
                }
                None => (x as isize, y as isize),
            };
            if !source.mask.in_bounds(sx, sy) {
                continue;
            }
            landed += 1;
            if *source.mask.get(sx as usize, sy as usize) {
                covered += 1;
            }
        }
    }
    if landed == 0 {
        1.0
    } else {
        covered as f64 / landed as f64
    }
}

/// Inputs shared by every region of one target frame.
pub struct SelectionContext<'a> {
    pub sequence: &'a Sequence,
    pub target: FrameId,
    pub tree: &'a VocabTree,
    /// `image_quality` of every frame.
    pub qualities: &'a [f64],
}

/// Two-step source selection for one region. `query` holds the target
/// features found in the unmasked part of the region; `distance` supplies
/// the frame distance to the target for a shortlisted frame.
pub fn select_sources(
    region: &MaskRegion,
    ctx: &SelectionContext,
    query: &FeatureSet,
    params: &SelectionParams,
    distance: impl Fn(FrameId) -> Option<f64>,
) -> Result<Vec<SuitabilityScore>> {
    let seq = ctx.sequence;
    let target = &seq.frames[ctx.target];
    let sims = ctx.tree.similarities(query);

    let mut eligible: Vec<(FrameId, f64)> = seq
        .frames
        .iter()
        .filter(|f| f.id != ctx.target)
        .filter(|f| mask_coverage(region, target, f, &seq.intrinsics) <= params.max_mask_coverage)
        .map(|f| (f.id, sims.get(f.id).copied().unwrap_or(0.0)))
        .collect();
    eligible.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    eligible.truncate(params.candidates);

    let q_target = ctx.qualities[ctx.target];
    if q_target <= 0.0 {
        log::warn!("target frame {} has zero image quality; using q ratio 1", ctx.target);
    }
    let raw: Vec<_> = eligible
        .iter()
        .map(|(id, s)| {
            let q = if q_target > 0.0 { ctx.qualities[*id] / q_target } else { 1.0 };
            (*id, *s, distance(*id), q)
        })
        .collect();
    let mut ranked = rank_candidates(&raw, params.w1, params.w2);
    if ranked.is_empty() {
        return Err(Error::Selection {
            mask_id: region.mask_id,
        });
    }
    ranked.truncate(params.selected);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn empty_mask_has_no_regions() {
        assert!(extract_mask_regions(&Mask::new(20, 20, false)).is_empty());
    }

    #[test]
    fn block_rect_is_tight() {
        let m = Grid::from_fn(30, 30, |x, y| (10..13).contains(&x) && (10..13).contains(&y));
        let r = extract_mask_regions(&m);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].rect, Rect::new(10, 10, 12, 12));
        assert_eq!(r[0].ring_pixels().count(), 0);
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let m = Grid::from_fn(10, 10, |x, y| x == y && x < 4);
        assert_eq!(extract_mask_regions(&m).len(), 1);
    }

    #[test]
    fn step_edge_quality_is_one() {
        let img = Grid::from_fn(20, 10, |x, _| if x < 10 { 0.0f32 } else { 1.0 });
        assert_eq!(image_quality(&img, 0.1), 1.0);
        assert_eq!(image_quality(&GrayImage::new(8, 8, 0.3), 0.1), 0.0);
    }

    #[test]
    fn distance_of_quarter_turn() {
        let a = Pose::identity();
        let b = Pose::from_axis_angle(Vector3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0), Vector3::zeros());
        let d = frame_distance(Some(&a), Some(&b)).unwrap();
        assert!((d - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(frame_distance(Some(&a), Some(&a)), Some(0.0));
        assert_eq!(frame_distance(None, Some(&a)), None);
    }

    #[test]
    fn ranking_example() {
        let raw = [(0, 1.0, Some(0.0), 1.0), (1, 1.0, Some(1.0), 1.0), (2, 0.0, Some(0.0), 1.0)];
        let r = rank_candidates(&raw, 1.0, 1.0);
        let ids: Vec<_> = r.iter().map(|s| s.frame_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(r.iter().map(|s| s.score).collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn unsolvable_candidates_vanish() {
        let raw = [(0, 1.0, None, 1.0), (1, 0.5, None, 1.0)];
        assert!(rank_candidates(&raw, 1.0, 0.5).is_empty());
    }
}
