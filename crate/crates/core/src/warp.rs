//! Homography estimation and source-to-target resampling.
//!
//! A global homography is found by RANSAC over feature matches. Inside each
//! target sub-image a grid of local homographies is then fitted by moving
//! DLT: every cell solves a DLT in which each correspondence is weighted by
//! a Gaussian of its distance to the cell centre (floored at `gamma`).
//! Cells with too little nearby support fall back to the global model.
//!
//! Homographies map source pixels to target pixels. Warping pulls: each
//! target pixel is mapped back through its cell's inverse.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Frame, FrameId};
use crate::error::{Error, Result};
use crate::features::{FeatureSet, MatchSet};
use crate::grid::{ColorImage, DepthMap, Grid, Mask, Rect, Rgb};
use crate::par;

pub type Point = [f64; 2];

/// Source point ↔ target point.
pub type Correspondence = (Point, Point);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    /// Scales so the bottom-right entry is 1 when it is not ~0.
    pub fn normalized(m: Matrix3<f64>) -> Self {
        let s = m[(2, 2)];
        if s.abs() > 1e-12 {
            Self(m / s)
        } else {
            Self(m / m.norm())
        }
    }

    pub fn apply(&self, p: Point) -> Option<Point> {
        let v = self.0 * Vector3::new(p[0], p[1], 1.0);
        if v[2].abs() < 1e-12 {
            return None;
        }
        Some([v[0] / v[2], v[1] / v[2]])
    }

    pub fn inverse(&self) -> Option<Homography> {
        if self.0.determinant().abs() <= 1e-12 {
            return None;
        }
        self.0.try_inverse().map(Self::normalized)
    }

    /// Frobenius distance between normalized matrices, relative to `other`.
    pub fn relative_error(&self, other: &Homography) -> f64 {
        let a = Self::normalized(self.0).0;
        let b = Self::normalized(other.0).0;
        (a - b).norm() / b.norm()
    }
}

fn hartley(points: impl Iterator<Item = Point> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |a, p| (a.0 + p[0], a.1 + p[1]));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = points.map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 1e-12 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

#[inline]
fn transform(t: &Matrix3<f64>, p: Point) -> Point {
    [t[(0, 0)] * p[0] + t[(0, 2)], t[(1, 1)] * p[1] + t[(1, 2)]]
}

/// The two DLT rows of one correspondence (normalized coordinates).
#[inline]
fn dlt_rows(s: Point, d: Point) -> [[f64; 9]; 2] {
    let (x, y) = (s[0], s[1]);
    let (u, v) = (d[0], d[1]);
    [
        [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u],
        [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v],
    ]
}

fn nearly_collinear(points: &[Point]) -> bool {
    let n = points.len() as f64;
    let (cx, cy) = points.iter().fold((0.0, 0.0), |a, p| (a.0 + p[0] / n, a.1 + p[1] / n));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (lmax, lmin) = (tr / 2.0 + disc, tr / 2.0 - disc);
    lmax <= 0.0 || lmin / lmax < 1e-10
}

/// Weighted DLT with Hartley normalization. Needs at least four
/// non-collinear correspondences.
pub fn dlt_homography(pairs: &[Correspondence], weights: Option<&[f64]>) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::Estimation(format!("DLT needs 4 correspondences, got {}", pairs.len())));
    }
    let src: Vec<Point> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Point> = pairs.iter().map(|p| p.1).collect();
    if nearly_collinear(&src) || nearly_collinear(&dst) {
        return Err(Error::Estimation("degenerate (collinear) correspondences".into()));
    }
    let t1 = hartley(src.iter().copied());
    let t2 = hartley(dst.iter().copied());
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (s, d)) in pairs.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[k]).sqrt();
        let r = dlt_rows(transform(&t1, *s), transform(&t2, *d));
        for c in 0..9 {
            a[(2 * k, c)] = w * r[0][c];
            a[(2 * k + 1, c)] = w * r[1][c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Estimation("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|i, j| svd.singular_values[*j].total_cmp(&svd.singular_values[*i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    if sv(0) <= 0.0 || sv(7) <= 1e-9 * sv(0) {
        return Err(Error::Estimation("rank-deficient DLT system".into()));
    }
    let h = v_t.row(order[8]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t2_inv = t2.try_inverse().expect("similarity transform is invertible");
    let hm = Homography::normalized(t2_inv * hn * t1);
    if hm.0.determinant().abs() <= 1e-12 {
        return Err(Error::Estimation("singular homography".into()));
    }
    Ok(hm)
}

/// Source/target point pairs of a match set (`a` = target, `b` = source).
pub fn correspondences(matches: &MatchSet, target: &FeatureSet, source: &FeatureSet) -> Vec<Correspondence> {
    matches
        .pairs
        .iter()
        .map(|m| {
            let t = &target.keypoints[m.index_a];
            let s = &source.keypoints[m.index_b];
            ([s.x as f64, s.y as f64], [t.x as f64, t.y as f64])
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Inlier transfer error in target pixels.
    pub threshold: f64,
    pub max_iters: usize,
    /// Fewer consensus members than this is a failure.
    pub min_inliers: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            max_iters: 2000,
            min_inliers: 8,
            confidence: 0.999,
            seed: 0,
        }
    }
}

fn transfer_error(h: &Homography, c: &Correspondence) -> f64 {
    match h.apply(c.0) {
        Some(p) => ((p[0] - c.1[0]).powi(2) + (p[1] - c.1[1]).powi(2)).sqrt(),
        None => f64::INFINITY,
    }
}

fn consensus(h: &Homography, pairs: &[Correspondence], thr: f64) -> (Vec<usize>, f64) {
    let mut inl = Vec::new();
    let mut err = 0.0;
    for (i, c) in pairs.iter().enumerate() {
        let e = transfer_error(h, c);
        if e < thr {
            inl.push(i);
            err += e;
        }
    }
    (inl, err)
}

/// Maximal-consensus homography, refit on its inliers. Deterministic for
/// a fixed seed.
pub fn ransac_homography(pairs: &[Correspondence], params: &RansacParams) -> Result<(Homography, Vec<usize>)> {
    let min_inliers = params.min_inliers.max(4);
    if pairs.len() < 4 {
        return Err(Error::Estimation(format!("RANSAC needs 4 matches, got {}", pairs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Homography, Vec<usize>, f64)> = None;
    let mut iters_needed = params.max_iters;
    let mut it = 0;
    while it < iters_needed.min(params.max_iters) {
        it += 1;
        let idx = sample(&mut rng, pairs.len(), 4).into_vec();
        let subset: Vec<Correspondence> = idx.iter().map(|i| pairs[*i]).collect();
        let Ok(h) = dlt_homography(&subset, None) else { continue };
        let (inl, err) = consensus(&h, pairs, params.threshold);
        let better = match &best {
            None => true,
            Some((_, b, berr)) => inl.len() > b.len() || (inl.len() == b.len() && err < *berr),
        };
        if better {
            let ratio = inl.len() as f64 / pairs.len() as f64;
            let p_fail = 1.0 - ratio.powi(4);
            if p_fail <= 1e-12 {
                iters_needed = it;
            } else {
                let need = ((1.0 - params.confidence).ln() / p_fail.ln()).ceil();
                iters_needed = if need.is_finite() { (need as usize).max(it) } else { params.max_iters };
            }
            best = Some((h, inl, err));
        }
    }
    let (mut h, mut inliers, _) = best.ok_or_else(|| Error::Estimation("no non-degenerate sample".into()))?;
    for _ in 0..5 {
        if inliers.len() < min_inliers {
            break;
        }
        let subset: Vec<Correspondence> = inliers.iter().map(|i| pairs[*i]).collect();
        let Ok(refit) = dlt_homography(&subset, None) else { break };
        let (inl, _) = consensus(&refit, pairs, params.threshold);
        if inl.len() < inliers.len() {
            break;
        }
        let stable = inl == inliers;
        h = refit;
        inliers = inl;
        if stable {
            break;
        }
    }
    if inliers.len() < min_inliers {
        return Err(Error::Estimation(format!(
            "only {} RANSAC inliers (need {min_inliers})",
            inliers.len()
        )));
    }
    Ok((h, inliers))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub cell_px: usize,
    /// Gaussian weight scale in pixels.
    pub sigma_px: f64,
    /// Weight floor.
    pub gamma: f64,
    /// Minimum effective (unfloored) weight for a cell to keep its own fit.
    pub min_support: f64,
    /// Correspondences are taken from the rectangle grown by this fraction
    /// of its size on each side.
    pub margin_ratio: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            cell_px: 32,
            sigma_px: 64.0,
            gamma: 0.025,
            min_support: 8.0,
            margin_ratio: 0.5,
        }
    }
}

/// Per-cell homographies over a target rectangle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalWarpGrid {
    pub rect: Rect,
    pub cell_px: usize,
    pub cols: usize,
    pub rows: usize,
    pub cells: Vec<Homography>,
    inverses: Vec<Homography>,
    pub support: Vec<f64>,
    pub inherited: Vec<bool>,
    pub global: Homography,
}

impl LocalWarpGrid {
    /// Every cell uses `h`.
    pub fn uniform(rect: Rect, cell_px: usize, h: Homography) -> Result<Self> {
        let cols = rect.width().div_ceil(cell_px);
        let rows = rect.height().div_ceil(cell_px);
        let inv = h.inverse().ok_or_else(|| Error::Estimation("homography is singular".into()))?;
        Ok(Self {
            rect,
            cell_px,
            cols,
            rows,
            cells: vec![h; cols * rows],
            inverses: vec![inv; cols * rows],
            support: vec![0.0; cols * rows],
            inherited: vec![true; cols * rows],
            global: h,
        })
    }

    pub fn cell_index(&self, x: usize, y: usize) -> usize {
        let cx = ((x.saturating_sub(self.rect.x0)) / self.cell_px).min(self.cols - 1);
        let cy = ((y.saturating_sub(self.rect.y0)) / self.cell_px).min(self.rows - 1);
        cy * self.cols + cx
    }

    /// Centre of a cell in target pixels.
    pub fn cell_center(&self, idx: usize) -> Point {
        let (cx, cy) = (idx % self.cols, idx / self.cols);
        [
            self.rect.x0 as f64 + (cx as f64 + 0.5) * self.cell_px as f64 - 0.5,
            self.rect.y0 as f64 + (cy as f64 + 0.5) * self.cell_px as f64 - 0.5,
        ]
    }

    pub fn homography_at(&self, x: usize, y: usize) -> &Homography {
        &self.cells[self.cell_index(x, y)]
    }

    /// Source location of target pixel `(x, y)`.
    pub fn to_source(&self, x: usize, y: usize) -> Option<Point> {
        self.inverses[self.cell_index(x, y)].apply([x as f64, y as f64])
    }
}

/// Moving-DLT grid over `rect`. `inliers` are source↔target pairs that
/// passed the global RANSAC.
pub fn fit_local_grid(inliers: &[Correspondence], global: &Homography, rect: Rect, params: &GridParams) -> Result<LocalWarpGrid> {
    let mut grid = LocalWarpGrid::uniform(rect, params.cell_px, *global)?;
    let mx = (rect.width() as f64 * params.margin_ratio).max(params.cell_px as f64);
    let my = (rect.height() as f64 * params.margin_ratio).max(params.cell_px as f64);
    let local: Vec<Correspondence> = inliers
        .iter()
        .filter(|(_, t)| {
            t[0] >= rect.x0 as f64 - mx && t[0] <= rect.x1 as f64 + mx && t[1] >= rect.y0 as f64 - my && t[1] <= rect.y1 as f64 + my
        })
        .copied()
        .collect();
    if local.len() < 4 || nearly_collinear(&local.iter().map(|c| c.0).collect::<Vec<_>>()) {
        return Ok(grid);
    }
    let t1 = hartley(local.iter().map(|c| c.0));
    let t2 = hartley(local.iter().map(|c| c.1));
    let t2_inv = t2.try_inverse().expect("similarity transform is invertible");
    let outer: Vec<SMatrix<f64, 9, 9>> = local
        .iter()
        .map(|(s, d)| {
            let r = dlt_rows(transform(&t1, *s), transform(&t2, *d));
            let a = SMatrix::<f64, 9, 1>::from_row_slice(&r[0]);
            let b = SMatrix::<f64, 9, 1>::from_row_slice(&r[1]);
            a * a.transpose() + b * b.transpose()
        })
        .collect();
    let inv_s2 = 1.0 / (params.sigma_px * params.sigma_px);

    let fits = par::map_range(grid.cells.len(), |idx| {
        let c = grid.cell_center(idx);
        let mut m = SMatrix::<f64, 9, 9>::zeros();
        let mut support = 0.0;
        for ((_, t), o) in local.iter().zip(&outer) {
            let d2 = (t[0] - c[0]).powi(2) + (t[1] - c[1]).powi(2);
            let g = (-d2 * inv_s2).exp();
            support += g;
            let w = g.max(params.gamma);
            m += o * (w * w);
        }
        if support < params.min_support {
            return (support, None);
        }
        let eig = m.symmetric_eigen();
        let mut k = 0;
        for i in 1..9 {
            if eig.eigenvalues[i] < eig.eigenvalues[k] {
                k = i;
            }
        }
        let h = eig.eigenvectors.column(k);
        let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
        let hm = Homography::normalized(t2_inv * hn * t1);
        (support, hm.inverse().map(|inv| (hm, inv)))
    });
    for (idx, (support, fit)) in fits.into_iter().enumerate() {
        grid.support[idx] = support;
        if let Some((h, inv)) = fit {
            grid.cells[idx] = h;
            grid.inverses[idx] = inv;
            grid.inherited[idx] = false;
        }
    }
    Ok(grid)
}

/// A source frame resampled onto a target rectangle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpedProposal {
    pub frame_id: FrameId,
    pub rect: Rect,
    pub color: ColorImage,
    pub depth: DepthMap,
    /// Source pixel (or a bilinear tap of it) was masked in the source.
    pub source_mask: Mask,
    /// A source pixel landed here.
    pub valid: Mask,
    /// Continuous source location of every target pixel; `(-1, -1)` where
    /// the inverse homography is undefined.
    pub source_xy: Grid<[f32; 2]>,
    pub gain: f32,
}

impl WarpedProposal {
    /// Valid and not masked in the source.
    #[inline]
    pub fn usable(&self, x: usize, y: usize) -> bool {
        *self.valid.get(x, y) && !*self.source_mask.get(x, y)
    }

    pub fn usable_mask(&self) -> Mask {
        Grid::from_fn(self.rect.width(), self.rect.height(), |x, y| self.usable(x, y))
    }
}

/// Pulls `source` onto `rect` through the grid's inverse homographies.
/// Color is bilinear, depth and masks nearest-neighbour. A single gain,
/// least squares over usable pixels of `ring` (rect-local), brings the
/// color to the target exposure.
pub fn warp_frame(source: &Frame, grid: &LocalWarpGrid, rect: Rect, target: &ColorImage, ring: &Mask) -> WarpedProposal {
    let src_color = source.color.to_color();
    let (w, h) = (rect.width(), rect.height());
    let (sw, sh) = (source.width() as f64, source.height() as f64);
    struct Px {
        color: Rgb,
        depth: f32,
        masked: bool,
        valid: bool,
        xy: [f32; 2],
    }
    let rows = par::map_range(h, |y| {
        (0..w)
            .map(|x| {
                let (tx, ty) = (rect.x0 + x, rect.y0 + y);
                let Some(s) = grid.to_source(tx, ty) else {
                    return Px {
                        color: [0.0; 3],
                        depth: 0.0,
                        masked: false,
                        valid: false,
                        xy: [-1.0; 2],
                    };
                };
                let (rx, ry) = (s[0].round(), s[1].round());
                let valid = rx >= 0.0 && ry >= 0.0 && rx < sw && ry < sh;
                if !valid {
                    return Px {
                        color: [0.0; 3],
                        depth: 0.0,
                        masked: false,
                        valid: false,
                        xy: [s[0] as f32, s[1] as f32],
                    };
                }
                let (rx, ry) = (rx as usize, ry as usize);
                let (fx, fy) = (s[0].floor() as isize, s[1].floor() as isize);
                let masked = [(0, 0), (1, 0), (0, 1), (1, 1)]
                    .iter()
                    .any(|(dx, dy)| *source.mask.clamped(fx + dx, fy + dy))
                    || *source.mask.get(rx, ry);
                Px {
                    color: src_color.sample_bilinear(s[0], s[1]),
                    depth: *source.depth.get(rx, ry),
                    masked,
                    valid: true,
                    xy: [s[0] as f32, s[1] as f32],
                }
            })
            .collect::<Vec<_>>()
    });
    let px: Vec<Px> = rows.into_iter().flatten().collect();

    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (i, p) in px.iter().enumerate() {
        let (x, y) = (i % w, i / w);
        if !p.valid || p.masked || !*ring.get(x, y) {
            continue;
        }
        let t = target.get(rect.x0 + x, rect.y0 + y);
        for k in 0..3 {
            num += p.color[k] as f64 * t[k] as f64;
            den += p.color[k] as f64 * p.color[k] as f64;
        }
    }
    let gain = if den > 1e-12 && num > 0.0 { (num / den) as f32 } else { 1.0 };

    WarpedProposal {
        frame_id: source.id,
        rect,
        color: Grid::from_vec(w, h, px.iter().map(|p| p.color.map(|c| (c * gain).clamp(0.0, 1.0))).collect()),
        depth: Grid::from_vec(w, h, px.iter().map(|p| p.depth).collect()),
        source_mask: Grid::from_vec(w, h, px.iter().map(|p| p.masked).collect()),
        valid: Grid::from_vec(w, h, px.iter().map(|p| p.valid).collect()),
        source_xy: Grid::from_vec(w, h, px.iter().map(|p| p.xy).collect()),
        gain,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn known_h() -> Homography {
        Homography::normalized(Matrix3::new(1.02, 0.03, 4.0, -0.02, 0.98, -3.0, 1e-4, -5e-5, 1.0))
    }

    #[test]
    fn identity_from_four_pairs() {
        let pts = [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]];
        let pairs: Vec<_> = pts.iter().map(|p| (*p, *p)).collect();
        let h = dlt_homography(&pairs, None).unwrap();
        assert!((h.0 - Matrix3::identity()).norm() < 1e-9);
    }

    #[test]
    fn recovers_known_homography() {
        let truth = known_h();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<_> = (0..20)
            .map(|_| {
                let p = [rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)];
                (p, truth.apply(p).unwrap())
            })
            .collect();
        let h = dlt_homography(&pairs, None).unwrap();
        assert!(h.relative_error(&truth) < 1e-6);
    }

    #[test]
    fn collinear_points_fail() {
        let pairs: Vec<_> = (0..4).map(|i| ([i as f64, 2.0 * i as f64], [i as f64, i as f64])).collect();
        assert!(dlt_homography(&pairs, None).is_err());
    }

    #[test]
    fn consistent_matches_are_all_inliers() {
        let truth = known_h();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pairs: Vec<_> = (0..60)
            .map(|_| {
                let p = [rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)];
                (p, truth.apply(p).unwrap())
            })
            .collect();
        let (h, inl) = ransac_homography(&pairs, &RansacParams::default()).unwrap();
        assert_eq!(inl.len(), 60);
        assert!(h.relative_error(&truth) < 1e-6);
    }

    #[test]
    fn pure_outliers_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs: Vec<_> = (0..100)
            .map(|_| {
                (
                    [rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)],
                    [rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)],
                )
            })
            .collect();
        assert!(ransac_homography(&pairs, &RansacParams::default()).is_err());
    }

    #[test]
    fn corner_matches_leave_far_cells_global() {
        let truth = known_h();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pairs: Vec<_> = (0..40)
            .map(|_| {
                let p = [rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0)];
                (p, truth.apply(p).unwrap())
            })
            .collect();
        let rect = Rect::new(0, 0, 319, 319);
        let grid = fit_local_grid(&pairs, &truth, rect, &GridParams::default()).unwrap();
        let far = grid.cell_index(300, 300);
        assert!(grid.inherited[far]);
        assert_eq!(grid.cells[far], truth);
        assert!(!grid.inherited[grid.cell_index(10, 10)]);
    }

    #[test]
    fn single_plane_grid_matches_global() {
        let truth = known_h();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pairs: Vec<_> = (0..300)
            .map(|_| {
                let p = [rng.gen_range(0.0..256.0), rng.gen_range(0.0..192.0)];
                (p, truth.apply(p).unwrap())
            })
            .collect();
        let grid = fit_local_grid(&pairs, &truth, Rect::new(0, 0, 255, 191), &GridParams::default()).unwrap();
        for h in &grid.cells {
            assert!(h.relative_error(&truth) < 1e-3);
        }
    }
}
