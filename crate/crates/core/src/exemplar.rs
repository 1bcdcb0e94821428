//! Multi-view exemplar inpainting of residual color holes.
//!
//! The search domain holds the known part of the target plus every warped
//! proposal, all on the same pixel grid. A patch pair costs
//!
//! ```text
//! Σ_s ‖I(p_i+s) - α·I(p_j+s)‖ + g·‖∇I(p_i+s) - ∇I(p_j+s)‖,   α = √(ΣI_i² / ΣI_j²)
//! ```
//!
//! over the known offsets of the target patch, divided by their count. Holes
//! are filled greedily by priority, then refined by re-matching and voting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{color_gradient_at, grad_dist, luminance, rgb_dist, sobel_color, ColorImage, Grid, Mask, Rgb};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarParams {
    pub patch_radius: usize,
    pub gradient_weight: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Uniform samples over the whole domain per query.
    pub random_samples: usize,
    /// Best random samples refined by local search.
    pub seeds: usize,
    /// Rounds of shrinking-radius search around each seed.
    pub search_rounds: usize,
    /// Patches filled per greedy step.
    pub batch: usize,
    pub refine_sweeps: usize,
    pub seed: u64,
}

impl Default for ExemplarParams {
    fn default() -> Self {
        Self {
            patch_radius: 4,
            gradient_weight: 1.0,
            alpha_min: 0.5,
            alpha_max: 2.0,
            random_samples: 128,
            seeds: 16,
            search_rounds: 4,
            batch: 16,
            refine_sweeps: 3,
            seed: 0,
        }
    }
}

/// One image of the search domain.
#[derive(Clone, Debug)]
pub struct DomainImage {
    pub color: ColorImage,
    pub grads: Grid<[f32; 6]>,
    pub valid: Mask,
    pub searchable: Mask,
    centers: Vec<(u32, u32)>,
}

/// Search domain. Image 0 is conventionally the target.
#[derive(Clone, Debug)]
pub struct PatchDomain {
    pub images: Vec<DomainImage>,
    pub radius: usize,
    total: usize,
}

impl PatchDomain {
    /// A center is searchable when the window of radius `radius + 1` around
    /// it is valid (the extra ring keeps Sobel stencils inside valid data).
    pub fn new(images: Vec<(ColorImage, Mask)>, radius: usize) -> Self {
        let r = radius as isize + 1;
        let images: Vec<DomainImage> = images
            .into_iter()
            .map(|(color, valid)| {
                let (w, h) = (color.width(), color.height());
                // Summed-area table of invalid pixels.
                let mut sat = vec![0u32; (w + 1) * (h + 1)];
                for y in 0..h {
                    for x in 0..w {
                        let bad = u32::from(!*valid.get(x, y));
                        sat[(y + 1) * (w + 1) + x + 1] = bad + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
                    }
                }
                let searchable = Grid::from_fn(w, h, |x, y| {
                    let (x0, y0, x1, y1) = (x as isize - r, y as isize - r, x as isize + r + 1, y as isize + r + 1);
                    if x0 < 0 || y0 < 0 || x1 > w as isize || y1 > h as isize {
                        return false;
                    }
                    let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
                    sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0] == sat[y0 * (w + 1) + x1] + sat[y1 * (w + 1) + x0]
                });
                let centers = searchable.enumerate().filter(|(_, _, s)| **s).map(|(x, y, _)| (x as u32, y as u32)).collect();
                DomainImage {
                    grads: sobel_color(&color),
                    color,
                    valid,
                    searchable,
                    centers,
                }
            })
            .collect();
        let total = images.iter().map(|i| i.centers.len()).sum();
        Self { images, radius, total }
    }

    /// Number of searchable patches over all images.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    #[inline]
    pub fn searchable(&self, image: usize, x: isize, y: isize) -> bool {
        let img = &self.images[image];
        img.searchable.in_bounds(x, y) && *img.searchable.get(x as usize, y as usize)
    }

    fn nth_center(&self, mut n: usize) -> (usize, usize, usize) {
        for (k, img) in self.images.iter().enumerate() {
            if n < img.centers.len() {
                let (x, y) = img.centers[n];
                return (k, x as usize, y as usize);
            }
            n -= img.centers.len();
        }
        unreachable!("index within total")
    }
}

/// Where a filled pixel's value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image: usize,
    pub x: usize,
    pub y: usize,
}

/// Working image during synthesis.
#[derive(Clone, Debug, PartialEq)]
pub struct FillState {
    pub color: ColorImage,
    pub known: Mask,
    pub confidence: Grid<f32>,
    pub provenance: Grid<Option<Provenance>>,
}

impl FillState {
    pub fn new(color: &ColorImage, holes: &Mask) -> Self {
        Self {
            color: color.clone(),
            known: holes.map(|h| !h),
            confidence: holes.map(|h| if *h { 0.0 } else { 1.0 }),
            provenance: Grid::new(color.width(), color.height(), None),
        }
    }
}

/// Known part of a target patch, with gradients where the full Sobel
/// stencil is known.
struct QueryPatch {
    offsets: Vec<(isize, isize, Rgb, Option<[f32; 6]>)>,
    sum_sq: f64,
}

fn query_patch(state: &FillState, px: usize, py: usize, radius: usize) -> QueryPatch {
    let r = radius as isize;
    let mut offsets = Vec::new();
    let mut sum_sq = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (px as isize + dx, py as isize + dy);
            if !state.known.in_bounds(x, y) || !*state.known.get(x as usize, y as usize) {
                continue;
            }
            let stencil_known = (-1..=1).all(|sy| (-1..=1).all(|sx| *state.known.clamped(x + sx, y + sy)));
            let grad = stencil_known.then(|| color_gradient_at(&state.color, x, y));
            let c = *state.color.get(x as usize, y as usize);
            sum_sq += c.iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
            offsets.push((dx, dy, c, grad));
        }
    }
    QueryPatch { offsets, sum_sq }
}

/// Matching cost and brightness ratio of one candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub image: usize,
    pub x: usize,
    pub y: usize,
    pub cost: f64,
    pub alpha: f64,
}

fn eval(q: &QueryPatch, domain: &PatchDomain, image: usize, jx: usize, jy: usize, params: &ExemplarParams) -> Exemplar {
    let img = &domain.images[image];
    let mut sj = 0.0;
    for (dx, dy, _, _) in &q.offsets {
        let c = img.color.get((jx as isize + dx) as usize, (jy as isize + dy) as usize);
        sj += c.iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
    }
    let alpha = if sj > 1e-12 { (q.sum_sq / sj).sqrt() } else { 1.0 }.clamp(params.alpha_min, params.alpha_max);
    let mut cost = 0.0;
    for (dx, dy, ci, gi) in &q.offsets {
        let (x, y) = ((jx as isize + dx) as usize, (jy as isize + dy) as usize);
        let cj = img.color.get(x, y);
        let scaled = cj.map(|v| (v as f64 * alpha) as f32);
        cost += rgb_dist(ci, &scaled);
        if let Some(gi) = gi {
            cost += params.gradient_weight * grad_dist(gi, img.grads.get(x, y));
        }
    }
    Exemplar {
        image,
        x: jx,
        y: jy,
        cost: cost / q.offsets.len().max(1) as f64,
        alpha,
    }
}

/// Cost of matching the target patch at `pi` with patch `pj` of `image`.
/// `None` when the target patch has no known pixel or `pj` is not searchable.
pub fn patch_ssd(pi: (usize, usize), image: usize, pj: (usize, usize), domain: &PatchDomain, state: &FillState, params: &ExemplarParams) -> Option<Exemplar> {
    if !domain.searchable(image, pj.0 as isize, pj.1 as isize) {
        return None;
    }
    let q = query_patch(state, pi.0, pi.1, domain.radius);
    (!q.offsets.is_empty()).then(|| eval(&q, domain, image, pj.0, pj.1, params))
}

fn better(a: &Exemplar, b: &Exemplar) -> bool {
    (a.cost, a.image, a.y, a.x) < (b.cost, b.image, b.y, b.x)
}

fn query_rng(seed: u64, x: usize, y: usize, salt: u64) -> ChaCha8Rng {
    let key = (y as u64) << 32 | x as u64;
    ChaCha8Rng::seed_from_u64(seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn search_query(q: &QueryPatch, pi: (usize, usize), domain: &PatchDomain, hints: &[(usize, isize, isize)], params: &ExemplarParams, salt: u64) -> Result<Exemplar> {
    if domain.is_empty() {
        return Err(Error::Search);
    }
    let mut rng = query_rng(params.seed, pi.0, pi.1, salt);
    let at = |k: usize, x: isize, y: isize| domain.searchable(k, x, y).then(|| eval(q, domain, k, x as usize, y as usize, params));
    let mut pool: Vec<Exemplar> = Vec::new();
    for k in 0..domain.images.len() {
        pool.extend(at(k, pi.0 as isize, pi.1 as isize));
    }
    for (k, x, y) in hints {
        pool.extend(at(*k, *x, *y));
    }
    for _ in 0..params.random_samples {
        let (k, x, y) = domain.nth_center(rng.gen_range(0..domain.len()));
        pool.extend(at(k, x as isize, y as isize));
    }
    pool.sort_by(|a, b| (a.cost, a.image, a.y, a.x).partial_cmp(&(b.cost, b.image, b.y, b.x)).expect("finite costs"));
    pool.dedup_by(|a, b| (a.image, a.x, a.y) == (b.image, b.x, b.y));
    pool.truncate(params.seeds.max(1));

    let extent = domain.images.iter().map(|i| i.color.width().max(i.color.height())).max().unwrap_or(1) as isize;
    let descend = |mut cur: Exemplar| {
        for _ in 0..64 {
            let mut next = cur;
            for (dx, dy) in crate::grid::RING8 {
                if let Some(e) = at(cur.image, cur.x as isize + dx, cur.y as isize + dy) {
                    if better(&e, &next) {
                        next = e;
                    }
                }
            }
            if next == cur {
                break;
            }
            cur = next;
        }
        cur
    };
    let mut best: Option<Exemplar> = None;
    for seed in pool {
        let mut cur = descend(seed);
        for _ in 0..params.search_rounds {
            let mut radius = extent;
            while radius >= 1 {
                for _ in 0..2 {
                    let x = cur.x as isize + rng.gen_range(-radius..=radius);
                    let y = cur.y as isize + rng.gen_range(-radius..=radius);
                    if let Some(e) = at(cur.image, x, y) {
                        if better(&e, &cur) {
                            cur = descend(e);
                        }
                    }
                }
                radius /= 2;
            }
        }
        if best.as_ref().is_none_or(|b| better(&cur, b)) {
            best = Some(cur);
        }
    }
    // Aligned views: try the winner's location in every image.
    let mut b = best.ok_or(Error::Search)?;
    for k in 0..domain.images.len() {
        if let Some(e) = at(k, b.x as isize, b.y as isize) {
            if better(&e, &b) {
                b = descend(e);
            }
        }
    }
    Ok(b)
}

/// Candidates implied by the provenance of filled pixels in the window.
fn propagation_hints(state: &FillState, pi: (usize, usize), radius: usize) -> Vec<(usize, isize, isize)> {
    let r = radius as isize;
    let mut hints = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (pi.0 as isize + dx, pi.1 as isize + dy);
            if !state.provenance.in_bounds(x, y) {
                continue;
            }
            if let Some(p) = state.provenance.get(x as usize, y as usize) {
                let h = (p.image, p.x as isize - dx, p.y as isize - dy);
                if !hints.contains(&h) {
                    hints.push(h);
                }
            }
            if hints.len() >= 16 {
                return hints;
            }
        }
    }
    hints
}

/// Randomized search with propagation over the multi-image domain.
pub fn search_exemplar(pi: (usize, usize), domain: &PatchDomain, state: &FillState, params: &ExemplarParams) -> Result<Exemplar> {
    let q = query_patch(state, pi.0, pi.1, domain.radius);
    if q.offsets.is_empty() {
        return Err(Error::Search);
    }
    search_query(&q, pi, domain, &propagation_hints(state, pi, domain.radius), params, 0)
}

/// Reference scan over every searchable patch.
pub fn exhaustive_search(pi: (usize, usize), domain: &PatchDomain, state: &FillState, params: &ExemplarParams) -> Result<Exemplar> {
    let q = query_patch(state, pi.0, pi.1, domain.radius);
    if q.offsets.is_empty() || domain.is_empty() {
        return Err(Error::Search);
    }
    let mut best: Option<Exemplar> = None;
    for (k, img) in domain.images.iter().enumerate() {
        for (x, y) in &img.centers {
            let e = eval(&q, domain, k, *x as usize, *y as usize, params);
            if best.as_ref().is_none_or(|b| better(&e, b)) {
                best = Some(e);
            }
        }
    }
    best.ok_or(Error::Search)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintResult {
    pub color: ColorImage,
    pub provenance: Grid<Option<Provenance>>,
    /// Pixels filled from exemplars.
    pub filled: usize,
    /// Pixels filled by the diffusion fallback.
    pub fallback: usize,
    /// Energy after the greedy pass, then after each refinement sweep.
    pub energy: Vec<f64>,
}

fn priority(state: &FillState, x: usize, y: usize, radius: usize) -> f64 {
    let r = radius as isize;
    let (mut conf, mut n) = (0.0, 0.0);
    let mut strongest = (0.0f32, 0.0f32, 0.0f32);
    for dy in -r..=r {
        for dx in -r..=r {
            let (qx, qy) = (x as isize + dx, y as isize + dy);
            if !state.known.in_bounds(qx, qy) {
                continue;
            }
            n += 1.0;
            let (ux, uy) = (qx as usize, qy as usize);
            if *state.known.get(ux, uy) {
                conf += *state.confidence.get(ux, uy) as f64;
                if (dx.abs() <= 2 && dy.abs() <= 2) && (-1..=1).all(|sy| (-1..=1).all(|sx| *state.known.clamped(qx + sx, qy + sy))) {
                    let (gx, gy) = crate::grid::sobel_at(|a, b| luminance(state.color.clamped(a, b)), qx, qy);
                    let m = gx * gx + gy * gy;
                    if m > strongest.0 {
                        strongest = (m, gx, gy);
                    }
                }
            }
        }
    }
    let (nx, ny) = crate::grid::sobel_at(|a, b| if *state.known.clamped(a, b) { 1.0 } else { 0.0 }, x as isize, y as isize);
    let nn = (nx * nx + ny * ny).sqrt();
    let data = if nn > 0.0 {
        // Isophote (−gy, gx) against the front normal.
        ((-strongest.2 * nx + strongest.1 * ny) / nn).abs() as f64
    } else {
        0.0
    };
    (conf / n) * (data + 1e-3)
}

fn fill_front(state: &FillState, holes: &Mask) -> Vec<(usize, usize)> {
    holes
        .enumerate()
        .filter(|(x, y, h)| {
            **h && !*state.known.get(*x, *y)
                && crate::grid::RING8.iter().any(|(dx, dy)| {
                    let (nx, ny) = (*x as isize + dx, *y as isize + dy);
                    state.known.in_bounds(nx, ny) && *state.known.get(nx as usize, ny as usize)
                })
        })
        .map(|(x, y, _)| (x, y))
        .collect()
}

/// Fills unknown pixels by repeated averaging of known 4-neighbours.
/// Returns how many pixels were filled.
pub fn diffuse_fill(color: &mut ColorImage, known: &mut Mask) -> usize {
    let (w, h) = (color.width(), color.height());
    let mut filled = 0;
    loop {
        let mut updates = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if *known.get(x, y) {
                    continue;
                }
                let mut acc = [0.0f32; 3];
                let mut n = 0.0;
                for (dx, dy) in crate::grid::NEIGHBORS4 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if known.in_bounds(nx, ny) && *known.get(nx as usize, ny as usize) {
                        let c = color.get(nx as usize, ny as usize);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                        n += 1.0;
                    }
                }
                if n > 0.0 {
                    updates.push((x, y, acc.map(|v| v / n)));
                }
            }
        }
        if updates.is_empty() {
            break;
        }
        for (x, y, c) in updates {
            color.set(x, y, c);
            known.set(x, y, true);
            filled += 1;
        }
    }
    for y in 0..h {
        for x in 0..w {
            if !*known.get(x, y) {
                color.set(x, y, [0.0; 3]);
                filled += 1;
            }
        }
    }
    filled
}

fn patch_energy(state: &FillState, centers: &[(usize, usize)], nnf: &[Exemplar], domain: &PatchDomain, params: &ExemplarParams) -> Vec<Exemplar> {
    par::map_range(centers.len(), |i| {
        let (x, y) = centers[i];
        let q = query_patch(state, x, y, domain.radius);
        eval(&q, domain, nnf[i].image, nnf[i].x, nnf[i].y, params)
    })
}

/// Fills `holes` of `color` from `domain`.
pub fn inpaint_color(color: &ColorImage, holes: &Mask, domain: &PatchDomain, params: &ExemplarParams) -> Result<InpaintResult> {
    let radius = domain.radius;
    let mut state = FillState::new(color, holes);
    let hole_count = holes.count();
    if hole_count == 0 {
        return Ok(InpaintResult {
            color: color.clone(),
            provenance: state.provenance,
            filled: 0,
            fallback: 0,
            energy: Vec::new(),
        });
    }
    let mut filled = 0;
    if !domain.is_empty() {
        let mut step = 0u64;
        loop {
            let front = fill_front(&state, holes);
            if front.is_empty() {
                break;
            }
            let mut ranked: Vec<(f64, usize, usize)> = front.iter().map(|(x, y)| (priority(&state, *x, *y, radius), *x, *y)).collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
            let mut chosen: Vec<(usize, usize)> = Vec::new();
            for (_, x, y) in &ranked {
                if chosen.iter().all(|(cx, cy)| cx.abs_diff(*x) > 2 * radius || cy.abs_diff(*y) > 2 * radius) {
                    chosen.push((*x, *y));
                    if chosen.len() >= params.batch {
                        break;
                    }
                }
            }
            let found = par::map_slice(&chosen, |(x, y)| {
                let q = query_patch(&state, *x, *y, radius);
                search_query(&q, (*x, *y), domain, &propagation_hints(&state, (*x, *y), radius), params, step)
            });
            step += 1;
            let mut progress = false;
            for ((x, y), ex) in chosen.iter().zip(found) {
                let Ok(ex) = ex else { continue };
                let conf = {
                    let r = radius as isize;
                    let (mut s, mut n) = (0.0f32, 0.0f32);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (qx, qy) = (*x as isize + dx, *y as isize + dy);
                            if state.known.in_bounds(qx, qy) {
                                n += 1.0;
                                if *state.known.get(qx as usize, qy as usize) {
                                    s += *state.confidence.get(qx as usize, qy as usize);
                                }
                            }
                        }
                    }
                    s / n
                };
                let img = &domain.images[ex.image];
                let r = radius as isize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (tx, ty) = (*x as isize + dx, *y as isize + dy);
                        if !state.known.in_bounds(tx, ty) {
                            continue;
                        }
                        let (tx, ty) = (tx as usize, ty as usize);
                        if *state.known.get(tx, ty) || !*holes.get(tx, ty) {
                            continue;
                        }
                        let (sx, sy) = ((ex.x as isize + dx) as usize, (ex.y as isize + dy) as usize);
                        let v = img.color.get(sx, sy).map(|c| ((c as f64) * ex.alpha).clamp(0.0, 1.0) as f32);
                        state.color.set(tx, ty, v);
                        state.known.set(tx, ty, true);
                        state.confidence.set(tx, ty, conf);
                        state.provenance.set(tx, ty, Some(Provenance { image: ex.image, x: sx, y: sy }));
                        filled += 1;
                        progress = true;
                    }
                }
            }
            if !progress {
                break;
            }
        }
    }

    let mut energy = Vec::new();
    let centers: Vec<(usize, usize)> = holes.enumerate().filter(|(x, y, h)| **h && state.provenance.get(*x, *y).is_some()).map(|(x, y, _)| (x, y)).collect();
    if !centers.is_empty() {
        // Initial field: each filled pixel matched at its own provenance.
        let mut nnf: Vec<Exemplar> = par::map_range(centers.len(), |i| {
            let (x, y) = centers[i];
            let p = state.provenance.get(x, y).expect("filled");
            let q = query_patch(&state, x, y, radius);
            if domain.searchable(p.image, p.x as isize, p.y as isize) {
                eval(&q, domain, p.image, p.x, p.y, params)
            } else {
                search_query(&q, (x, y), domain, &[], params, u64::MAX).expect("domain nonempty")
            }
        });
        let total = |v: &[Exemplar]| v.iter().map(|e| e.cost).sum::<f64>();
        energy.push(total(&nnf));
        let index_of = {
            let mut g = Grid::new(color.width(), color.height(), usize::MAX);
            for (i, (x, y)) in centers.iter().enumerate() {
                g.set(*x, *y, i);
            }
            g
        };
        for sweep in 0..params.refine_sweeps {
            // Re-match, keeping the incumbent unless strictly beaten.
            let snapshot = &state;
            let prev = &nnf;
            let rematched: Vec<Exemplar> = par::map_range(centers.len(), |i| {
                let (x, y) = centers[i];
                let q = query_patch(snapshot, x, y, radius);
                let cur = eval(&q, domain, prev[i].image, prev[i].x, prev[i].y, params);
                let mut hints = Vec::new();
                for (dx, dy) in crate::grid::NEIGHBORS4 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if index_of.in_bounds(nx, ny) {
                        let j = *index_of.get(nx as usize, ny as usize);
                        if j != usize::MAX {
                            hints.push((prev[j].image, prev[j].x as isize - dx, prev[j].y as isize - dy));
                        }
                    }
                }
                match search_query(&q, (x, y), domain, &hints, params, 1000 + sweep as u64) {
                    Ok(e) if better(&e, &cur) => e,
                    _ => cur,
                }
            });
            let before = total(&rematched);
            // Vote.
            let r = radius as isize;
            let mut voted = state.clone();
            for (x, y) in &centers {
                let mut acc = [0.0f64; 3];
                let mut n = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (cx, cy) = (*x as isize - dx, *y as isize - dy);
                        if !index_of.in_bounds(cx, cy) {
                            continue;
                        }
                        let j = *index_of.get(cx as usize, cy as usize);
                        if j == usize::MAX {
                            continue;
                        }
                        let e = &rematched[j];
                        let c = domain.images[e.image].color.get((e.x as isize + dx) as usize, (e.y as isize + dy) as usize);
                        for k in 0..3 {
                            acc[k] += e.alpha * c[k] as f64;
                        }
                        n += 1.0;
                    }
                }
                voted.color.set(*x, *y, acc.map(|v| (v / n).clamp(0.0, 1.0) as f32));
                let e = &rematched[*index_of.get(*x, *y)];
                voted.provenance.set(*x, *y, Some(Provenance { image: e.image, x: e.x, y: e.y }));
            }
            let after_nnf = patch_energy(&voted, &centers, &rematched, domain, params);
            let after = total(&after_nnf);
            if after <= before {
                state = voted;
                nnf = after_nnf;
                energy.push(after);
            } else {
                nnf = rematched;
                energy.push(before);
            }
        }
    }

    let mut known = state.known.clone();
    let fallback = if known.iter().all(|k| *k) { 0 } else { diffuse_fill(&mut state.color, &mut known) };
    Ok(InpaintResult {
        color: state.color,
        provenance: state.provenance,
        filled,
        fallback,
        energy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(w: usize, h: usize, period: usize) -> ColorImage {
        Grid::from_fn(w, h, |x, y| {
            let v = ((x % period) as f32 / period as f32 + (y % period) as f32 / (2 * period) as f32) / 1.5;
            [v, 1.0 - v, 0.5 * v + 0.2]
        })
    }

    #[test]
    fn identical_patch_costs_nothing() {
        let img = texture(32, 32, 7);
        let domain = PatchDomain::new(vec![(img.clone(), Mask::new(32, 32, true))], 4);
        let state = FillState::new(&img, &Mask::new(32, 32, false));
        let e = patch_ssd((15, 15), 0, (15, 15), &domain, &state, &ExemplarParams::default()).unwrap();
        assert_eq!(e.cost, 0.0);
        assert_eq!(e.alpha, 1.0);
    }

    #[test]
    fn brightness_ratio_of_flat_patches() {
        let dark = ColorImage::new(20, 20, [50.0 / 255.0; 3]);
        let bright = ColorImage::new(20, 20, [100.0 / 255.0; 3]);
        let domain = PatchDomain::new(vec![(bright, Mask::new(20, 20, true))], 4);
        let state = FillState::new(&dark, &Mask::new(20, 20, false));
        let e = patch_ssd((10, 10), 0, (10, 10), &domain, &state, &ExemplarParams::default()).unwrap();
        assert!((e.alpha - 0.5).abs() < 1e-6);
        assert!(e.cost < 1e-6);
    }

    #[test]
    fn single_valid_patch_is_returned() {
        let img = texture(9 + 2, 9 + 2, 3);
        let domain = PatchDomain::new(vec![(img.clone(), Mask::new(11, 11, true))], 4);
        assert_eq!(domain.len(), 1);
        let target = texture(30, 30, 5);
        let holes = Grid::from_fn(30, 30, |x, y| x == 15 && y == 15);
        let state = FillState::new(&target, &holes);
        let e = search_exemplar((15, 15), &domain, &state, &ExemplarParams::default()).unwrap();
        assert_eq!((e.image, e.x, e.y), (0, 5, 5));
    }

    #[test]
    fn empty_domain_fails() {
        let img = texture(8, 8, 3);
        let domain = PatchDomain::new(vec![(img.clone(), Mask::new(8, 8, true))], 4);
        let state = FillState::new(&img, &Mask::new(8, 8, false));
        assert!(matches!(search_exemplar((4, 4), &domain, &state, &ExemplarParams::default()), Err(Error::Search)));
    }

    #[test]
    fn no_holes_is_identity() {
        let img = texture(24, 24, 5);
        let domain = PatchDomain::new(vec![(img.clone(), Mask::new(24, 24, true))], 4);
        let r = inpaint_color(&img, &Mask::new(24, 24, false), &domain, &ExemplarParams::default()).unwrap();
        assert_eq!(r.color, img);
    }

    #[test]
    fn one_pixel_hole_in_constant_image() {
        let img = ColorImage::new(24, 24, [0.3, 0.6, 0.9]);
        let holes = Grid::from_fn(24, 24, |x, y| x == 12 && y == 12);
        let mut damaged = img.clone();
        damaged.set(12, 12, [1.0, 0.0, 0.0]);
        let domain = PatchDomain::new(vec![(damaged.clone(), holes.map(|h| !h))], 4);
        let r = inpaint_color(&damaged, &holes, &domain, &ExemplarParams::default()).unwrap();
        let c = r.color.get(12, 12);
        assert!((0..3).all(|k| (c[k] - img.get(0, 0)[k]).abs() < 1e-6));
        assert!(r.provenance.get(12, 12).is_some());
    }

    #[test]
    fn periodic_texture_fills_exactly() {
        let img = texture(48, 48, 6);
        let holes = Grid::from_fn(48, 48, |x, y| (20..26).contains(&x) && (20..26).contains(&y));
        let domain = PatchDomain::new(vec![(img.clone(), holes.map(|h| !h))], 4);
        let r = inpaint_color(&img, &holes, &domain, &ExemplarParams::default()).unwrap();
        assert!(r.energy.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let err: f32 = holes.enumerate().filter(|(_, _, h)| **h).map(|(x, y, _)| rgb_dist(r.color.get(x, y), img.get(x, y)) as f32).sum();
        assert!(err / 36.0 < 1e-3, "mean error {}", err / 36.0);
    }
}
