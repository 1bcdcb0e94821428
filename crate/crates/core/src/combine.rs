//! Per-pixel fusion of warped proposals.
//!
//! Label 0 is the target image itself (allowed only outside the dilated
//! mask); label `i ≥ 1` is proposal `i - 1`. The energy
//!
//! ```text
//! E(l) = Σ_p λ1·T1(p, l_p) + λ2·T2(l_p) + Σ_(p,q) λ3·W(p, q, l_p, l_q)
//! ```
//!
//! is minimized by alpha-expansion (an exact single cut for two labels).
//! The composite is then blended into the target by a Poisson solve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{grad_dist, rgb_dist, sobel_color, ColorImage, Grid, Mask, Rgb, NEIGHBORS4};
use crate::maxflow::FlowGraph;
use crate::par;
use crate::warp::WarpedProposal;

pub const INF: f64 = f64::INFINITY;
/// Label of a pixel no label can explain.
pub const NO_LABEL: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrfParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Mask dilation radius before compositing.
    pub dilation: usize,
    pub max_passes: usize,
}

impl Default for MrfParams {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.2,
            lambda3: 1.0,
            dilation: 3,
            max_passes: 20,
        }
    }
}

/// Overlap-weighted blend of the proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct MedianImage {
    pub color: ColorImage,
    /// No proposal is usable here.
    pub empty: Mask,
    pub weights: Vec<f64>,
}

/// Proposal weights from per-proposal mean squared errors against the
/// target ring (`None` = no overlap). Weights sum to one.
pub fn median_weights(errors: &[Option<f64>]) -> Vec<f64> {
    let n = errors.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![1.0];
    }
    let worst = errors.iter().flatten().cloned().fold(0.0, f64::max);
    let e: Vec<f64> = errors.iter().map(|e| e.unwrap_or(worst)).collect();
    let total: f64 = e.iter().sum();
    if total <= 1e-300 {
        return vec![1.0 / n as f64; n];
    }
    e.iter().map(|ei| (1.0 - ei / total) / (n - 1) as f64).collect()
}

/// `ring` marks rect-local pixels where the target is known.
pub fn median_image(proposals: &[WarpedProposal], target: &ColorImage, ring: &Mask) -> MedianImage {
    let (w, h) = (target.width(), target.height());
    let errors: Vec<Option<f64>> = proposals
        .iter()
        .map(|p| {
            let (mut ssd, mut n) = (0.0, 0usize);
            for (x, y, r) in ring.enumerate() {
                if *r && p.usable(x, y) {
                    let d = rgb_dist(p.color.get(x, y), target.get(x, y));
                    ssd += d * d;
                    n += 1;
                }
            }
            (n > 0).then(|| ssd / n as f64)
        })
        .collect();
    let weights = median_weights(&errors);
    let mut color = ColorImage::new(w, h, [0.0; 3]);
    let mut empty = Mask::new(w, h, true);
    for y in 0..h {
        for x in 0..w {
            let usable: Vec<usize> = (0..proposals.len()).filter(|i| proposals[*i].usable(x, y)).collect();
            if usable.is_empty() {
                continue;
            }
            let wsum: f64 = usable.iter().map(|i| weights[*i]).sum();
            let mut acc = [0.0f64; 3];
            for i in &usable {
                let wi = if wsum > 1e-12 { weights[*i] / wsum } else { 1.0 / usable.len() as f64 };
                let c = proposals[*i].color.get(x, y);
                for k in 0..3 {
                    acc[k] += wi * c[k] as f64;
                }
            }
            color.set(x, y, acc.map(|v| v as f32));
            empty.set(x, y, false);
        }
    }
    MedianImage { color, empty, weights }
}

/// Eq. T2: translation-only baseline penalty.
pub fn baseline_cost(translation: f64) -> f64 {
    translation.exp() - 1.0
}

/// Data cost of a proposal value against its reference (target on the
/// ring, median inside the mask). `None` means masked or invalid.
pub fn data_cost(value: Option<&Rgb>, reference: &Rgb, translation: f64, params: &MrfParams) -> f64 {
    match value {
        Some(v) => params.lambda1 * rgb_dist(v, reference) + params.lambda2 * baseline_cost(translation),
        None => INF,
    }
}

/// Gradient-difference seam cost between neighbours `p` and `q`.
pub fn smooth_cost(grad_lp_p: &[f32; 6], grad_lq_p: &[f32; 6], grad_lp_q: &[f32; 6], grad_lq_q: &[f32; 6]) -> f64 {
    grad_dist(grad_lp_p, grad_lq_p) + grad_dist(grad_lp_q, grad_lq_q)
}

/// Unary costs plus per-label gradient fields over a `width × height` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyModel {
    pub width: usize,
    pub height: usize,
    pub labels: usize,
    /// `unary[p * labels + l]`, already weighted.
    pub unary: Vec<f64>,
    /// `grads[l * width * height + p]`.
    pub grads: Vec<[f32; 6]>,
    pub lambda3: f64,
}

impl EnergyModel {
    #[inline]
    pub fn unary(&self, p: usize, l: usize) -> f64 {
        self.unary[p * self.labels + l]
    }

    #[inline]
    pub fn feasible(&self, p: usize, l: usize) -> bool {
        self.unary(p, l).is_finite()
    }

    #[inline]
    fn grad(&self, l: usize, p: usize) -> &[f32; 6] {
        &self.grads[l * self.width * self.height + p]
    }

    #[inline]
    pub fn pairwise(&self, p: usize, q: usize, lp: usize, lq: usize) -> f64 {
        if lp == lq {
            return 0.0;
        }
        self.lambda3 * smooth_cost(self.grad(lp, p), self.grad(lq, p), self.grad(lp, q), self.grad(lq, q))
    }

    /// Right and down neighbour pairs.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        (0..self.height).flat_map(move |y| {
            (0..w).flat_map(move |x| {
                let p = y * w + x;
                let right = (x + 1 < w).then_some((p, p + 1));
                let down = (y + 1 < self.height).then_some((p, p + w));
                right.into_iter().chain(down)
            })
        })
    }

    /// Energy of a labeling; `NO_LABEL` pixels and their edges are left out.
    pub fn energy(&self, labels: &[usize]) -> f64 {
        let mut e = 0.0;
        for (p, l) in labels.iter().enumerate() {
            if *l != NO_LABEL {
                e += self.unary(p, *l);
            }
        }
        for (p, q) in self.edges() {
            if labels[p] != NO_LABEL && labels[q] != NO_LABEL {
                e += self.pairwise(p, q, labels[p], labels[q]);
            }
        }
        e
    }
}

/// MRF solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelField {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<usize>,
    pub energy: f64,
    /// Energy after initialization and after every pass.
    pub trace: Vec<f64>,
}

impl LabelField {
    pub fn label(&self, x: usize, y: usize) -> Option<usize> {
        let l = self.labels[y * self.width + x];
        (l != NO_LABEL).then_some(l)
    }

    pub fn holes(&self) -> Mask {
        Grid::from_vec(self.width, self.height, self.labels.iter().map(|l| *l == NO_LABEL).collect())
    }
}

#[derive(Clone, Copy)]
enum Choice {
    Hole,
    Fixed(usize),
    /// (label if on the source side, label if on the sink side)
    Var(usize, usize, usize),
}

/// One submodular binary move; non-submodular pair terms are truncated.
fn binary_move(model: &EnergyModel, choices: &[Choice], nvars: usize) -> Vec<usize> {
    let mut u0 = vec![0.0; nvars];
    let mut u1 = vec![0.0; nvars];
    let mut g = FlowGraph::new(nvars);
    for (p, c) in choices.iter().enumerate() {
        if let Choice::Var(l0, l1, v) = *c {
            u0[v] += model.unary(p, l0);
            u1[v] += model.unary(p, l1);
        }
    }
    for (p, q) in model.edges() {
        match (choices[p], choices[q]) {
            (Choice::Var(a0, a1, vp), Choice::Fixed(f)) => {
                u0[vp] += model.pairwise(p, q, a0, f);
                u1[vp] += model.pairwise(p, q, a1, f);
            }
            (Choice::Fixed(f), Choice::Var(b0, b1, vq)) => {
                u0[vq] += model.pairwise(p, q, f, b0);
                u1[vq] += model.pairwise(p, q, f, b1);
            }
            (Choice::Var(a0, a1, vp), Choice::Var(b0, b1, vq)) => {
                let a = model.pairwise(p, q, a0, b0);
                let b = model.pairwise(p, q, a0, b1);
                let c = model.pairwise(p, q, a1, b0);
                let d = model.pairwise(p, q, a1, b1);
                u0[vp] += a;
                u1[vp] += c;
                u1[vq] += d - c;
                // (1 - x_p) x_q: p on the source side, q on the sink side.
                let cap = (b + c - a - d).max(0.0);
                g.add_edge(vp, vq, cap, 0.0);
            }
            _ => {}
        }
    }
    for v in 0..nvars {
        let diff = u1[v] - u0[v];
        if diff >= 0.0 {
            g.add_tweights(v, diff, 0.0);
        } else {
            g.add_tweights(v, 0.0, -diff);
        }
    }
    g.maxflow();
    choices
        .iter()
        .map(|c| match *c {
            Choice::Hole => NO_LABEL,
            Choice::Fixed(l) => l,
            Choice::Var(l0, l1, v) => {
                if g.in_source_segment(v) {
                    l0
                } else {
                    l1
                }
            }
        })
        .collect()
}

fn initial_labels(model: &EnergyModel) -> Vec<usize> {
    (0..model.width * model.height)
        .map(|p| {
            let mut best = NO_LABEL;
            for l in 0..model.labels {
                if model.feasible(p, l) && (best == NO_LABEL || model.unary(p, l) < model.unary(p, best)) {
                    best = l;
                }
            }
            best
        })
        .collect()
}

/// Alpha-expansion sweeps until no move lowers the energy.
fn expand(model: &EnergyModel, order: &[usize], labels: &mut Vec<usize>, energy: &mut f64, max_passes: usize, trace: &mut Vec<f64>) {
    for _ in 0..max_passes {
        let mut improved = false;
        for &alpha in order {
            let mut nvars = 0;
            let choices: Vec<Choice> = labels
                .iter()
                .enumerate()
                .map(|(p, &cur)| {
                    if cur == NO_LABEL {
                        Choice::Hole
                    } else if cur == alpha || !model.feasible(p, alpha) {
                        Choice::Fixed(cur)
                    } else {
                        nvars += 1;
                        Choice::Var(cur, alpha, nvars - 1)
                    }
                })
                .collect();
            if nvars == 0 {
                continue;
            }
            let cand = binary_move(model, &choices, nvars);
            let e = model.energy(&cand);
            if e < *energy - 1e-12 * energy.abs().max(1.0) {
                *labels = cand;
                *energy = e;
                improved = true;
            }
        }
        trace.push(*energy);
        if !improved {
            break;
        }
    }
}

/// Minimizes the energy. Pixels without any finite label stay `NO_LABEL`.
pub fn solve_mrf(model: &EnergyModel, max_passes: usize) -> LabelField {
    let mut labels = initial_labels(model);
    let mut energy = model.energy(&labels);
    let mut trace = vec![energy];

    if model.labels == 2 {
        let mut nvars = 0;
        let choices: Vec<Choice> = (0..labels.len())
            .map(|p| match (model.feasible(p, 0), model.feasible(p, 1)) {
                (true, true) => {
                    nvars += 1;
                    Choice::Var(0, 1, nvars - 1)
                }
                (true, false) => Choice::Fixed(0),
                (false, true) => Choice::Fixed(1),
                (false, false) => Choice::Hole,
            })
            .collect();
        let cand = binary_move(model, &choices, nvars);
        let e = model.energy(&cand);
        if e < energy {
            labels = cand;
            energy = e;
        }
        trace.push(energy);
    } else if model.labels > 2 {
        // Labels are visited in an order fixed by their costs, not their
        // indices, so permuting the proposals permutes the result.
        let n = model.width * model.height;
        let mut order: Vec<(f64, usize)> = (0..model.labels)
            .map(|l| ((0..n).map(|p| model.unary(p, l)).filter(|c| c.is_finite()).sum(), l))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let order: Vec<usize> = order.into_iter().map(|(_, l)| l).collect();
        expand(model, &order, &mut labels, &mut energy, max_passes, &mut trace);
        // Restarts from constant labelings; keep whichever ends lowest.
        for &l in &order {
            let mut start: Vec<usize> = labels.iter().enumerate().map(|(p, &cur)| if model.feasible(p, l) { l } else { cur }).collect();
            let mut e = model.energy(&start);
            let mut scratch = Vec::new();
            expand(model, &order, &mut start, &mut e, max_passes, &mut scratch);
            if e < energy - 1e-12 * energy.abs().max(1.0) {
                labels = start;
                energy = e;
                trace.push(energy);
            }
        }
    }
    LabelField {
        width: model.width,
        height: model.height,
        labels,
        energy,
        trace,
    }
}

/// Rect-local inputs for one region.
pub struct RegionImages<'a> {
    pub target: &'a ColorImage,
    /// Original mask.
    pub mask: &'a Mask,
    /// Mask after dilation; these pixels get replaced.
    pub dilated: &'a Mask,
}

/// Energy over one region. `translations[i]` is the baseline of proposal `i`.
pub fn build_energy(region: &RegionImages, proposals: &[WarpedProposal], translations: &[f64], params: &MrfParams) -> (EnergyModel, MedianImage) {
    let (w, h) = (region.target.width(), region.target.height());
    let n = w * h;
    let ring = region.mask.map(|m| !m);
    let median = median_image(proposals, region.target, &ring);
    let labels = proposals.len() + 1;
    let rows = par::map_range(n, |p| {
        let (x, y) = (p % w, p / w);
        let mut costs = Vec::with_capacity(labels);
        costs.push(if *region.dilated.get(x, y) { INF } else { 0.0 });
        for (i, prop) in proposals.iter().enumerate() {
            let value = prop.usable(x, y).then(|| prop.color.get(x, y));
            let cost = if *region.mask.get(x, y) {
                if *median.empty.get(x, y) {
                    INF
                } else {
                    data_cost(value, median.color.get(x, y), translations[i], params)
                }
            } else {
                data_cost(value, region.target.get(x, y), translations[i], params)
            };
            costs.push(cost);
        }
        costs
    });
    let unary: Vec<f64> = rows.into_iter().flatten().collect();
    let mut grads = sobel_color(region.target).into_vec();
    for g in par::map_slice(proposals, |p| sobel_color(&p.color).into_vec()) {
        grads.extend(g);
    }
    (
        EnergyModel {
            width: w,
            height: h,
            labels,
            unary,
            grads,
            lambda3: params.lambda3,
        },
        median,
    )
}

/// Assembled region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Composite {
    pub color: ColorImage,
    /// Index of the proposal that supplied each replaced pixel.
    pub depth_source: Grid<Option<usize>>,
    /// Dilated-mask pixels no proposal could fill.
    pub hole: Mask,
}

/// Replaces dilated-mask pixels with their label's color.
pub fn composite(labels: &LabelField, target: &ColorImage, dilated: &Mask, proposals: &[WarpedProposal]) -> Composite {
    let (w, h) = (target.width(), target.height());
    let mut color = target.clone();
    let mut depth_source = Grid::new(w, h, None);
    let mut hole = Mask::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if !*dilated.get(x, y) {
                continue;
            }
            match labels.label(x, y) {
                Some(l) if l >= 1 => {
                    color.set(x, y, *proposals[l - 1].color.get(x, y));
                    depth_source.set(x, y, Some(l - 1));
                }
                _ => hole.set(x, y, true),
            }
        }
    }
    Composite { color, depth_source, hole }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonParams {
    /// Max-norm residual tolerance.
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for PoissonParams {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iters: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoissonResult {
    pub color: ColorImage,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `Δf = Δguide` on `domain`. Pixels outside `domain` and not
/// `blocked` are Dirichlet with values from `boundary`; blocked pixels and
/// the grid border are Neumann. Domain components that touch no Dirichlet
/// pixel keep the guide.
pub fn poisson_blend(guide: &ColorImage, domain: &Mask, blocked: &Mask, boundary: &ColorImage, params: &PoissonParams) -> Result<PoissonResult> {
    let (w, h) = (guide.width(), guide.height());
    let dirichlet = |x: usize, y: usize| !*domain.get(x, y) && !*blocked.get(x, y);
    let neighbors = |x: usize, y: usize| {
        NEIGHBORS4.iter().filter_map(move |(dx, dy)| {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h).then_some((nx as usize, ny as usize))
        })
    };

    // Components anchored by at least one Dirichlet neighbour.
    let mut comp = Grid::new(w, h, usize::MAX);
    let mut anchored = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !*domain.get(x, y) || *comp.get(x, y) != usize::MAX {
                continue;
            }
            let id = anchored.len();
            let mut has_boundary = false;
            let mut stack = vec![(x, y)];
            comp.set(x, y, id);
            while let Some((cx, cy)) = stack.pop() {
                for (nx, ny) in neighbors(cx, cy) {
                    if *domain.get(nx, ny) {
                        if *comp.get(nx, ny) == usize::MAX {
                            comp.set(nx, ny, id);
                            stack.push((nx, ny));
                        }
                    } else if dirichlet(nx, ny) {
                        has_boundary = true;
                    }
                }
            }
            anchored.push(has_boundary);
        }
    }

    let mut index = Grid::new(w, h, usize::MAX);
    let mut cells = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let c = *comp.get(x, y);
            if c != usize::MAX && anchored[c] {
                index.set(x, y, cells.len());
                cells.push((x, y));
            }
        }
    }
    let mut color = guide.clone();
    if cells.is_empty() {
        return Ok(PoissonResult {
            color,
            iterations: 0,
            residual: 0.0,
        });
    }

    // Unknown-neighbour lists, diagonal and right-hand sides.
    let n = cells.len();
    let mut nbr: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut diag = Vec::with_capacity(n);
    let mut rhs = vec![[0.0f64; 3]; n];
    for (i, (x, y)) in cells.iter().enumerate() {
        let gp = guide.get(*x, *y);
        let mut list = Vec::new();
        let mut d = 0.0;
        for (nx, ny) in neighbors(*x, *y) {
            if *blocked.get(nx, ny) && !*domain.get(nx, ny) {
                continue;
            }
            d += 1.0;
            let gq = guide.get(nx, ny);
            for k in 0..3 {
                rhs[i][k] += gp[k] as f64 - gq[k] as f64;
            }
            let j = *index.get(nx, ny);
            if j != usize::MAX {
                list.push(j);
            } else {
                let b = boundary.get(nx, ny);
                for k in 0..3 {
                    rhs[i][k] += b[k] as f64;
                }
            }
        }
        nbr.push(list);
        diag.push(d);
    }

    let apply = |x: &[f64], out: &mut [f64]| {
        for i in 0..n {
            let mut v = diag[i] * x[i];
            for &j in &nbr[i] {
                v -= x[j];
            }
            out[i] = v;
        }
    };
    let solved = par::map_range(3, |k| {
        let b: Vec<f64> = rhs.iter().map(|r| r[k]).collect();
        let mut x: Vec<f64> = cells.iter().map(|(cx, cy)| guide.get(*cx, *cy)[k] as f64).collect();
        let mut ax = vec![0.0; n];
        apply(&x, &mut ax);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let norm_inf = |v: &[f64]| v.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        let mut res = norm_inf(&r);
        let mut p = r.clone();
        let mut rr: f64 = r.iter().map(|e| e * e).sum();
        let mut ap = vec![0.0; n];
        let mut it = 0;
        while res >= params.tolerance && it < params.max_iters {
            it += 1;
            apply(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                break;
            }
            let alpha = rr / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            // Recompute the true residual now and then to avoid drift.
            if it % 50 == 0 {
                apply(&x, &mut ax);
                for i in 0..n {
                    r[i] = b[i] - ax[i];
                }
            }
            let rr_new: f64 = r.iter().map(|e| e * e).sum();
            res = norm_inf(&r);
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
        }
        apply(&x, &mut ax);
        let true_res = b.iter().zip(&ax).map(|(b, a)| (b - a).abs()).fold(0.0, f64::max);
        (x, it, true_res)
    });
    let iterations = solved.iter().map(|s| s.1).max().unwrap_or(0);
    let residual = solved.iter().map(|s| s.2).fold(0.0, f64::max);
    if residual >= params.tolerance {
        return Err(Error::Solver { iterations, residual });
    }
    for (k, (x, _, _)) in solved.iter().enumerate() {
        for (i, (cx, cy)) in cells.iter().enumerate() {
            color.get_mut(*cx, *cy)[k] = x[i] as f32;
        }
    }
    Ok(PoissonResult { color, iterations, residual })
}
