//! Rigid source→target transforms and depth transfer.
//!
//! Each source gets a target-from-source estimate from 3D–3D matches; the
//! estimates plus pairwise source↔source estimates form a pose graph whose
//! vertex 0 is the target (fixed at identity). Refined transforms carry the
//! chosen sources' depth into the target view.

use nalgebra::{DMatrix, DVector, Matrix3, Point3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CameraIntrinsics, Frame};
use crate::features::{FeatureSet, MatchSet};
use crate::geometry::Pose;
use crate::grid::{DepthMap, Grid, Mask, Rect};
use crate::warp::WarpedProposal;

fn scatter(points: &[Point3<f64>]) -> (Point3<f64>, Matrix3<f64>) {
    let n = points.len() as f64;
    let c = points.iter().fold(Point3::origin(), |a, p| a + p.coords / n);
    let mut s = Matrix3::zeros();
    for p in points {
        let d = p - c;
        s += d * d.transpose();
    }
    (c, s)
}

/// False for fewer than three points or (nearly) collinear ones.
fn spans_plane(points: &[Point3<f64>]) -> bool {
    if points.len() < 3 {
        return false;
    }
    let (_, s) = scatter(points);
    let mut ev: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[0] > 0.0 && ev[1] > 1e-10 * ev[0]
}

/// Least-squares rigid transform with `dst ≈ T · src` (Kabsch).
pub fn rigid_fit(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Option<Pose> {
    if src.len() != dst.len() || !spans_plane(src) || !spans_plane(dst) {
        return None;
    }
    let n = src.len() as f64;
    let cs = src.iter().fold(Point3::origin(), |a, p| a + p.coords / n);
    let cd = dst.iter().fold(Point3::origin(), |a, p| a + p.coords / n);
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, sign)) * u.transpose();
    let t = cd.coords - r * cs.coords;
    Some(Pose::from_rotation_matrix(&r, t))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidParams {
    /// Inlier distance in meters.
    pub threshold: f64,
    pub max_iters: usize,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RigidParams {
    fn default() -> Self {
        Self {
            threshold: 0.03,
            max_iters: 500,
            min_inliers: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidEstimate {
    /// Maps points of the second frame into the first.
    pub pose: Pose,
    pub inliers: usize,
}

/// RANSAC over minimal triples, refit on the consensus set.
/// `pairs` are (src, dst) with `dst ≈ T · src`.
pub fn ransac_rigid(pairs: &[(Point3<f64>, Point3<f64>)], params: &RigidParams) -> Option<(Pose, Vec<usize>)> {
    if pairs.len() < 3 {
        return None;
    }
    let inliers_of = |t: &Pose| -> Vec<usize> {
        pairs
            .iter()
            .enumerate()
            .filter(|(_, (s, d))| (t.transform_point(s) - d).norm() < params.threshold)
            .map(|(i, _)| i)
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Pose, Vec<usize>)> = None;
    let iters = if pairs.len() <= 3 { 1 } else { params.max_iters };
    for _ in 0..iters {
        let idx = sample(&mut rng, pairs.len(), 3).into_vec();
        let src: Vec<_> = idx.iter().map(|i| pairs[*i].0).collect();
        let dst: Vec<_> = idx.iter().map(|i| pairs[*i].1).collect();
        let Some(t) = rigid_fit(&src, &dst) else { continue };
        let inl = inliers_of(&t);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            let all = inl.len() == pairs.len();
            best = Some((t, inl));
            if all {
                break;
            }
        }
    }
    let (mut pose, mut inliers) = best?;
    for _ in 0..3 {
        let src: Vec<_> = inliers.iter().map(|i| pairs[*i].0).collect();
        let dst: Vec<_> = inliers.iter().map(|i| pairs[*i].1).collect();
        let Some(refit) = rigid_fit(&src, &dst) else { break };
        let inl = inliers_of(&refit);
        if inl.len() < inliers.len() {
            break;
        }
        let stable = inl == inliers;
        pose = refit;
        inliers = inl;
        if stable {
            break;
        }
    }
    let points: Vec<_> = inliers.iter().map(|i| pairs[*i].0).collect();
    (inliers.len() >= params.min_inliers.max(3) && spans_plane(&points)).then_some((pose, inliers))
}

/// Camera-space point of a keypoint, using the nearest valid depth sample.
fn keypoint_point(frame: &Frame, x: f32, y: f32, intr: &CameraIntrinsics) -> Option<Point3<f64>> {
    let (u, v) = (x.round() as isize, y.round() as isize);
    if !frame.depth.in_bounds(u, v) {
        return None;
    }
    let d = *frame.depth.get(u as usize, v as usize);
    (d > 0.0 && !*frame.mask.get(u as usize, v as usize)).then(|| intr.unproject_pixel(x as f64, y as f64, d as f64))
}

/// Transform mapping `b`'s camera into `a`'s; `None` when too few matched
/// keypoints carry depth.
pub fn estimate_relative_pose(
    a: &Frame,
    fa: &FeatureSet,
    b: &Frame,
    fb: &FeatureSet,
    matches: &MatchSet,
    intr: &CameraIntrinsics,
    params: &RigidParams,
) -> Option<RigidEstimate> {
    let pairs: Vec<_> = matches
        .pairs
        .iter()
        .filter_map(|m| {
            let ka = &fa.keypoints[m.index_a];
            let kb = &fb.keypoints[m.index_b];
            Some((keypoint_point(b, kb.x, kb.y, intr)?, keypoint_point(a, ka.x, ka.y, intr)?))
        })
        .collect();
    let (pose, inliers) = ransac_rigid(&pairs, params)?;
    Some(RigidEstimate {
        pose,
        inliers: inliers.len(),
    })
}

/// Relative measurement `i`-from-`j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEdge {
    pub i: usize,
    pub j: usize,
    pub measurement: Pose,
    pub weight: f64,
}

/// Vertex 0 is the gauge; vertex `k` holds target-from-source `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseGraph {
    pub vertices: Vec<Pose>,
    pub edges: Vec<PoseEdge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost at the start and after every iteration.
    pub costs: Vec<f64>,
    /// Vertices reachable from the gauge.
    pub connected: Vec<bool>,
    pub converged: bool,
}

impl PoseGraph {
    /// Gauge plus the given initial vertices.
    pub fn new(initial: &[Pose]) -> Self {
        let mut vertices = vec![Pose::identity()];
        vertices.extend_from_slice(initial);
        Self {
            vertices,
            edges: Vec::new(),
        }
    }

    pub fn add_edge(&mut self, i: usize, j: usize, measurement: Pose, weight: f64) {
        self.edges.push(PoseEdge { i, j, measurement, weight });
    }

    pub fn residual(vertices: &[Pose], e: &PoseEdge) -> Vector6<f64> {
        e.measurement
            .inverse()
            .compose(&vertices[e.i].inverse())
            .compose(&vertices[e.j])
            .log()
    }

    pub fn cost_of(&self, vertices: &[Pose]) -> f64 {
        self.edges.iter().map(|e| e.weight * Self::residual(vertices, e).norm_squared()).sum()
    }

    pub fn cost(&self) -> f64 {
        self.cost_of(&self.vertices)
    }

    pub fn connected(&self) -> Vec<bool> {
        let mut seen = vec![false; self.vertices.len()];
        seen[0] = true;
        let mut changed = true;
        while changed {
            changed = false;
            for e in &self.edges {
                if seen[e.i] != seen[e.j] {
                    seen[e.i] = true;
                    seen[e.j] = true;
                    changed = true;
                }
            }
        }
        seen
    }
}

fn retract(vertices: &[Pose], free: &[usize], delta: &DVector<f64>) -> Vec<Pose> {
    let mut out = vertices.to_vec();
    for (k, v) in free.iter().enumerate() {
        let d = Vector6::from_iterator(delta.rows(6 * k, 6).iter().copied());
        out[*v] = vertices[*v].compose(&Pose::exp(&d));
    }
    out
}

/// Gauss–Newton with Levenberg damping; the gauge and vertices not
/// connected to it stay fixed. Returns the refined vertices (gauge first).
pub fn optimize_pose_graph(graph: &PoseGraph, max_iters: usize, tol: f64) -> (Vec<Pose>, OptimizeReport) {
    let connected = graph.connected();
    let free: Vec<usize> = (1..graph.vertices.len()).filter(|v| connected[*v]).collect();
    let mut slot = vec![usize::MAX; graph.vertices.len()];
    for (k, v) in free.iter().enumerate() {
        slot[*v] = k;
    }
    let dim = 6 * free.len();
    let mut vertices = graph.vertices.clone();
    let initial_cost = graph.cost_of(&vertices);
    let mut cost = initial_cost;
    let mut report = OptimizeReport {
        initial_cost,
        final_cost: initial_cost,
        iterations: 0,
        costs: vec![initial_cost],
        connected,
        converged: false,
    };
    if dim == 0 || graph.edges.is_empty() {
        report.converged = true;
        return (vertices, report);
    }
    let mut lambda = 1e-4;
    const H: f64 = 1e-6;
    for it in 0..max_iters {
        report.iterations = it + 1;
        if cost < 1e-24 {
            report.converged = true;
            break;
        }
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        let mut grad = DVector::<f64>::zeros(dim);
        for e in &graph.edges {
            let r0 = PoseGraph::residual(&vertices, e);
            let ends = [e.i, e.j];
            let mut jac: Vec<(usize, nalgebra::Matrix6<f64>)> = Vec::new();
            for v in ends {
                if slot[v] == usize::MAX || jac.iter().any(|(s, _)| *s == slot[v]) {
                    continue;
                }
                let mut jm = nalgebra::Matrix6::zeros();
                for c in 0..6 {
                    let mut d = Vector6::zeros();
                    d[c] = H;
                    let mut plus = vertices.clone();
                    plus[v] = vertices[v].compose(&Pose::exp(&d));
                    let mut minus = vertices.clone();
                    minus[v] = vertices[v].compose(&Pose::exp(&(-d)));
                    let col = (PoseGraph::residual(&plus, e) - PoseGraph::residual(&minus, e)) / (2.0 * H);
                    jm.set_column(c, &col);
                }
                jac.push((slot[v], jm));
            }
            for (a, ja) in &jac {
                let g = e.weight * ja.transpose() * r0;
                for r in 0..6 {
                    grad[6 * a + r] += g[r];
                }
                for (b, jb) in &jac {
                    let blk = e.weight * ja.transpose() * jb;
                    for r in 0..6 {
                        for c in 0..6 {
                            hess[(6 * a + r, 6 * b + c)] += blk[(r, c)];
                        }
                    }
                }
            }
        }
        let mut accepted = false;
        let mut step_norm = 0.0;
        while lambda < 1e12 {
            let mut damped = hess.clone();
            for d in 0..dim {
                damped[(d, d)] += lambda * (hess[(d, d)] + 1e-9);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -chol.solve(&grad);
            step_norm = delta.norm();
            let cand = retract(&vertices, &free, &delta);
            let c = graph.cost_of(&cand);
            if c < cost {
                vertices = cand;
                cost = c;
                report.costs.push(c);
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                break;
            }
            if step_norm < tol {
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            if step_norm >= tol {
                log::warn!("pose graph: no decrease after damping, keeping best estimate");
            }
            report.converged = step_norm < tol;
            break;
        }
        if step_norm < tol {
            report.converged = true;
            break;
        }
    }
    report.final_cost = cost;
    (vertices, report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthTransfer {
    pub depth: DepthMap,
    /// Pixels set by a forward-consistent point.
    pub direct: usize,
    /// Pixels set only by splatting.
    pub splatted: usize,
}

/// Carries source depth into `rect` for every `wanted` rect-local pixel.
/// `source_of` picks the proposal per pixel; `transforms[i]` maps proposal
/// `i`'s camera into the target camera.
pub fn transfer_depth(
    rect: Rect,
    wanted: &Mask,
    source_of: &Grid<Option<usize>>,
    proposals: &[WarpedProposal],
    sources: &[&Frame],
    transforms: &[Pose],
    intr: &CameraIntrinsics,
) -> DepthTransfer {
    let (w, h) = (rect.width(), rect.height());
    let mut direct = DepthMap::new(w, h, 0.0);
    let mut splat = DepthMap::new(w, h, f32::INFINITY);
    for y in 0..h {
        for x in 0..w {
            if !*wanted.get(x, y) {
                continue;
            }
            let Some(i) = *source_of.get(x, y) else { continue };
            let xy = proposals[i].source_xy.get(x, y);
            let src = sources[i];
            let (sx, sy) = (xy[0].round() as isize, xy[1].round() as isize);
            if !src.depth.in_bounds(sx, sy) {
                continue;
            }
            let d = *src.depth.get(sx as usize, sy as usize);
            if d <= 0.0 {
                continue;
            }
            let p = transforms[i].transform_point(&intr.unproject_pixel(sx as f64, sy as f64, d as f64));
            let pr = intr.project_point(&p);
            if pr.behind_camera {
                continue;
            }
            let (tx, ty) = ((rect.x0 + x) as f64, (rect.y0 + y) as f64);
            if (pr.u - tx).abs() <= 1.0 && (pr.v - ty).abs() <= 1.0 {
                direct.set(x, y, pr.z as f32);
                continue;
            }
            let (ux, uy) = (pr.u.round() - rect.x0 as f64, pr.v.round() - rect.y0 as f64);
            if ux < 0.0 || uy < 0.0 || ux >= w as f64 || uy >= h as f64 {
                continue;
            }
            let (ux, uy) = (ux as usize, uy as usize);
            if *wanted.get(ux, uy) {
                let z = splat.get_mut(ux, uy);
                *z = z.min(pr.z as f32);
            }
        }
    }
    let (mut n_direct, mut n_splat) = (0, 0);
    let depth = Grid::from_fn(w, h, |x, y| {
        let d = *direct.get(x, y);
        if d > 0.0 {
            n_direct += 1;
            return d;
        }
        let s = *splat.get(x, y);
        if s.is_finite() {
            n_splat += 1;
            s
        } else {
            0.0
        }
    });
    DepthTransfer {
        depth,
        direct: n_direct,
        splatted: n_splat,
    }
}
