//! End-to-end orchestration: per target frame, every mask region goes
//! through select → warp → combine → color → depth, and the filled regions
//! are pasted back into the frame.
//!
//! Each stage can also run on its own. Stage outputs are JSON files under
//! `<output>/stages/<stamp>/` wrapped in a versioned envelope; a stage
//! reads the previous stage's file and fails with the missing path when it
//! is absent.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::combine::{build_energy, composite, poisson_blend, solve_mrf, LabelField, RegionImages, NO_LABEL};
use crate::config::{PipelineConfig, Targets};
use crate::dataset::{export_ply, load_sequence_with, write_color, write_depth, write_mask, Frame, FrameId, Sequence};
use crate::depth_fill::{classify, color_edges, fallback_fill, propagate, PixelClass, PixelState};
use crate::error::{Error, Result};
use crate::exemplar::{diffuse_fill, inpaint_color, PatchDomain};
use crate::features::{build_vocab, detect_describe, load_features, match_features, save_features, FeatureSet, MatchSet, VocabTree};
use crate::geometry::Pose as Se3;
use crate::grid::{ColorImage, DepthMap, Grid, Mask, Rect};
use crate::par;
use crate::posegraph::{estimate_relative_pose, optimize_pose_graph, transfer_depth, OptimizeReport, PoseGraph, RigidEstimate};
use crate::selection::{extract_mask_regions, frame_distance, image_quality, select_sources, MaskRegion, SelectionContext, SuitabilityScore};
use crate::warp::{correspondences, fit_local_grid, ransac_homography, warp_frame, WarpedProposal};

pub const ARTIFACT_FORMAT: &str = "mvinpaint-stage";
pub const ARTIFACT_VERSION: u32 = 1;

/// Weight of a ground-truth edge relative to one RANSAC inlier.
const GROUND_TRUTH_WEIGHT: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Select,
    Warp,
    Combine,
    Color,
    Depth,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Select, Stage::Warp, Stage::Combine, Stage::Color, Stage::Depth];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Select => "select",
            Stage::Warp => "warp",
            Stage::Combine => "combine",
            Stage::Color => "color",
            Stage::Depth => "depth",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Sequence plus everything computed once per run.
pub struct Prepared {
    pub sequence: Sequence,
    pub features: Vec<FeatureSet>,
    pub tree: VocabTree,
    pub qualities: Vec<f64>,
    pairs: Mutex<HashMap<(FrameId, FrameId), PairInfo>>,
}

#[derive(Clone)]
struct PairInfo {
    matches: MatchSet,
    rigid: Option<RigidEstimate>,
}

impl Prepared {
    /// Features are detected on unmasked pixels of every frame; with a
    /// cache directory they are read from and written to it.
    pub fn new(sequence: Sequence, cfg: &PipelineConfig, cache: Option<&Path>) -> Result<Self> {
        if let Some(dir) = cache {
            fs::create_dir_all(dir)?;
        }
        let features = par::map_slice(&sequence.frames, |f| -> Result<FeatureSet> {
            let path = cache.map(|d| d.join(format!("features_{}.bin", f.stamp)));
            if let Some(p) = &path {
                if p.exists() {
                    if let Ok(Some(set)) = load_features(p, f.id, &cfg.detector) {
                        return Ok(set);
                    }
                }
            }
            let region = f.mask.map(|m| !m);
            let set = detect_describe(&f.color.to_color().to_gray(), Some(&region), &cfg.detector);
            if let Some(p) = &path {
                save_features(p, f.id, &cfg.detector, &set)?;
            }
            Ok(set)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let tree = build_vocab(&features, cfg.vocab_branching, cfg.vocab_depth, cfg.seed)?;
        let qualities = par::map_slice(&sequence.frames, |f| image_quality(&f.color.to_color().to_gray(), cfg.selection.gradient_ratio));
        Ok(Self {
            sequence,
            features,
            tree,
            qualities,
            pairs: Mutex::new(HashMap::new()),
        })
    }

    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let seq = load_sequence_with(&cfg.dataset, &cfg.load_options())?;
        if seq.is_empty() {
            return Err(Error::Input(format!("{}: no frames", cfg.dataset.display())));
        }
        Self::new(seq, cfg, Some(&cfg.output.join("cache")))
    }

    /// Matches and the rigid `a`-from-`b` estimate, computed once per pair.
    fn pair(&self, a: FrameId, b: FrameId, cfg: &PipelineConfig) -> PairInfo {
        if let Some(p) = self.pairs.lock().expect("pair cache lock").get(&(a, b)) {
            return p.clone();
        }
        let (fa, fb) = (&self.features[a], &self.features[b]);
        let matches = match_features(fa, fb, cfg.match_ratio);
        let frames = &self.sequence.frames;
        let rigid = estimate_relative_pose(&frames[a], fa, &frames[b], fb, &matches, &self.sequence.intrinsics, &cfg.rigid_params());
        let info = PairInfo { matches, rigid };
        self.pairs.lock().expect("pair cache lock").insert((a, b), info.clone());
        info
    }

    /// Target-from-source transform: ground truth when both poses are
    /// known, else the feature-based estimate.
    fn transform(&self, target: FrameId, source: FrameId, cfg: &PipelineConfig) -> Option<(Se3, bool, usize)> {
        let frames = &self.sequence.frames;
        if let (Some(t), Some(s)) = (frames[target].pose, frames[source].pose) {
            return Some((t.inverse().compose(&s), true, 0));
        }
        self.pair(target, source, cfg).rigid.map(|r| (r.pose, false, r.inliers))
    }
}

/// Rect-local views of the target used by every stage of one region.
struct Local {
    rect: Rect,
    color: ColorImage,
    depth: DepthMap,
    /// Every masked target pixel in the rect.
    mask: Mask,
    dilated: Mask,
    /// This component, dilated; the pixels this region writes back.
    own: Mask,
}

fn local_views(frame: &Frame, region: &MaskRegion, rect: Rect, dilation: usize) -> Local {
    let mask = frame.mask.crop(&rect);
    let dilated = mask.dilate(dilation);
    let comp = Grid::from_fn(rect.width(), rect.height(), |x, y| {
        let (fx, fy) = (rect.x0 + x, rect.y0 + y);
        region.rect.contains(fx, fy) && *region.component.get(fx - region.rect.x0, fy - region.rect.y0)
    });
    let own = comp.dilate(dilation);
    Local {
        rect,
        color: frame.color.to_color().crop(&rect),
        depth: frame.depth.crop(&rect),
        mask,
        dilated,
        own,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectOutput {
    pub region: MaskRegion,
    /// Mask rectangle plus context; every later stage works on it.
    pub rect: Rect,
    pub scores: Vec<SuitabilityScore>,
    /// Why no source was selected.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedSource {
    pub frame_id: FrameId,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpOutput {
    pub rect: Rect,
    pub proposals: Vec<WarpedProposal>,
    /// Target-from-source per proposal.
    pub transforms: Vec<Se3>,
    pub ground_truth: Vec<bool>,
    /// Rigid inliers behind estimated transforms (0 for ground truth).
    pub rigid_inliers: Vec<usize>,
    pub homography_inliers: Vec<usize>,
    pub dropped: Vec<DroppedSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombineOutput {
    pub rect: Rect,
    pub labels: LabelField,
    /// Composited and blended color.
    pub color: ColorImage,
    /// Target depth with transferred depth on mask pixels (0 = unknown).
    pub depth: DepthMap,
    /// Mask pixels no proposal could explain.
    pub color_holes: Mask,
    pub mrf_pixels: usize,
    pub poisson_iterations: usize,
    pub refined: Vec<Se3>,
    pub pose_graph: Option<OptimizeReport>,
    pub depth_direct: usize,
    pub depth_splatted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorOutput {
    pub rect: Rect,
    pub color: ColorImage,
    pub exemplar_pixels: usize,
    pub fallback_pixels: usize,
    pub energy: Vec<f64>,
    /// 0 target, 1 MRF composite, 2 exemplar, 3 diffusion, per rect pixel
    /// (meaningful on mask pixels).
    pub provenance: Grid<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthOutput {
    pub rect: Rect,
    pub depth: DepthMap,
    pub holes: usize,
    pub propagated: usize,
    pub reclassified: usize,
    pub fallback: usize,
    pub iterations: usize,
    /// Mask pixels still without depth.
    pub residual: usize,
    pub class: Grid<PixelClass>,
}

pub const PROVENANCE_TARGET: u8 = 0;
pub const PROVENANCE_MRF: u8 = 1;
pub const PROVENANCE_EXEMPLAR: u8 = 2;
pub const PROVENANCE_DIFFUSION: u8 = 3;

pub fn stage_select(prep: &Prepared, cfg: &PipelineConfig, target: FrameId, region: &MaskRegion) -> Result<SelectOutput> {
    let seq = &prep.sequence;
    let frame = &seq.frames[target];
    let rect = region.rect.expand(cfg.context_margin, frame.width(), frame.height());
    let query = prep.features[target].filter(|k| rect.contains(k.x.round() as usize, k.y.round() as usize));
    let ctx = SelectionContext {
        sequence: seq,
        target,
        tree: &prep.tree,
        qualities: &prep.qualities,
    };
    let frames = &seq.frames;
    let distance = |id: FrameId| match (frames[target].pose, frames[id].pose) {
        (Some(a), Some(b)) => frame_distance(Some(&a), Some(&b)),
        _ => prep.transform(target, id, cfg).map(|(t, _, _)| frame_distance(Some(&Se3::identity()), Some(&t)).unwrap_or(0.0)),
    };
    match select_sources(region, &ctx, &query, &cfg.selection, distance) {
        Ok(scores) => Ok(SelectOutput {
            region: region.clone(),
            rect,
            scores,
            note: None,
        }),
        Err(e @ Error::Selection { .. }) => Ok(SelectOutput {
            region: region.clone(),
            rect,
            scores: Vec::new(),
            note: Some(e.to_string()),
        }),
        Err(e) => Err(e),
    }
}

pub fn stage_warp(prep: &Prepared, cfg: &PipelineConfig, target: FrameId, sel: &SelectOutput) -> Result<WarpOutput> {
    let seq = &prep.sequence;
    let frame = &seq.frames[target];
    let rect = sel.rect;
    let target_color = frame.color.to_color();
    let ring = frame.mask.crop(&rect).map(|m| !m);
    let ids: Vec<FrameId> = sel.scores.iter().map(|s| s.frame_id).collect();
    let results = par::map_slice(&ids, |&id| -> std::result::Result<(WarpedProposal, Se3, bool, usize, usize), String> {
        let source = &seq.frames[id];
        let info = prep.pair(target, id, cfg);
        let pairs = correspondences(&info.matches, &prep.features[target], &prep.features[id]);
        let (h, inliers) = ransac_homography(&pairs, &cfg.ransac_params()).map_err(|e| e.to_string())?;
        let inlier_pairs: Vec<_> = inliers.iter().map(|i| pairs[*i]).collect();
        let grid = fit_local_grid(&inlier_pairs, &h, rect, &cfg.grid).map_err(|e| e.to_string())?;
        let (transform, gt, rigid_inliers) = prep.transform(target, id, cfg).ok_or_else(|| "no rigid transform to the target".to_string())?;
        let proposal = warp_frame(source, &grid, rect, &target_color, &ring);
        Ok((proposal, transform, gt, rigid_inliers, inliers.len()))
    });
    let mut out = WarpOutput {
        rect,
        proposals: Vec::new(),
        transforms: Vec::new(),
        ground_truth: Vec::new(),
        rigid_inliers: Vec::new(),
        homography_inliers: Vec::new(),
        dropped: Vec::new(),
    };
    for (id, r) in ids.iter().zip(results) {
        match r {
            Ok((p, t, gt, ri, hi)) => {
                out.proposals.push(p);
                out.transforms.push(t);
                out.ground_truth.push(gt);
                out.rigid_inliers.push(ri);
                out.homography_inliers.push(hi);
            }
            Err(reason) => {
                log::info!("frame {target}: source {id} dropped: {reason}");
                out.dropped.push(DroppedSource { frame_id: *id, reason });
            }
        }
    }
    Ok(out)
}

/// Jointly refines target-from-source transforms. Ground-truth sets are
/// already consistent and are returned unchanged.
fn refine_transforms(prep: &Prepared, cfg: &PipelineConfig, warp: &WarpOutput) -> (Vec<Se3>, Option<OptimizeReport>) {
    if warp.transforms.is_empty() || warp.ground_truth.iter().all(|g| *g) {
        return (warp.transforms.clone(), None);
    }
    let mut graph = PoseGraph::new(&warp.transforms);
    for (k, t) in warp.transforms.iter().enumerate() {
        let w = if warp.ground_truth[k] { GROUND_TRUTH_WEIGHT } else { warp.rigid_inliers[k] as f64 };
        graph.add_edge(0, k + 1, *t, w);
    }
    let ids: Vec<FrameId> = warp.proposals.iter().map(|p| p.frame_id).collect();
    let pairs: Vec<(usize, usize)> = (0..ids.len()).flat_map(|a| (a + 1..ids.len()).map(move |b| (a, b))).collect();
    let estimates = par::map_slice(&pairs, |&(a, b)| prep.pair(ids[a], ids[b], cfg).rigid);
    for ((a, b), est) in pairs.iter().zip(estimates) {
        if let Some(r) = est {
            graph.add_edge(a + 1, b + 1, r.pose, r.inliers as f64);
        }
    }
    let (vertices, report) = optimize_pose_graph(&graph, cfg.pose_iters, cfg.pose_tolerance);
    (vertices[1..].to_vec(), Some(report))
}

pub fn stage_combine(prep: &Prepared, cfg: &PipelineConfig, target: FrameId, sel: &SelectOutput, warp: &WarpOutput) -> Result<CombineOutput> {
    let seq = &prep.sequence;
    let frame = &seq.frames[target];
    let local = local_views(frame, &sel.region, warp.rect, cfg.mrf.dilation);
    let translations: Vec<f64> = warp.transforms.iter().map(|t| t.translation.norm()).collect();
    let images = RegionImages {
        target: &local.color,
        mask: &local.mask,
        dilated: &local.dilated,
    };
    let (model, _median) = build_energy(&images, &warp.proposals, &translations, &cfg.mrf);
    let labels = solve_mrf(&model, cfg.mrf.max_passes);
    let mut comp = composite(&labels, &local.color, &local.dilated, &warp.proposals);

    // Unexplained band pixels are known; they revert to the target.
    let (w, h) = (local.rect.width(), local.rect.height());
    for y in 0..h {
        for x in 0..w {
            if *comp.hole.get(x, y) && !*local.mask.get(x, y) {
                comp.hole.set(x, y, false);
                comp.color.set(x, y, *local.color.get(x, y));
            }
        }
    }
    let replaced = Grid::from_fn(w, h, |x, y| *local.dilated.get(x, y) && comp.depth_source.get(x, y).is_some());
    let blend = poisson_blend(&comp.color, &replaced, &comp.hole, &local.color, &cfg.poisson)?;
    let mrf_pixels = local.mask.enumerate().filter(|(x, y, m)| **m && !*comp.hole.get(*x, *y)).count();

    let (refined, pose_graph) = refine_transforms(prep, cfg, warp);
    let sources: Vec<&Frame> = warp.proposals.iter().map(|p| &seq.frames[p.frame_id]).collect();
    let wanted = Grid::from_fn(w, h, |x, y| *local.mask.get(x, y) && comp.depth_source.get(x, y).is_some());
    let transfer = transfer_depth(local.rect, &wanted, &comp.depth_source, &warp.proposals, &sources, &refined, &seq.intrinsics);
    let depth = Grid::from_fn(w, h, |x, y| if *local.mask.get(x, y) { *transfer.depth.get(x, y) } else { *local.depth.get(x, y) });

    Ok(CombineOutput {
        rect: local.rect,
        labels,
        color: blend.color,
        depth,
        color_holes: comp.hole,
        mrf_pixels,
        poisson_iterations: blend.iterations,
        refined,
        pose_graph,
        depth_direct: transfer.direct,
        depth_splatted: transfer.splatted,
    })
}

pub fn stage_color(cfg: &PipelineConfig, warp: &WarpOutput, comb: &CombineOutput, mask: &Mask) -> Result<ColorOutput> {
    let mut images = vec![(comb.color.clone(), comb.color_holes.map(|h| !h))];
    images.extend(warp.proposals.iter().map(|p| (p.color.clone(), p.usable_mask())));
    let domain = PatchDomain::new(images, cfg.exemplar.patch_radius);
    let mut result = inpaint_color(&comb.color, &comb.color_holes, &domain, &cfg.exemplar_params())?;
    let mut provenance = mask.map(|m| if *m { PROVENANCE_MRF } else { PROVENANCE_TARGET });
    for (x, y, hole) in comb.color_holes.enumerate() {
        if *hole {
            let p = if result.provenance.get(x, y).is_some() { PROVENANCE_EXEMPLAR } else { PROVENANCE_DIFFUSION };
            provenance.set(x, y, p);
        }
    }
    // Anything the synthesis left open is diffused.
    let mut known = Grid::from_fn(comb.color.width(), comb.color.height(), |x, y| !*comb.color_holes.get(x, y) || *provenance.get(x, y) == PROVENANCE_EXEMPLAR);
    let extra = if known.iter().all(|k| *k) { 0 } else { diffuse_fill(&mut result.color, &mut known) };
    Ok(ColorOutput {
        rect: comb.rect,
        color: result.color,
        exemplar_pixels: result.filled,
        fallback_pixels: result.fallback.max(extra),
        energy: result.energy,
        provenance,
    })
}

pub fn stage_depth(cfg: &PipelineConfig, comb: &CombineOutput, color: &ColorOutput, mask: &Mask) -> DepthOutput {
    let holes = Grid::from_fn(mask.width(), mask.height(), |x, y| *mask.get(x, y) && *comb.depth.get(x, y) <= 0.0);
    let edges = color_edges(&color.color, cfg.edge_threshold);
    let map = classify(&holes, &edges);
    let result = propagate(&comb.depth, &map, &cfg.propagate);
    let mut depth = result.depth;
    let open = result.map.state.map(|s| *s == PixelState::Hole);
    let fallback = if result.unfilled > 0 { fallback_fill(&mut depth, &open) } else { 0 };
    let residual = mask.enumerate().filter(|(x, y, m)| **m && *depth.get(*x, *y) <= 0.0).count();
    DepthOutput {
        rect: comb.rect,
        holes: holes.count(),
        propagated: holes.count() - result.unfilled,
        reclassified: result.reclassified,
        fallback,
        iterations: result.iterations,
        residual,
        class: result.map.class,
        depth,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub select: f64,
    pub warp: f64,
    pub combine: f64,
    pub color: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub mask_id: usize,
    pub rect: Option<Rect>,
    pub mask_pixels: usize,
    pub sources: Vec<FrameId>,
    pub proposals: usize,
    pub dropped: Vec<DroppedSource>,
    pub mrf_energy: Option<f64>,
    pub mrf_passes: usize,
    /// Mask pixels filled by compositing.
    pub mrf_pixels: usize,
    /// Mask pixels filled by exemplar synthesis.
    pub exemplar_pixels: usize,
    /// Mask pixels filled by color diffusion.
    pub unfillable_pixels: usize,
    /// Mask pixels left without color by compositing.
    pub residual_holes: usize,
    pub depth_transferred: usize,
    pub depth_propagated: usize,
    pub depth_fallback: usize,
    pub depth_residual: usize,
    pub timings: StageTimings,
    pub note: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame_id: FrameId,
    pub stamp: String,
    pub noop: bool,
    pub masks: Vec<MaskReport>,
    /// Mask pixels without color or depth in the written output.
    pub residual_pixels: usize,
    pub outputs: Vec<PathBuf>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub frames: Vec<FrameReport>,
    pub outputs: Vec<PathBuf>,
    pub seconds: f64,
}

impl RunReport {
    pub fn failed_masks(&self) -> usize {
        self.frames.iter().flat_map(|f| &f.masks).filter(|m| m.error.is_some()).count()
    }

    /// Share of mask pixels filled by compositing.
    pub fn mrf_share(&self) -> f64 {
        let masks = self.frames.iter().flat_map(|f| &f.masks);
        let (mrf, total) = masks.fold((0usize, 0usize), |(a, b), m| (a + m.mrf_pixels, b + m.mask_pixels));
        if total == 0 {
            0.0
        } else {
            mrf as f64 / total as f64
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for f in &self.frames {
            let _ = writeln!(s, "frame {} ({}): {:.2}s", f.frame_id, f.stamp, f.seconds);
            if f.noop {
                let _ = writeln!(s, "  empty mask, copied unchanged");
            }
            for m in &f.masks {
                let _ = writeln!(
                    s,
                    "  mask {}: {} px, {} proposals, energy {}, mrf {} / exemplar {} / diffused {}, depth transferred {} propagated {} fallback {}",
                    m.mask_id,
                    m.mask_pixels,
                    m.proposals,
                    m.mrf_energy.map_or("-".to_string(), |e| format!("{e:.3}")),
                    m.mrf_pixels,
                    m.exemplar_pixels,
                    m.unfillable_pixels,
                    m.depth_transferred,
                    m.depth_propagated,
                    m.depth_fallback
                );
                let t = &m.timings;
                let _ = writeln!(
                    s,
                    "    time select {:.2}s warp {:.2}s combine {:.2}s color {:.2}s depth {:.2}s",
                    t.select, t.warp, t.combine, t.color, t.depth
                );
                for d in &m.dropped {
                    let _ = writeln!(s, "    dropped source {}: {}", d.frame_id, d.reason);
                }
                if let Some(n) = &m.note {
                    let _ = writeln!(s, "    note: {n}");
                }
                if let Some(e) = &m.error {
                    let _ = writeln!(s, "    error: {e}");
                }
            }
            let _ = writeln!(s, "  residual pixels: {}", f.residual_pixels);
        }
        let _ = writeln!(s, "total {:.2}s, {} files written", self.seconds, self.outputs.len());
        s
    }
}

/// Everything one region produced.
pub struct RegionResult {
    pub select: SelectOutput,
    pub warp: WarpOutput,
    pub combine: CombineOutput,
    pub color: ColorOutput,
    pub depth: DepthOutput,
    pub report: MaskReport,
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let r = f();
    *slot = t.elapsed().as_secs_f64();
    r
}

pub fn process_region(prep: &Prepared, cfg: &PipelineConfig, target: FrameId, region: &MaskRegion) -> Result<RegionResult> {
    let mut report = MaskReport {
        mask_id: region.mask_id,
        mask_pixels: region.component.count(),
        ..MaskReport::default()
    };
    let mut t = StageTimings::default();
    let select = timed(&mut t.select, || stage_select(prep, cfg, target, region))?;
    let warp = timed(&mut t.warp, || stage_warp(prep, cfg, target, &select))?;
    let combine = timed(&mut t.combine, || stage_combine(prep, cfg, target, &select, &warp))?;
    let mask = prep.sequence.frames[target].mask.crop(&select.rect);
    let color = timed(&mut t.color, || stage_color(cfg, &warp, &combine, &mask))?;
    let depth = timed(&mut t.depth, || stage_depth(cfg, &combine, &color, &mask));
    fill_report(&mut report, &select, &warp, &combine, &color, &depth, &mask);
    report.timings = t;
    Ok(RegionResult {
        select,
        warp,
        combine,
        color,
        depth,
        report,
    })
}

fn fill_report(r: &mut MaskReport, sel: &SelectOutput, warp: &WarpOutput, comb: &CombineOutput, color: &ColorOutput, depth: &DepthOutput, mask: &Mask) {
    r.rect = Some(sel.rect);
    r.sources = sel.scores.iter().map(|s| s.frame_id).collect();
    r.proposals = warp.proposals.len();
    r.dropped = warp.dropped.clone();
    r.mrf_energy = Some(comb.labels.energy);
    r.mrf_passes = comb.labels.trace.len().saturating_sub(1);
    r.note = sel.note.clone();
    // Counts over this component's pixels only.
    let own = |x: usize, y: usize| {
        let (fx, fy) = (sel.rect.x0 + x, sel.rect.y0 + y);
        *mask.get(x, y) && sel.region.rect.contains(fx, fy) && *sel.region.component.get(fx - sel.region.rect.x0, fy - sel.region.rect.y0)
    };
    for (x, y, p) in color.provenance.enumerate() {
        if !own(x, y) {
            continue;
        }
        match *p {
            PROVENANCE_MRF => r.mrf_pixels += 1,
            PROVENANCE_EXEMPLAR => r.exemplar_pixels += 1,
            PROVENANCE_DIFFUSION => r.unfillable_pixels += 1,
            _ => {}
        }
        if *comb.color_holes.get(x, y) {
            r.residual_holes += 1;
        }
        if *comb.depth.get(x, y) > 0.0 {
            r.depth_transferred += 1;
        }
        if *depth.depth.get(x, y) <= 0.0 {
            r.depth_residual += 1;
        }
    }
    r.depth_propagated = depth.propagated;
    r.depth_fallback = depth.fallback;
}

/// Output color and depth of one frame after pasting every region.
pub struct FilledFrame {
    pub color: ColorImage,
    pub depth: DepthMap,
}

/// Pastes region results into the frame. Color is written over each
/// region's dilated component, depth over its component.
pub fn assemble(frame: &Frame, regions: &[(MaskRegion, Rect, &ColorImage, &DepthMap)], dilation: usize) -> FilledFrame {
    let mut color = frame.color.to_color();
    let mut depth = frame.depth.clone();
    for (region, rect, c, d) in regions {
        let local = local_views(frame, region, *rect, dilation);
        for y in 0..rect.height() {
            for x in 0..rect.width() {
                let (fx, fy) = (rect.x0 + x, rect.y0 + y);
                if *local.own.get(x, y) && *local.dilated.get(x, y) {
                    color.set(fx, fy, *c.get(x, y));
                }
                if *local.mask.get(x, y) && region.rect.contains(fx, fy) && *region.component.get(fx - region.rect.x0, fy - region.rect.y0) {
                    depth.set(fx, fy, *d.get(x, y));
                }
            }
        }
    }
    FilledFrame { color, depth }
}

/// Fills a region without any multi-view evidence: color by diffusion,
/// depth by propagation plus fallback. Used after a stage error.
fn fallback_region(frame: &Frame, region: &MaskRegion, cfg: &PipelineConfig) -> (Rect, ColorImage, DepthMap) {
    let rect = region.rect.expand(cfg.context_margin, frame.width(), frame.height());
    let local = local_views(frame, region, rect, cfg.mrf.dilation);
    let mut color = local.color.clone();
    let mut known = local.mask.map(|m| !m);
    diffuse_fill(&mut color, &mut known);
    let mut depth = Grid::from_fn(rect.width(), rect.height(), |x, y| if *local.mask.get(x, y) { 0.0 } else { *local.depth.get(x, y) });
    let holes = local.mask.clone();
    let result = propagate(&depth, &classify(&holes, &color_edges(&color, cfg.edge_threshold)), &cfg.propagate);
    depth = result.depth;
    let open = result.map.state.map(|s| *s == PixelState::Hole);
    fallback_fill(&mut depth, &open);
    (rect, color, depth)
}

pub fn resolve_targets(seq: &Sequence, targets: &Targets) -> Result<Vec<FrameId>> {
    match targets {
        Targets::All => Ok((0..seq.len()).collect()),
        Targets::Masked => Ok(seq.frames.iter().filter(|f| f.mask.any()).map(|f| f.id).collect()),
        Targets::Ids(ids) => {
            for id in ids {
                if *id >= seq.len() {
                    return Err(Error::Input(format!("target frame {id} out of range (sequence has {} frames)", seq.len())));
                }
            }
            Ok(ids.clone())
        }
    }
}

/// Writes frame outputs. Frames without a mask are copied byte for byte
/// when their files are known.
fn write_outputs(cfg: &PipelineConfig, prep: &Prepared, frame: &Frame, filled: Option<&FilledFrame>) -> Result<Vec<PathBuf>> {
    let out = &cfg.output;
    fs::create_dir_all(out.join("color"))?;
    fs::create_dir_all(out.join("depth"))?;
    let cpath = out.join("color").join(format!("{}.png", frame.stamp));
    let dpath = out.join("depth").join(format!("{}.png", frame.stamp));
    let scale = prep.sequence.intrinsics.depth_scale;
    let mut written = vec![cpath.clone(), dpath.clone()];
    let mut out_frame = frame.clone();
    match (filled, &frame.files) {
        (None, Some(files)) => {
            fs::copy(&files.color, &cpath)?;
            fs::copy(&files.depth, &dpath)?;
        }
        (None, None) => {
            write_color(&cpath, &frame.color)?;
            write_depth(&dpath, &frame.depth, scale)?;
        }
        (Some(f), _) => {
            out_frame.color = f.color.to_rgb8();
            out_frame.depth = f.depth.clone();
            write_color(&cpath, &out_frame.color)?;
            write_depth(&dpath, &f.depth, scale)?;
        }
    }
    if cfg.export_ply {
        fs::create_dir_all(out.join("ply"))?;
        let ppath = out.join("ply").join(format!("{}.ply", frame.stamp));
        export_ply(&out_frame, &prep.sequence.intrinsics, &ppath)?;
        written.push(ppath);
    }
    Ok(written)
}

/// Processes one target frame in memory.
pub fn run_frame(prep: &Prepared, cfg: &PipelineConfig, target: FrameId) -> Result<(FrameReport, Option<FilledFrame>)> {
    let start = Instant::now();
    let frame = &prep.sequence.frames[target];
    let regions = extract_mask_regions(&frame.mask);
    let mut report = FrameReport {
        frame_id: target,
        stamp: frame.stamp.clone(),
        noop: regions.is_empty(),
        ..FrameReport::default()
    };
    if regions.is_empty() {
        report.seconds = start.elapsed().as_secs_f64();
        return Ok((report, None));
    }
    let chunk = if cfg.workers == 0 { regions.len() } else { cfg.workers };
    let mut results = Vec::with_capacity(regions.len());
    for group in regions.chunks(chunk) {
        results.extend(par::map_slice(group, |r| process_region(prep, cfg, target, r)));
    }
    let mut pieces: Vec<(MaskRegion, Rect, ColorImage, DepthMap)> = Vec::new();
    for (region, res) in regions.iter().zip(results) {
        match res {
            Ok(r) => {
                if cfg.debug {
                    write_debug(cfg, frame, &r)?;
                    write_region_artifacts(cfg, frame, &r)?;
                }
                report.masks.push(r.report);
                pieces.push((region.clone(), r.select.rect, r.color.color, r.depth.depth));
            }
            Err(e) => {
                log::warn!("frame {target} mask {}: {e}", region.mask_id);
                let (rect, c, d) = fallback_region(frame, region, cfg);
                report.masks.push(MaskReport {
                    mask_id: region.mask_id,
                    rect: Some(rect),
                    mask_pixels: region.component.count(),
                    unfillable_pixels: region.component.count(),
                    error: Some(e.to_string()),
                    ..MaskReport::default()
                });
                pieces.push((region.clone(), rect, c, d));
            }
        }
    }
    let refs: Vec<_> = pieces.iter().map(|(r, rect, c, d)| (r.clone(), *rect, c, d)).collect();
    let filled = assemble(frame, &refs, cfg.mrf.dilation);
    report.residual_pixels = frame.mask.enumerate().filter(|(x, y, m)| **m && *filled.depth.get(*x, *y) <= 0.0).count();
    report.seconds = start.elapsed().as_secs_f64();
    Ok((report, Some(filled)))
}

/// Full run over the configured targets.
pub fn run(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let prep = Prepared::load(cfg)?;
    run_prepared(&prep, cfg, start)
}

pub fn run_prepared(prep: &Prepared, cfg: &PipelineConfig, start: Instant) -> Result<RunReport> {
    let targets = resolve_targets(&prep.sequence, &cfg.targets)?;
    fs::create_dir_all(&cfg.output)?;
    let mut report = RunReport::default();
    for t in targets {
        let (mut fr, filled) = run_frame(prep, cfg, t)?;
        let frame = &prep.sequence.frames[t];
        fr.outputs = write_outputs(cfg, prep, frame, filled.as_ref())?;
        report.outputs.extend(fr.outputs.iter().cloned());
        report.frames.push(fr);
    }
    report.seconds = start.elapsed().as_secs_f64();
    write_report(cfg, &mut report)?;
    Ok(report)
}

fn write_report(cfg: &PipelineConfig, report: &mut RunReport) -> Result<()> {
    let json = cfg.output.join("report.json");
    let text = cfg.output.join("report.txt");
    report.outputs.push(json.clone());
    report.outputs.push(text.clone());
    fs::write(&json, serde_json::to_string_pretty(report)?)?;
    fs::write(&text, report.to_text())?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    stage: Stage,
    target: FrameId,
    stamp: String,
    mask_id: usize,
    body: T,
}

pub fn artifact_path(cfg: &PipelineConfig, frame: &Frame, mask_id: usize, stage: Stage) -> PathBuf {
    cfg.output.join("stages").join(&frame.stamp).join(format!("mask{mask_id}.{}.json", stage.name()))
}

fn write_artifact<T: Serialize>(cfg: &PipelineConfig, frame: &Frame, mask_id: usize, stage: Stage, body: &T) -> Result<PathBuf> {
    let path = artifact_path(cfg, frame, mask_id, stage);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let env = Envelope {
        format: ARTIFACT_FORMAT.to_string(),
        version: ARTIFACT_VERSION,
        stage,
        target: frame.id,
        stamp: frame.stamp.clone(),
        mask_id,
        body,
    };
    fs::write(&path, serde_json::to_vec(&env)?)?;
    Ok(path)
}

fn read_artifact<T: DeserializeOwned>(cfg: &PipelineConfig, frame: &Frame, mask_id: usize, stage: Stage) -> Result<T> {
    let path = artifact_path(cfg, frame, mask_id, stage);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let bad = |reason: String| Error::Artifact {
        path: path.clone(),
        reason,
    };
    let env: Envelope<T> = serde_json::from_slice(&fs::read(&path)?).map_err(|e| bad(e.to_string()))?;
    if env.format != ARTIFACT_FORMAT || env.version != ARTIFACT_VERSION {
        return Err(bad(format!("format {} version {}, expected {ARTIFACT_FORMAT} version {ARTIFACT_VERSION}", env.format, env.version)));
    }
    if env.stage != stage || env.stamp != frame.stamp || env.mask_id != mask_id {
        return Err(bad("artifact belongs to another stage, frame or mask".into()));
    }
    Ok(env.body)
}

fn write_region_artifacts(cfg: &PipelineConfig, frame: &Frame, r: &RegionResult) -> Result<()> {
    let id = r.select.region.mask_id;
    write_artifact(cfg, frame, id, Stage::Select, &r.select)?;
    write_artifact(cfg, frame, id, Stage::Warp, &r.warp)?;
    write_artifact(cfg, frame, id, Stage::Combine, &r.combine)?;
    write_artifact(cfg, frame, id, Stage::Color, &r.color)?;
    write_artifact(cfg, frame, id, Stage::Depth, &r.depth)?;
    Ok(())
}

/// Runs one stage for every mask of every target, reading the previous
/// stage's artifacts. The depth stage also writes the frame outputs.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let prep = Prepared::load(cfg)?;
    run_stage_prepared(&prep, cfg, stage)
}

pub fn run_stage_prepared(prep: &Prepared, cfg: &PipelineConfig, stage: Stage) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for t in resolve_targets(&prep.sequence, &cfg.targets)? {
        let frame = &prep.sequence.frames[t];
        let regions = extract_mask_regions(&frame.mask);
        let mut pieces = Vec::new();
        for region in &regions {
            let id = region.mask_id;
            let path = match stage {
                Stage::Select => write_artifact(cfg, frame, id, stage, &stage_select(prep, cfg, t, region)?)?,
                Stage::Warp => {
                    let sel: SelectOutput = read_artifact(cfg, frame, id, Stage::Select)?;
                    write_artifact(cfg, frame, id, stage, &stage_warp(prep, cfg, t, &sel)?)?
                }
                Stage::Combine => {
                    let sel: SelectOutput = read_artifact(cfg, frame, id, Stage::Select)?;
                    let warp: WarpOutput = read_artifact(cfg, frame, id, Stage::Warp)?;
                    write_artifact(cfg, frame, id, stage, &stage_combine(prep, cfg, t, &sel, &warp)?)?
                }
                Stage::Color => {
                    let warp: WarpOutput = read_artifact(cfg, frame, id, Stage::Warp)?;
                    let comb: CombineOutput = read_artifact(cfg, frame, id, Stage::Combine)?;
                    let mask = frame.mask.crop(&comb.rect);
                    write_artifact(cfg, frame, id, stage, &stage_color(cfg, &warp, &comb, &mask)?)?
                }
                Stage::Depth => {
                    let comb: CombineOutput = read_artifact(cfg, frame, id, Stage::Combine)?;
                    let color: ColorOutput = read_artifact(cfg, frame, id, Stage::Color)?;
                    let mask = frame.mask.crop(&comb.rect);
                    let depth = stage_depth(cfg, &comb, &color, &mask);
                    let p = write_artifact(cfg, frame, id, stage, &depth)?;
                    pieces.push((region.clone(), comb.rect, color.color, depth.depth));
                    p
                }
            };
            written.push(path);
        }
        if stage == Stage::Depth {
            let filled = if regions.is_empty() {
                None
            } else {
                let refs: Vec<_> = pieces.iter().map(|(r, rect, c, d)| (r.clone(), *rect, c, d)).collect();
                Some(assemble(frame, &refs, cfg.mrf.dilation))
            };
            written.extend(write_outputs(cfg, prep, frame, filled.as_ref())?);
        }
    }
    Ok(written)
}

fn palette(l: usize) -> [u8; 3] {
    if l == NO_LABEL {
        return [0, 0, 0];
    }
    const P: [[u8; 3]; 8] = [
        [128, 128, 128],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
    ];
    P[l % P.len()]
}

/// Intermediate images and tables for one region under `<output>/debug`.
fn write_debug(cfg: &PipelineConfig, frame: &Frame, r: &RegionResult) -> Result<()> {
    let dir = cfg.output.join("debug").join(&frame.stamp);
    fs::create_dir_all(&dir)?;
    let id = r.select.region.mask_id;
    for (k, p) in r.warp.proposals.iter().enumerate() {
        write_color(&dir.join(format!("mask{id}_proposal{k}_frame{}.png", p.frame_id)), &p.color.to_rgb8())?;
        write_mask(&dir.join(format!("mask{id}_proposal{k}_usable.png")), &p.usable_mask())?;
    }
    let lf = &r.combine.labels;
    let labels: Grid<[u8; 3]> = Grid::from_fn(lf.width, lf.height, |x, y| palette(lf.labels[y * lf.width + x]));
    write_color(&dir.join(format!("mask{id}_labels.png")), &labels)?;
    let mut csv = String::from("pass,energy\n");
    for (i, e) in lf.trace.iter().enumerate() {
        let _ = writeln!(csv, "{i},{e}");
    }
    fs::write(dir.join(format!("mask{id}_energy.csv")), csv)?;
    write_color(&dir.join(format!("mask{id}_combined.png")), &r.combine.color.to_rgb8())?;
    let prov: Grid<[u8; 3]> = r.color.provenance.map(|p| match *p {
        PROVENANCE_MRF => [60, 180, 75],
        PROVENANCE_EXEMPLAR => [0, 130, 200],
        PROVENANCE_DIFFUSION => [230, 25, 75],
        _ => [0, 0, 0],
    });
    write_color(&dir.join(format!("mask{id}_provenance.png")), &prov)?;
    let class: Grid<[u8; 3]> = r.depth.class.map(|c| match c {
        PixelClass::Edge => [255, 255, 255],
        PixelClass::Smooth => [40, 40, 40],
    });
    write_color(&dir.join(format!("mask{id}_depth_class.png")), &class)?;
    let mut graph = String::new();
    for (k, t) in r.combine.refined.iter().enumerate() {
        let _ = writeln!(graph, "vertex {} frame {} t {:?} angle {:.6}", k + 1, r.warp.proposals[k].frame_id, t.translation.as_slice(), t.rotation_angle());
    }
    if let Some(rep) = &r.combine.pose_graph {
        let _ = writeln!(graph, "cost {} -> {} in {} iterations, converged {}", rep.initial_cost, rep.final_cost, rep.iterations, rep.converged);
    } else {
        let _ = writeln!(graph, "ground-truth transforms, not optimized");
    }
    fs::write(dir.join(format!("mask{id}_posegraph.txt")), graph)?;
    Ok(())
}
