//! Pipeline configuration as a `key = value` text file.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are an error.
//! Keys:
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `dataset` | (required) | sequence directory |
//! | `output` | `out` | output directory |
//! | `targets` | `masked` | comma-separated frame ids, `masked` or `all` |
//! | `max_assoc_dt` | 0.02 | timestamp association tolerance (s) |
//! | `max_frames` | 0 | keep at most this many frames (0 = all) |
//! | `frame_step` | 1 | keep every n-th frame |
//! | `candidates` | 50 | similarity shortlist size `n` |
//! | `selected` | 8 | sources per mask `m` |
//! | `w1`, `w2` | 1.0, 0.5 | suitability weights |
//! | `gradient_ratio` | 0.1 | image-quality gradient threshold |
//! | `max_mask_coverage` | 0.5 | drop sources masked over the region |
//! | `context_margin` | 24 | pixels of context around a mask rectangle |
//! | `match_ratio` | 0.8 | ratio test |
//! | `vocab_branching`, `vocab_depth` | 8, 3 | vocabulary tree shape |
//! | `max_features` | 1500 | keypoints kept per frame |
//! | `ransac_threshold` | 3.0 | homography inlier threshold (px) |
//! | `ransac_iters` | 2000 | |
//! | `min_inliers` | 8 | |
//! | `cell_px`, `sigma_px`, `gamma`, `min_support` | 32, 64, 0.025, 8 | moving DLT |
//! | `lambda1`, `lambda2`, `lambda3` | 1, 0.2, 1 | MRF weights |
//! | `dilation` | 3 | mask dilation before compositing |
//! | `mrf_passes` | 20 | alpha-expansion passes |
//! | `poisson_tolerance`, `poisson_iters` | 1e-6, 10000 | |
//! | `rigid_threshold` | 0.03 | 3D inlier distance (m) |
//! | `pose_iters`, `pose_tolerance` | 50, 1e-8 | pose-graph optimizer |
//! | `patch_radius` | 4 | exemplar half-size |
//! | `gradient_weight` | 1.0 | exemplar gradient term |
//! | `random_samples`, `seeds`, `search_rounds`, `refine_sweeps` | 128, 16, 4, 3 | exemplar search |
//! | `edge_threshold` | 0.25 | color Sobel magnitude for depth edges |
//! | `stale_limit` | 5 | |
//! | `depth_iters` | 20000 | |
//! | `seed` | 0 | |
//! | `workers` | 0 | mask regions in flight (0 = all) |
//! | `export_ply` | false | |
//! | `debug` | false | write intermediate images |

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::combine::{MrfParams, PoissonParams};
use crate::dataset::{FrameId, LoadOptions};
use crate::depth_fill::PropagateParams;
use crate::error::{Error, Result};
use crate::exemplar::ExemplarParams;
use crate::features::DetectorParams;
use crate::posegraph::RigidParams;
use crate::selection::SelectionParams;
use crate::warp::{GridParams, RansacParams};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Targets {
    /// Every frame with a nonempty mask.
    Masked,
    All,
    Ids(Vec<FrameId>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub targets: Targets,
    pub max_assoc_dt: f64,
    pub max_frames: usize,
    pub frame_step: usize,
    pub selection: SelectionParams,
    pub context_margin: usize,
    pub match_ratio: f32,
    pub vocab_branching: usize,
    pub vocab_depth: usize,
    pub detector: DetectorParams,
    pub ransac: RansacParams,
    pub grid: GridParams,
    pub mrf: MrfParams,
    pub poisson: PoissonParams,
    pub rigid: RigidParams,
    pub pose_iters: usize,
    pub pose_tolerance: f64,
    pub exemplar: ExemplarParams,
    pub edge_threshold: f32,
    pub propagate: PropagateParams,
    pub seed: u64,
    pub workers: usize,
    pub export_ply: bool,
    pub debug: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            output: PathBuf::from("out"),
            targets: Targets::Masked,
            max_assoc_dt: LoadOptions::default().max_assoc_dt,
            max_frames: 0,
            frame_step: 1,
            selection: SelectionParams::default(),
            context_margin: 24,
            match_ratio: 0.8,
            vocab_branching: 8,
            vocab_depth: 3,
            detector: DetectorParams {
                max_features: 1500,
                ..DetectorParams::default()
            },
            ransac: RansacParams::default(),
            grid: GridParams::default(),
            mrf: MrfParams::default(),
            poisson: PoissonParams::default(),
            rigid: RigidParams::default(),
            pose_iters: 50,
            pose_tolerance: 1e-8,
            exemplar: ExemplarParams::default(),
            edge_threshold: 0.25,
            propagate: PropagateParams::default(),
            seed: 0,
            workers: 0,
            export_ply: false,
            debug: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl Targets {
    pub fn parse(value: &str) -> Result<Self> {
        match value.trim() {
            "masked" => Ok(Targets::Masked),
            "all" => Ok(Targets::All),
            list => list
                .split(',')
                .map(|t| parse("targets", t.trim()))
                .collect::<Result<Vec<_>>>()
                .map(Targets::Ids),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        // Relative dataset and output paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.dataset.is_relative() && !cfg.dataset.as_os_str().is_empty() {
            cfg.dataset = base.join(&cfg.dataset);
        }
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        Ok(cfg)
    }

    /// Parses and validates config text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key; does not validate.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = PathBuf::from(v),
            "output" => self.output = PathBuf::from(v),
            "targets" => self.targets = Targets::parse(v)?,
            "max_assoc_dt" => self.max_assoc_dt = parse(key, v)?,
            "max_frames" => self.max_frames = parse(key, v)?,
            "frame_step" => self.frame_step = parse(key, v)?,
            "candidates" => self.selection.candidates = parse(key, v)?,
            "selected" => self.selection.selected = parse(key, v)?,
            "w1" => self.selection.w1 = parse(key, v)?,
            "w2" => self.selection.w2 = parse(key, v)?,
            "gradient_ratio" => self.selection.gradient_ratio = parse(key, v)?,
            "max_mask_coverage" => self.selection.max_mask_coverage = parse(key, v)?,
            "context_margin" => self.context_margin = parse(key, v)?,
            "match_ratio" => self.match_ratio = parse(key, v)?,
            "vocab_branching" => self.vocab_branching = parse(key, v)?,
            "vocab_depth" => self.vocab_depth = parse(key, v)?,
            "max_features" => self.detector.max_features = parse(key, v)?,
            "contrast_threshold" => self.detector.contrast_threshold = parse(key, v)?,
            "ransac_threshold" => self.ransac.threshold = parse(key, v)?,
            "ransac_iters" => self.ransac.max_iters = parse(key, v)?,
            "min_inliers" => self.ransac.min_inliers = parse(key, v)?,
            "cell_px" => self.grid.cell_px = parse(key, v)?,
            "sigma_px" => self.grid.sigma_px = parse(key, v)?,
            "gamma" => self.grid.gamma = parse(key, v)?,
            "min_support" => self.grid.min_support = parse(key, v)?,
            "lambda1" => self.mrf.lambda1 = parse(key, v)?,
            "lambda2" => self.mrf.lambda2 = parse(key, v)?,
            "lambda3" => self.mrf.lambda3 = parse(key, v)?,
            "dilation" => self.mrf.dilation = parse(key, v)?,
            "mrf_passes" => self.mrf.max_passes = parse(key, v)?,
            "poisson_tolerance" => self.poisson.tolerance = parse(key, v)?,
            "poisson_iters" => self.poisson.max_iters = parse(key, v)?,
            "rigid_threshold" => self.rigid.threshold = parse(key, v)?,
            "pose_iters" => self.pose_iters = parse(key, v)?,
            "pose_tolerance" => self.pose_tolerance = parse(key, v)?,
            "patch_radius" => self.exemplar.patch_radius = parse(key, v)?,
            "gradient_weight" => self.exemplar.gradient_weight = parse(key, v)?,
            "random_samples" => self.exemplar.random_samples = parse(key, v)?,
            "seeds" => self.exemplar.seeds = parse(key, v)?,
            "search_rounds" => self.exemplar.search_rounds = parse(key, v)?,
            "refine_sweeps" => self.exemplar.refine_sweeps = parse(key, v)?,
            "edge_threshold" => self.edge_threshold = parse(key, v)?,
            "stale_limit" => self.propagate.stale_limit = parse(key, v)?,
            "depth_iters" => self.propagate.max_iters = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "export_ply" => self.export_ply = parse_bool(key, v)?,
            "debug" => self.debug = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        let s = &self.selection;
        if s.selected == 0 {
            return fail("selected (m) must be at least 1");
        }
        if s.candidates < s.selected {
            return fail("candidates (n) must be at least selected (m)");
        }
        if !(s.w1.is_finite() && s.w2.is_finite() && s.w1 >= 0.0 && s.w2 >= 0.0) {
            return fail("w1 and w2 must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&s.gradient_ratio) || !(0.0..=1.0).contains(&s.max_mask_coverage) {
            return fail("gradient_ratio and max_mask_coverage must lie in [0, 1]");
        }
        if !(self.max_assoc_dt > 0.0) || self.frame_step == 0 {
            return fail("max_assoc_dt must be positive and frame_step at least 1");
        }
        if !(self.match_ratio > 0.0 && self.match_ratio <= 1.0) {
            return fail("match_ratio must lie in (0, 1]");
        }
        if self.vocab_branching < 2 || self.vocab_depth == 0 {
            return fail("vocab_branching must be at least 2 and vocab_depth at least 1");
        }
        if !(self.ransac.threshold > 0.0) || self.ransac.max_iters == 0 {
            return fail("ransac_threshold must be positive and ransac_iters at least 1");
        }
        let g = &self.grid;
        if g.cell_px == 0 || !(g.sigma_px > 0.0) || !(0.0..=1.0).contains(&g.gamma) || g.min_support < 0.0 {
            return fail("cell_px, sigma_px must be positive and gamma in [0, 1]");
        }
        let m = &self.mrf;
        if [m.lambda1, m.lambda2, m.lambda3].iter().any(|l| !l.is_finite() || *l < 0.0) {
            return fail("lambda1..3 must be finite and nonnegative");
        }
        if m.max_passes == 0 {
            return fail("mrf_passes must be at least 1");
        }
        if !(self.poisson.tolerance > 0.0) || self.poisson.max_iters == 0 {
            return fail("poisson_tolerance must be positive and poisson_iters at least 1");
        }
        if !(self.rigid.threshold > 0.0) || !(self.pose_tolerance > 0.0) {
            return fail("rigid_threshold and pose_tolerance must be positive");
        }
        let e = &self.exemplar;
        if e.patch_radius == 0 || e.gradient_weight < 0.0 || e.random_samples == 0 {
            return fail("patch_radius and random_samples must be positive, gradient_weight nonnegative");
        }
        if !(e.alpha_min > 0.0 && e.alpha_min <= 1.0 && e.alpha_max >= 1.0) {
            return fail("alpha bounds must bracket 1");
        }
        if !(self.edge_threshold >= 0.0) || self.propagate.stale_limit == 0 || self.propagate.max_iters == 0 {
            return fail("edge_threshold must be nonnegative, stale_limit and depth_iters positive");
        }
        if let Targets::Ids(ids) = &self.targets {
            if ids.is_empty() {
                return fail("targets list is empty");
            }
        }
        Ok(())
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            max_assoc_dt: self.max_assoc_dt,
            max_frames: self.max_frames,
            step: self.frame_step,
        }
    }

    /// Module parameters with the run seed folded in.
    pub fn exemplar_params(&self) -> ExemplarParams {
        ExemplarParams { seed: self.seed, ..self.exemplar }
    }

    pub fn ransac_params(&self) -> RansacParams {
        RansacParams { seed: self.seed, ..self.ransac }
    }

    pub fn rigid_params(&self) -> RigidParams {
        RigidParams { seed: self.seed, ..self.rigid }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn zero_selected_is_rejected() {
        let err = PipelineConfig::parse("dataset = x\nselected = 0\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn parses_keys_and_comments() {
        let cfg = PipelineConfig::parse("# comment\ndataset = data # trailing\ntargets = 3, 5\nlambda2 = 0.5\nexport_ply = yes\n").unwrap();
        assert_eq!(cfg.dataset, PathBuf::from("data"));
        assert_eq!(cfg.targets, Targets::Ids(vec![3, 5]));
        assert_eq!(cfg.mrf.lambda2, 0.5);
        assert!(cfg.export_ply);
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(PipelineConfig::parse("colour = red").is_err());
        assert!(PipelineConfig::parse("just text").is_err());
    }
}
