//! TUM-format RGB-D sequence ingestion, the pinhole camera model and PLY
//! export.
//!
//! A sequence directory holds `rgb.txt` and `depth.txt` (`timestamp path`
//! rows), an optional `groundtruth.txt` (`timestamp tx ty tz qx qy qz qw`),
//! optional `intrinsics.txt` (`key = value` lines for `fx fy cx cy
//! depth_scale`) and optional `masks/<color timestamp>.png`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DepthMap, Grid, Mask, Rgb8Image};

pub use crate::geometry::Pose;

pub type FrameId = usize;

/// Pinhole intrinsics plus the 16-bit depth PNG scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Depth PNG units per meter.
    pub depth_scale: f64,
}

/// TUM depth PNG convention.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale: TUM_DEPTH_SCALE,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Freiburg 3 Kinect calibration published with the TUM benchmark.
    pub fn tum_freiburg3() -> Self {
        Self {
            fx: 535.4,
            fy: 539.2,
            cx: 320.1,
            cy: 247.6,
            width: 640,
            height: 480,
            depth_scale: TUM_DEPTH_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
            && self.depth_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Back-projects pixel `(u, v)` at depth `d`.
    #[inline]
    pub fn unproject_pixel(&self, u: f64, v: f64, d: f64) -> Point3<f64> {
        Point3::new((u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d)
    }

    /// Projects a camera-frame point.
    #[inline]
    pub fn project_point(&self, p: &Point3<f64>) -> Projection {
        if p.z <= 0.0 {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                z: p.z,
                behind_camera: true,
                out_of_bounds: true,
            };
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        let out = !(u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64);
        Projection {
            u,
            v,
            z: p.z,
            behind_camera: false,
            out_of_bounds: out,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub behind_camera: bool,
    pub out_of_bounds: bool,
}

/// A back-projected pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelPoint {
    pub u: usize,
    pub v: usize,
    pub point: Point3<f64>,
}

/// One RGB-D frame.
#[derive(Clone, Debug)]
pub struct Frame {
    pub id: FrameId,
    pub timestamp: f64,
    /// Timestamp token exactly as written in `rgb.txt`; names mask and output files.
    pub stamp: String,
    pub color: Rgb8Image,
    pub depth: DepthMap,
    pub mask: Mask,
    /// Camera-to-world.
    pub pose: Option<Pose>,
    /// Files the frame was read from, when it came from disk.
    pub files: Option<FrameFiles>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameFiles {
    pub color: PathBuf,
    pub depth: PathBuf,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }

    pub fn check(&self) -> Result<()> {
        if !self.color.same_size(&self.depth) || !self.color.same_size(&self.mask) {
            return Err(Error::Input(format!("frame {}: color/depth/mask sizes differ", self.id)));
        }
        if self.depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Input(format!("frame {}: depth must be finite and nonnegative", self.id)));
        }
        if !self.mask.is_empty() && self.mask.count() == self.mask.len() {
            return Err(Error::Input(format!("frame {}: mask covers the whole image", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub intrinsics: CameraIntrinsics,
}

impl Sequence {
    pub fn frame(&self, id: FrameId) -> Option<&Frame> {
        self.frames.get(id)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Options beyond the association tolerance.
#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub max_assoc_dt: f64,
    /// Keep at most this many associated frames (0 = all).
    pub max_frames: usize,
    /// Keep every `step`-th associated frame.
    pub step: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_assoc_dt: 0.02,
            max_frames: 0,
            step: 1,
        }
    }
}

#[derive(Clone, Debug)]
struct IndexRow {
    stamp: String,
    time: f64,
    fields: Vec<String>,
}

fn read_index(path: &Path, min_fields: usize) -> Result<Vec<IndexRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let stamp = parts.next().unwrap_or_default().to_string();
        let time: f64 = stamp
            .parse()
            .map_err(|_| Error::Input(format!("{}:{}: bad timestamp {stamp:?}", path.display(), lineno + 1)))?;
        let fields: Vec<String> = parts.map(str::to_string).collect();
        if fields.len() < min_fields {
            return Err(Error::Input(format!("{}:{}: expected {min_fields} fields", path.display(), lineno + 1)));
        }
        rows.push(IndexRow { stamp, time, fields });
    }
    rows.sort_by(|a, b| a.time.total_cmp(&b.time));
    rows.dedup_by(|b, a| a.time == b.time);
    Ok(rows)
}

/// Index of the row whose time is nearest to `t`, if within `max_dt`.
/// Ties go to the earlier row.
fn nearest(rows: &[IndexRow], t: f64, max_dt: f64) -> Option<usize> {
    if rows.is_empty() {
        return None;
    }
    let i = rows.partition_point(|r| r.time < t);
    let mut best: Option<(usize, f64)> = None;
    for j in [i.wrapping_sub(1), i] {
        if let Some(r) = rows.get(j) {
            let dt = (r.time - t).abs();
            if best.is_none_or(|(_, b)| dt < b) {
                best = Some((j, dt));
            }
        }
    }
    best.filter(|(_, dt)| *dt <= max_dt).map(|(j, _)| j)
}

/// Loads a sequence, associating color, depth and pose rows by nearest
/// timestamp within `max_assoc_dt` seconds.
pub fn load_sequence(dir: &Path, max_assoc_dt: f64) -> Result<Sequence> {
    load_sequence_with(
        dir,
        &LoadOptions {
            max_assoc_dt,
            ..LoadOptions::default()
        },
    )
}

pub fn load_sequence_with(dir: &Path, opts: &LoadOptions) -> Result<Sequence> {
    if !dir.is_dir() {
        return Err(Error::Input(format!("{} is not a directory", dir.display())));
    }
    let rgb = read_index(&dir.join("rgb.txt"), 1)?;
    let depth = read_index(&dir.join("depth.txt"), 1)?;
    let gt_path = dir.join("groundtruth.txt");
    let gt = if gt_path.exists() {
        read_index(&gt_path, 7)?
    } else {
        Vec::new()
    };

    let mut pairs = Vec::new();
    for row in &rgb {
        if let Some(j) = nearest(&depth, row.time, opts.max_assoc_dt) {
            pairs.push((row, &depth[j]));
        }
    }
    let step = opts.step.max(1);
    let mut selected: Vec<_> = pairs.into_iter().step_by(step).collect();
    if opts.max_frames > 0 {
        selected.truncate(opts.max_frames);
    }

    let mut intrinsics = read_intrinsics(dir)?;
    let mut frames = Vec::with_capacity(selected.len());
    for (id, (crow, drow)) in selected.into_iter().enumerate() {
        let color = read_color(&dir.join(&crow.fields[0]))?;
        let depth_path = dir.join(&drow.fields[0]);
        let depth = read_depth(&depth_path, intrinsics.depth_scale)?;
        if !color.same_size(&depth) {
            return Err(Error::Frame {
                path: depth_path,
                reason: format!(
                    "depth is {}x{}, color is {}x{}",
                    depth.width(),
                    depth.height(),
                    color.width(),
                    color.height()
                ),
            });
        }
        let mask_path = dir.join("masks").join(format!("{}.png", crow.stamp));
        let mask = if mask_path.exists() {
            let m = read_mask(&mask_path)?;
            if !m.same_size(&color) {
                return Err(Error::Frame {
                    path: mask_path,
                    reason: "mask size differs from color".into(),
                });
            }
            m
        } else {
            Mask::new(color.width(), color.height(), false)
        };
        let pose = nearest(&gt, crow.time, opts.max_assoc_dt).map(|j| {
            let f: Vec<f64> = gt[j].fields.iter().map(|s| s.parse().unwrap_or(f64::NAN)).collect();
            Pose::from_tum([f[0], f[1], f[2]], [f[3], f[4], f[5], f[6]])
        });
        let pose = pose.filter(|p| p.translation.iter().all(|v| v.is_finite()));
        let frame = Frame {
            id,
            timestamp: crow.time,
            stamp: crow.stamp.clone(),
            color,
            depth,
            mask,
            pose,
            files: Some(FrameFiles {
                color: dir.join(&crow.fields[0]),
                depth: depth_path,
            }),
        };
        frame.check().map_err(|e| Error::Frame {
            path: dir.join(&crow.fields[0]),
            reason: e.to_string(),
        })?;
        frames.push(frame);
    }
    if let Some(f) = frames.first() {
        intrinsics.width = f.width();
        intrinsics.height = f.height();
        if !dir.join("intrinsics.txt").exists() && (f.width(), f.height()) != (640, 480) {
            // scale the default calibration to the image size
            let sx = f.width() as f64 / 640.0;
            let sy = f.height() as f64 / 480.0;
            intrinsics.fx *= sx;
            intrinsics.cx *= sx;
            intrinsics.fy *= sy;
            intrinsics.cy *= sy;
        }
    }
    intrinsics.validate()?;
    Ok(Sequence { frames, intrinsics })
}

fn read_intrinsics(dir: &Path) -> Result<CameraIntrinsics> {
    let mut intr = CameraIntrinsics::tum_freiburg3();
    let path = dir.join("intrinsics.txt");
    if !path.exists() {
        return Ok(intr);
    }
    let text = fs::read_to_string(&path)?;
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("{}: expected key = value, got {line:?}", path.display())))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Input(format!("{}: bad number in {line:?}", path.display())))?;
        match key.trim() {
            "fx" => intr.fx = value,
            "fy" => intr.fy = value,
            "cx" => intr.cx = value,
            "cy" => intr.cy = value,
            "width" => intr.width = value as usize,
            "height" => intr.height = value as usize,
            "depth_scale" => intr.depth_scale = value,
            other => return Err(Error::Input(format!("{}: unknown key {other:?}", path.display()))),
        }
    }
    Ok(intr)
}

fn frame_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Frame {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn read_color(path: &Path) -> Result<Rgb8Image> {
    let img = image::open(path).map_err(|e| frame_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0).collect();
    Ok(Grid::from_vec(w as usize, h as usize, data))
}

/// 16-bit depth PNG to meters.
pub fn read_depth(path: &Path, depth_scale: f64) -> Result<DepthMap> {
    let img = image::open(path).map_err(|e| frame_err(path, e))?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| (p.0[0] as f64 / depth_scale) as f32).collect();
    Ok(Grid::from_vec(w as usize, h as usize, data))
}

/// 8-bit mask; any nonzero pixel is masked.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| frame_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] != 0).collect();
    Ok(Grid::from_vec(w as usize, h as usize, data))
}

pub fn write_color(path: &Path, img: &Rgb8Image) -> Result<()> {
    let buf: ImageBuffer<image::Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.iter().flat_map(|p| p.iter().copied()).collect(),
    )
    .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| frame_err(path, e))
}

/// Meters to 16-bit depth PNG units (rounded, saturating).
pub fn depth_to_units(d: f32, depth_scale: f64) -> u16 {
    (d as f64 * depth_scale).round().clamp(0.0, u16::MAX as f64) as u16
}

pub fn write_depth(path: &Path, depth: &DepthMap, depth_scale: f64) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        depth.width() as u32,
        depth.height() as u32,
        depth.iter().map(|d| depth_to_units(*d, depth_scale)).collect(),
    )
    .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| frame_err(path, e))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.iter().map(|m| if *m { 255 } else { 0 }).collect(),
    )
    .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| frame_err(path, e))
}

/// Writes a sequence in the layout [`load_sequence`] reads.
pub fn save_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    fs::create_dir_all(dir.join("rgb"))?;
    fs::create_dir_all(dir.join("depth"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut rgb = String::from("# timestamp filename\n");
    let mut depth = String::from("# timestamp filename\n");
    let mut gt = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for f in &seq.frames {
        let cname = format!("rgb/{}.png", f.stamp);
        let dname = format!("depth/{}.png", f.stamp);
        write_color(&dir.join(&cname), &f.color)?;
        write_depth(&dir.join(&dname), &f.depth, seq.intrinsics.depth_scale)?;
        if f.mask.any() {
            write_mask(&dir.join("masks").join(format!("{}.png", f.stamp)), &f.mask)?;
        }
        rgb.push_str(&format!("{} {cname}\n", f.stamp));
        depth.push_str(&format!("{} {dname}\n", f.stamp));
        if let Some(p) = &f.pose {
            let q = p.rotation.quaternion();
            gt.push_str(&format!(
                "{} {:.9} {:.9} {:.9} {:.12} {:.12} {:.12} {:.12}\n",
                f.stamp, p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w
            ));
        }
    }
    fs::write(dir.join("rgb.txt"), rgb)?;
    fs::write(dir.join("depth.txt"), depth)?;
    fs::write(dir.join("groundtruth.txt"), gt)?;
    let i = &seq.intrinsics;
    fs::write(
        dir.join("intrinsics.txt"),
        format!(
            "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\ndepth_scale = {}\n",
            i.fx, i.fy, i.cx, i.cy, i.width, i.height, i.depth_scale
        ),
    )?;
    Ok(())
}

/// Back-projects every pixel with positive depth.
pub fn unproject(depth: &DepthMap, intr: &CameraIntrinsics) -> Vec<PixelPoint> {
    depth
        .enumerate()
        .filter(|(_, _, d)| **d > 0.0)
        .map(|(u, v, d)| PixelPoint {
            u,
            v,
            point: intr.unproject_pixel(u as f64, v as f64, *d as f64),
        })
        .collect()
}

pub fn project(points: &[Point3<f64>], intr: &CameraIntrinsics) -> Vec<Projection> {
    points.iter().map(|p| intr.project_point(p)).collect()
}

/// ASCII PLY with one colored vertex per valid-depth pixel, in camera
/// coordinates.
pub fn export_ply(frame: &Frame, intr: &CameraIntrinsics, out: &Path) -> Result<PathBuf> {
    let points = unproject(&frame.depth, intr);
    let file = fs::File::create(out).map_err(|e| frame_err(out, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    for prop in ["x", "y", "z"] {
        writeln!(w, "property float {prop}")?;
    }
    for prop in ["red", "green", "blue"] {
        writeln!(w, "property uchar {prop}")?;
    }
    writeln!(w, "end_header")?;
    for p in &points {
        let c = frame.color.get(p.u, p.v);
        writeln!(w, "{} {} {} {} {} {}", p.point.x, p.point.y, p.point.z, c[0], c[1], c[2])?;
    }
    w.flush()?;
    Ok(out.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn principal_point_unprojects_on_axis() {
        let mut d = DepthMap::new(640, 480, 0.0);
        d.set(320, 240, 2.0);
        let pts = unproject(&d, &intr());
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].point, Point3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn zero_depth_yields_no_points() {
        assert!(unproject(&DepthMap::new(8, 8, 0.0), &intr()).is_empty());
    }

    #[test]
    fn one_focal_length_off_axis() {
        let i = intr();
        let p = i.unproject_pixel(i.cx + i.fx, i.cy, 1.0);
        assert_eq!(p, Point3::new(1.0, 0.0, 1.0));
        let pr = i.project_point(&p);
        assert_eq!(pr.u, 420.0);
        assert!(!pr.out_of_bounds && !pr.behind_camera);
    }

    #[test]
    fn behind_camera_is_flagged() {
        let pr = intr().project_point(&Point3::new(0.0, 0.0, -1.0));
        assert!(pr.behind_camera);
    }

    #[test]
    fn out_of_bounds_is_flagged() {
        let pr = intr().project_point(&Point3::new(10.0, 0.0, 1.0));
        assert!(pr.out_of_bounds && !pr.behind_camera);
    }

    #[test]
    fn project_unproject_roundtrip() {
        let i = intr();
        let d = Grid::from_fn(640, 480, |x, y| if (x + y) % 7 == 0 { 0.0 } else { 0.5 + ((x * 13 + y * 7) % 50) as f32 * 0.1 });
        for pp in unproject(&d, &i) {
            let pr = i.project_point(&pp.point);
            assert!((pr.u - pp.u as f64).abs() < 1e-6 && (pr.v - pp.v as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn nearest_association() {
        let rows: Vec<IndexRow> = [0.5, 1.0, 2.0]
            .iter()
            .map(|t| IndexRow {
                stamp: t.to_string(),
                time: *t,
                fields: vec![],
            })
            .collect();
        assert_eq!(nearest(&rows, 0.0, 0.1), None);
        assert_eq!(nearest(&rows, 1.0, 0.1), Some(1));
        assert_eq!(nearest(&rows, 1.95, 0.1), Some(2));
        assert_eq!(nearest(&rows, 0.75, 1.0), Some(0));
    }
}
