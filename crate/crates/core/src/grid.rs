//! Dense row-major rasters and the small set of image operators the
//! pipeline needs (Sobel, Gaussian blur, bilinear sampling, dilation).

use serde::{Deserialize, Serialize};

use crate::par;

/// Row-major 2D raster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type Rgb = [f32; 3];
/// Color image with channels in `[0, 1]`.
pub type ColorImage = Grid<Rgb>;
/// 8-bit color as stored on disk.
pub type Rgb8Image = Grid<[u8; 3]>;
pub type GrayImage = Grid<f32>;
/// Depth in meters, `0` = unknown.
pub type DepthMap = Grid<f32>;
pub type Mask = Grid<bool>;

/// Inclusive pixel rectangle `(x0, y0)..=(x1, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        debug_assert!(x0 <= x1 && y0 <= y1);
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Grows by `margin` on every side, clipped to a `width × height` image.
    pub fn expand(&self, margin: usize, width: usize, height: usize) -> Rect {
        Rect {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width - 1),
            y1: (self.y1 + margin).min(height - 1),
        }
    }
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn crop(&self, rect: &Rect) -> Self {
        let mut data = Vec::with_capacity(rect.area());
        for y in rect.y0..=rect.y1 {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + rect.x0..=row + rect.x1]);
        }
        Self {
            width: rect.width(),
            height: rect.height(),
            data,
        }
    }

    /// Writes `patch` at offset `(x0, y0)`, only where `keep` says so.
    pub fn paste_where(&mut self, patch: &Grid<T>, x0: usize, y0: usize, keep: impl Fn(usize, usize) -> bool) {
        for y in 0..patch.height {
            for x in 0..patch.width {
                if keep(x, y) {
                    self.set(x0 + x, y0 + y, patch.get(x, y).clone());
                }
            }
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "raster size mismatch");
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_size<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn in_bounds(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Value at `(x, y)` with coordinates clamped to the border.
    #[inline]
    pub fn clamped(&self, x: isize, y: isize) -> &T {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.get(cx, cy)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.data.iter()
    }

    /// `(x, y, value)` triples in row-major order.
    pub fn enumerate(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.width;
        self.data.iter().enumerate().map(move |(i, v)| (i % w, i / w, v))
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|v| *v)
    }

    /// Square-structuring-element dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        // separable max filter
        let horiz = Grid::from_fn(self.width, self.height, |x, y| {
            (-r..=r).any(|dx| {
                let xx = x as isize + dx;
                xx >= 0 && (xx as usize) < self.width && *self.get(xx as usize, y)
            })
        });
        Grid::from_fn(self.width, self.height, |x, y| {
            (-r..=r).any(|dy| {
                let yy = y as isize + dy;
                yy >= 0 && (yy as usize) < self.height && *horiz.get(x, yy as usize)
            })
        })
    }

    /// Tight bounding rectangle of the set pixels.
    pub fn bounding_rect(&self) -> Option<Rect> {
        let mut rect: Option<Rect> = None;
        for (x, y, v) in self.enumerate() {
            if !*v {
                continue;
            }
            rect = Some(match rect {
                None => Rect::new(x, y, x, y),
                Some(r) => Rect::new(r.x0.min(x), r.y0.min(y), r.x1.max(x), r.y1.max(y)),
            });
        }
        rect
    }
}

pub fn luminance(c: &Rgb) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

impl ColorImage {
    pub fn to_gray(&self) -> GrayImage {
        self.map(luminance)
    }

    pub fn to_rgb8(&self) -> Rgb8Image {
        self.map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    }

    /// Bilinear sample at a continuous location, clamping at the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Rgb {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let a = self.clamped(xi, yi);
        let b = self.clamped(xi + 1, yi);
        let c = self.clamped(xi, yi + 1);
        let d = self.clamped(xi + 1, yi + 1);
        let mut out = [0.0f32; 3];
        for k in 0..3 {
            let top = a[k] * (1.0 - fx) + b[k] * fx;
            let bot = c[k] * (1.0 - fx) + d[k] * fx;
            out[k] = top * (1.0 - fy) + bot * fy;
        }
        out
    }
}

impl Rgb8Image {
    pub fn to_color(&self) -> ColorImage {
        self.map(|c| c.map(|v| v as f32 / 255.0))
    }
}

impl GrayImage {
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let top = self.clamped(xi, yi) * (1.0 - fx) + self.clamped(xi + 1, yi) * fx;
        let bot = self.clamped(xi, yi + 1) * (1.0 - fx) + self.clamped(xi + 1, yi + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Separable Gaussian blur with border replication.
    pub fn gaussian_blur(&self, sigma: f32) -> GrayImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= norm);

        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0f32; w * h];
        par::for_each_row_mut(&mut tmp, w, |y, row| {
            for (x, out) in row.iter_mut().enumerate() {
                *out = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * self.clamped(x as isize + k as isize - radius, y as isize))
                    .sum();
            }
        });
        let tmp = Grid::from_vec(w, h, tmp);
        let mut out = vec![0.0f32; w * h];
        par::for_each_row_mut(&mut out, w, |y, row| {
            for (x, o) in row.iter_mut().enumerate() {
                *o = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp.clamped(x as isize, y as isize + k as isize - radius))
                    .sum();
            }
        });
        Grid::from_vec(w, h, out)
    }

    /// 2× decimation by picking every other pixel.
    pub fn downsample(&self) -> GrayImage {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        Grid::from_fn(w, h, |x, y| *self.get((2 * x).min(self.width - 1), (2 * y).min(self.height - 1)))
    }
}

/// Sobel response `(gx, gy)` of a scalar field at `(x, y)` with border
/// replication. Unnormalized 3×3 kernels (a unit step yields 4).
#[inline]
pub fn sobel_at<F: Fn(isize, isize) -> f32>(f: F, x: isize, y: isize) -> (f32, f32) {
    let gx = (f(x + 1, y - 1) + 2.0 * f(x + 1, y) + f(x + 1, y + 1))
        - (f(x - 1, y - 1) + 2.0 * f(x - 1, y) + f(x - 1, y + 1));
    let gy = (f(x - 1, y + 1) + 2.0 * f(x, y + 1) + f(x + 1, y + 1))
        - (f(x - 1, y - 1) + 2.0 * f(x, y - 1) + f(x + 1, y - 1));
    (gx, gy)
}

/// Sobel gradient of a gray image.
pub fn sobel_gray(img: &GrayImage) -> Grid<(f32, f32)> {
    Grid::from_fn(img.width, img.height, |x, y| {
        sobel_at(|xx, yy| *img.clamped(xx, yy), x as isize, y as isize)
    })
}

/// Per-channel Sobel gradients of a color image, as `[gx_r, gy_r, gx_g, ...]`.
pub fn sobel_color(img: &ColorImage) -> Grid<[f32; 6]> {
    let (w, h) = (img.width, img.height);
    let rows = par::map_range(h, |y| {
        (0..w)
            .map(|x| color_gradient_at(img, x as isize, y as isize))
            .collect::<Vec<_>>()
    });
    Grid::from_vec(w, h, rows.into_iter().flatten().collect())
}

#[inline]
pub fn color_gradient_at(img: &ColorImage, x: isize, y: isize) -> [f32; 6] {
    let mut g = [0.0f32; 6];
    for k in 0..3 {
        let (gx, gy) = sobel_at(|xx, yy| img.clamped(xx, yy)[k], x, y);
        g[2 * k] = gx;
        g[2 * k + 1] = gy;
    }
    g
}

pub fn gradient_magnitude(img: &GrayImage) -> GrayImage {
    sobel_gray(img).map(|(gx, gy)| (gx * gx + gy * gy).sqrt())
}

#[inline]
pub fn rgb_dist(a: &Rgb, b: &Rgb) -> f64 {
    let d0 = (a[0] - b[0]) as f64;
    let d1 = (a[1] - b[1]) as f64;
    let d2 = (a[2] - b[2]) as f64;
    (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
}

#[inline]
pub fn grad_dist(a: &[f32; 6], b: &[f32; 6]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// 8-neighbour offsets in ring order starting east, counter-clockwise in
/// image coordinates (y grows downward).
pub const RING8: [(isize, isize); 8] = [(1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1)];

pub const NEIGHBORS4: [(isize, isize); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sobel_of_unit_step_is_four() {
        let img = Grid::from_fn(6, 5, |x, _| if x >= 3 { 1.0f32 } else { 0.0 });
        let g = sobel_gray(&img);
        assert_eq!(g.get(2, 2).0, 4.0);
        assert_eq!(g.get(3, 2).0, 4.0);
        assert_eq!(g.get(1, 2).0, 0.0);
        assert_eq!(g.get(2, 2).1, 0.0);
    }

    #[test]
    fn dilation_grows_square() {
        let mut m = Mask::new(9, 9, false);
        m.set(4, 4, true);
        let d = m.dilate(2);
        assert_eq!(d.count(), 25);
        assert_eq!(d.bounding_rect(), Some(Rect::new(2, 2, 6, 6)));
    }

    #[test]
    fn blur_preserves_constant() {
        let img = GrayImage::new(10, 7, 0.25);
        let b = img.gaussian_blur(1.5);
        assert!(b.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn bilinear_hits_pixel_centers() {
        let img = Grid::from_fn(4, 4, |x, y| [x as f32, y as f32, 0.0]);
        assert_eq!(img.sample_bilinear(2.0, 1.0), [2.0, 1.0, 0.0]);
        assert_eq!(img.sample_bilinear(1.5, 2.5), [1.5, 2.5, 0.0]);
    }

    #[test]
    fn crop_and_expand() {
        let img = Grid::from_fn(10, 8, |x, y| x + 10 * y);
        let r = Rect::new(2, 3, 4, 5);
        let c = img.crop(&r);
        assert_eq!((c.width(), c.height()), (3, 3));
        assert_eq!(*c.get(0, 0), 32);
        assert_eq!(r.expand(5, 10, 8), Rect::new(0, 0, 9, 7));
    }
}
