//! Edge-guided depth hole filling.
//!
//! Every pixel is put in the edge or smooth class by thresholding the Sobel
//! magnitude of the (already completed) color image. Hole pixels are then
//! filled by a Jacobi iteration of the 8-neighbour discrete Laplace update
//! in which only available neighbours of the same class take part, and only
//! once the neighbourhood is credible:
//!
//! * smooth: at least 4 available smooth neighbours;
//! * edge: the available edge neighbours match [`edge_pattern_table`].
//!
//! Edge pixels that stay unfilled for `stale_limit` iterations while some
//! neighbour is available are treated as mislabeled and become smooth.

use serde::{Deserialize, Serialize};

use crate::grid::{gradient_magnitude, ColorImage, DepthMap, Grid, Mask, RING8};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelClass {
    Smooth,
    Edge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelState {
    Known,
    Hole,
    Filled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelClassMap {
    pub class: Grid<PixelClass>,
    pub state: Grid<PixelState>,
    /// Iterations an edge hole pixel has waited while reachable.
    pub stale: Grid<u32>,
}

impl PixelClassMap {
    #[inline]
    fn available(&self, depth: &DepthMap, x: usize, y: usize) -> bool {
        match self.state.get(x, y) {
            PixelState::Known => *depth.get(x, y) > 0.0,
            PixelState::Filled => true,
            PixelState::Hole => false,
        }
    }

    /// 8-bit availability pattern of neighbours of class `class`, bit `i`
    /// for `RING8[i]`.
    pub fn pattern(&self, depth: &DepthMap, x: usize, y: usize, class: PixelClass) -> u8 {
        let mut bits = 0u8;
        for (i, (dx, dy)) in RING8.iter().enumerate() {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            if !self.class.in_bounds(nx, ny) {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if *self.class.get(nx, ny) == class && self.available(depth, nx, ny) {
                bits |= 1 << i;
            }
        }
        bits
    }

    pub fn holes(&self) -> usize {
        self.state.iter().filter(|s| **s == PixelState::Hole).count()
    }
}

/// Pixels whose luminance Sobel magnitude exceeds `threshold`.
pub fn color_edges(color: &ColorImage, threshold: f32) -> Mask {
    gradient_magnitude(&color.to_gray()).map(|m| *m > threshold)
}

/// `holes` become hole pixels of their edge class; everything else is known.
pub fn classify(holes: &Mask, edges: &Mask) -> PixelClassMap {
    PixelClassMap {
        class: edges.map(|e| if *e { PixelClass::Edge } else { PixelClass::Smooth }),
        state: holes.map(|h| if *h { PixelState::Hole } else { PixelState::Known }),
        stale: Grid::new(holes.width(), holes.height(), 0),
    }
}

/// Admissible edge-neighbour patterns: two available edge neighbours that
/// either lie (nearly) opposite through the centre, i.e. at ring distance 3
/// or 4, or sit side by side, i.e. at ring distance 1 (a band running past
/// the pixel on one side). Ring distance is invariant under the eight
/// symmetries of the square, so the table is closed under them.
pub fn edge_pattern_table() -> [bool; 256] {
    let mut table = [false; 256];
    for (bits, slot) in table.iter_mut().enumerate() {
        let set: Vec<usize> = (0..8).filter(|i| bits & (1 << i) != 0).collect();
        *slot = set.iter().any(|a| {
            set.iter().any(|b| {
                let d = a.abs_diff(*b);
                let ring = d.min(8 - d);
                ring == 1 || ring >= 3
            })
        });
    }
    table
}

/// Whether hole pixel `(x, y)` may be updated.
pub fn credible(x: usize, y: usize, map: &PixelClassMap, depth: &DepthMap, table: &[bool; 256]) -> bool {
    match map.class.get(x, y) {
        PixelClass::Smooth => map.pattern(depth, x, y, PixelClass::Smooth).count_ones() >= 4,
        PixelClass::Edge => table[map.pattern(depth, x, y, PixelClass::Edge) as usize],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagateParams {
    pub max_iters: usize,
    pub stale_limit: u32,
    /// Convergence threshold in meters.
    pub tolerance: f64,
}

impl Default for PropagateParams {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            stale_limit: 5,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagateResult {
    pub depth: DepthMap,
    pub map: PixelClassMap,
    pub iterations: usize,
    /// Hole pixels never reached (left at 0).
    pub unfilled: usize,
    /// Edge pixels moved to the smooth class.
    pub reclassified: usize,
}

/// Class-restricted Laplace propagation into the hole pixels of `map`.
pub fn propagate(depth: &DepthMap, map: &PixelClassMap, params: &PropagateParams) -> PropagateResult {
    let table = edge_pattern_table();
    let mut depth = depth.clone();
    let mut map = map.clone();
    let hole_pixels: Vec<(usize, usize)> = map.state.enumerate().filter(|(_, _, s)| **s != PixelState::Known).map(|(x, y, _)| (x, y)).collect();
    for (x, y) in &hole_pixels {
        if *map.state.get(*x, *y) == PixelState::Hole {
            depth.set(*x, *y, 0.0);
        }
    }
    let mut iterations = 0;
    let mut reclassified = 0;
    if !hole_pixels.is_empty() {
        for _ in 0..params.max_iters {
            iterations += 1;
            // Jacobi step: everything reads the previous iterate.
            let updates = par::map_slice(&hole_pixels, |&(x, y)| {
                if !credible(x, y, &map, &depth, &table) {
                    return None;
                }
                let class = *map.class.get(x, y);
                let (mut sum, mut n) = (0.0f64, 0.0f64);
                for (dx, dy) in RING8 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if !depth.in_bounds(nx, ny) {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if *map.class.get(nx, ny) == class && map.available(&depth, nx, ny) {
                        sum += *depth.get(nx, ny) as f64;
                        n += 1.0;
                    }
                }
                Some((sum / n) as f32)
            });
            let mut max_change = 0.0f64;
            let mut newly = 0;
            let mut waiting = false;
            let mut next = depth.clone();
            for (&(x, y), u) in hole_pixels.iter().zip(&updates) {
                if let Some(v) = u {
                    if *map.state.get(x, y) == PixelState::Hole {
                        newly += 1;
                        map.state.set(x, y, PixelState::Filled);
                    } else {
                        max_change = max_change.max((*v as f64 - *depth.get(x, y) as f64).abs());
                    }
                    next.set(x, y, *v);
                }
            }
            depth = next;
            // Stale edge pixels.
            for (idx, &(x, y)) in hole_pixels.iter().enumerate() {
                if updates[idx].is_some() || *map.state.get(x, y) != PixelState::Hole || *map.class.get(x, y) != PixelClass::Edge {
                    continue;
                }
                let reachable = RING8.iter().any(|(dx, dy)| {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    depth.in_bounds(nx, ny) && map.available(&depth, nx as usize, ny as usize)
                });
                if reachable {
                    let s = map.stale.get_mut(x, y);
                    *s += 1;
                    waiting = true;
                    if *s >= params.stale_limit {
                        map.class.set(x, y, PixelClass::Smooth);
                        reclassified += 1;
                        newly += 1;
                    }
                }
            }
            if newly == 0 && !waiting && max_change <= params.tolerance {
                break;
            }
        }
    }
    let unfilled = map.holes();
    PropagateResult {
        depth,
        map,
        iterations,
        unfilled,
        reclassified,
    }
}

/// Gives every remaining hole pixel the mean of its available 8-neighbours,
/// sweeping outward until nothing changes. Returns the number filled.
pub fn fallback_fill(depth: &mut DepthMap, holes: &Mask) -> usize {
    let (w, h) = (depth.width(), depth.height());
    let mut open = holes.clone();
    let mut filled = 0;
    loop {
        let mut updates = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !*open.get(x, y) {
                    continue;
                }
                let (mut sum, mut n) = (0.0f64, 0.0f64);
                for (dx, dy) in RING8 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if !depth.in_bounds(nx, ny) {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    let d = *depth.get(nx, ny);
                    if !*open.get(nx, ny) && d > 0.0 {
                        sum += d as f64;
                        n += 1.0;
                    }
                }
                if n > 0.0 {
                    updates.push((x, y, (sum / n) as f32));
                }
            }
        }
        if updates.is_empty() {
            break;
        }
        for (x, y, v) in updates {
            depth.set(x, y, v);
            open.set(x, y, false);
            filled += 1;
        }
    }
    filled
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_hole(w: usize, h: usize, x0: usize, x1: usize) -> Mask {
        Grid::from_fn(w, h, |x, y| (x0..x1).contains(&x) && (x0..x1).contains(&y))
    }

    #[test]
    fn no_edges_means_all_smooth() {
        let holes = square_hole(10, 10, 3, 6);
        let map = classify(&holes, &Mask::new(10, 10, false));
        assert!(map.class.iter().all(|c| *c == PixelClass::Smooth));
        assert_eq!(map.holes(), 9);
    }

    #[test]
    fn smooth_threshold_is_four() {
        let depth = DepthMap::new(5, 5, 1.0);
        let mut holes = Mask::new(5, 5, false);
        // Centre (2,2) with 5 known neighbours, then with 3.
        for (x, y) in [(2, 2), (3, 3), (2, 3), (1, 3)] {
            holes.set(x, y, true);
        }
        let map = classify(&holes, &Mask::new(5, 5, false));
        assert!(credible(2, 2, &map, &depth, &edge_pattern_table()));
        for (x, y) in [(1, 1), (3, 2)] {
            holes.set(x, y, true);
        }
        let map = classify(&holes, &Mask::new(5, 5, false));
        assert!(!credible(2, 2, &map, &depth, &edge_pattern_table()));
    }

    #[test]
    fn table_is_closed_under_symmetries() {
        let t = edge_pattern_table();
        let rot = |b: u8| b.rotate_left(2);
        let flip = |b: u8| (0..8).fold(0u8, |acc, i| if b & (1 << i) != 0 { acc | 1 << ((8 - i) % 8) } else { acc });
        for b in 0..=255u8 {
            assert_eq!(t[b as usize], t[rot(b) as usize]);
            assert_eq!(t[b as usize], t[flip(b) as usize]);
        }
        // E and W: straight through the centre.
        assert!(t[0b0001_0001]);
        // A single neighbour is never enough.
        assert!((0..8).all(|i| !t[1 << i]));
        // E and N form a corner, not a line.
        assert!(!t[0b0000_0101]);
    }

    #[test]
    fn constant_surround_fills_constant() {
        let depth = DepthMap::new(20, 20, 1.75);
        let holes = square_hole(20, 20, 5, 15);
        let r = propagate(&depth, &classify(&holes, &Mask::new(20, 20, false)), &PropagateParams::default());
        assert_eq!(r.unfilled, 0);
        assert!(r.depth.iter().all(|d| (*d - 1.75).abs() < 1e-6));
    }

    #[test]
    fn empty_hole_is_identity() {
        let depth = Grid::from_fn(6, 6, |x, _| x as f32);
        let r = propagate(&depth, &classify(&Mask::new(6, 6, false), &Mask::new(6, 6, false)), &PropagateParams::default());
        assert_eq!(r.depth, depth);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn stranded_edge_pixels_become_smooth() {
        let depth = DepthMap::new(9, 9, 2.0);
        let holes = square_hole(9, 9, 3, 6);
        // Isolated edge pixel in the middle of the hole.
        let edges = Grid::from_fn(9, 9, |x, y| x == 4 && y == 4);
        let r = propagate(&depth, &classify(&holes, &edges), &PropagateParams::default());
        assert_eq!(r.unfilled, 0);
        assert_eq!(r.reclassified, 1);
        assert!((r.depth.get(4, 4) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn fallback_reaches_every_connected_pixel() {
        let mut depth = DepthMap::new(8, 8, 3.0);
        let holes = square_hole(8, 8, 0, 5);
        for (x, y, h) in holes.enumerate() {
            if *h {
                depth.set(x, y, 0.0);
            }
        }
        assert_eq!(fallback_fill(&mut depth, &holes), 25);
        assert!(depth.iter().all(|d| (*d - 3.0).abs() < 1e-6));
    }
}
