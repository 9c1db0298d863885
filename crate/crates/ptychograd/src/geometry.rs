//! Scan-pattern construction, mesh decomposition of the volume into
//! halo-extended tiles, probe-to-tile assignment, and overlap arithmetic.
//!
//! All geometry is integer arithmetic on half-open voxel rectangles, so there
//! are no floating-point region bugs to chase. Everything here is a pure value
//! type and safe to share read-only across workers.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("probe {index} circle (center ({cy},{cx}), radius {radius}) exits the {h}x{w} volume")]
    OutOfBounds {
        index: usize,
        cy: i64,
        cx: i64,
        radius: i64,
        h: i64,
        w: i64,
    },
    #[error("halo {halo} leaves probe {probe} circle uncovered on tile ({mesh_r},{mesh_c})")]
    HaloTooSmall {
        halo: i64,
        probe: usize,
        mesh_r: usize,
        mesh_c: usize,
    },
    #[error("halo {halo} must be smaller than the smallest interior side {min_side}")]
    HaloTooWide { halo: i64, min_side: i64 },
    #[error("{rows}x{cols} mesh does not fit a {h}x{w} volume")]
    MeshTooFine {
        rows: usize,
        cols: usize,
        h: i64,
        w: i64,
    },
}

/// Half-open voxel rectangle: rows `y0..y1`, columns `x0..x1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub y0: i64,
    pub x0: i64,
    pub y1: i64,
    pub x1: i64,
}

impl Rect {
    pub const EMPTY: Rect = Rect {
        y0: 0,
        x0: 0,
        y1: 0,
        x1: 0,
    };

    pub fn new(y0: i64, x0: i64, y1: i64, x1: i64) -> Rect {
        debug_assert!(y0 <= y1 && x0 <= x1);
        Rect { y0, x0, y1, x1 }
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn area(&self) -> i64 {
        self.height() * self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Intersection; any empty result collapses to the canonical empty rect.
    pub fn intersect(&self, other: &Rect) -> Rect {
        let y0 = self.y0.max(other.y0);
        let x0 = self.x0.max(other.x0);
        let y1 = self.y1.min(other.y1);
        let x1 = self.x1.min(other.x1);
        if y0 >= y1 || x0 >= x1 {
            Rect::EMPTY
        } else {
            Rect { y0, x0, y1, x1 }
        }
    }

    pub fn contains_point(&self, y: i64, x: i64) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    /// Empty rects are contained everywhere.
    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.is_empty()
            || (other.y0 >= self.y0 && other.y1 <= self.y1 && other.x0 >= self.x0 && other.x1 <= self.x1)
    }

    pub fn dilate(&self, margin: i64) -> Rect {
        Rect {
            y0: self.y0 - margin,
            x0: self.x0 - margin,
            y1: self.y1 + margin,
            x1: self.x1 + margin,
        }
    }

    pub fn clip(&self, extent: (i64, i64)) -> Rect {
        let r = Rect {
            y0: self.y0.max(0),
            x0: self.x0.max(0),
            y1: self.y1.min(extent.0),
            x1: self.x1.min(extent.1),
        };
        if r.y0 >= r.y1 || r.x0 >= r.x1 {
            Rect::EMPTY
        } else {
            r
        }
    }

    pub fn origin(&self) -> (i64, i64) {
        (self.y0, self.x0)
    }

    /// Smallest rect containing both; an empty rect is the identity.
    pub fn bounding_union(&self, other: &Rect) -> Rect {
        if self.is_empty() {
            return *other;
        }
        if other.is_empty() {
            return *self;
        }
        Rect {
            y0: self.y0.min(other.y0),
            x0: self.x0.min(other.x0),
            y1: self.y1.max(other.y1),
            x1: self.x1.max(other.x1),
        }
    }
}

/// One probe position with its raster acquisition index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeLocation {
    pub index: usize,
    pub center_y: i64,
    pub center_x: i64,
}

/// Raster-ordered probe positions on a uniform grid.
#[derive(Debug, Clone)]
pub struct ScanPattern {
    pub locations: Vec<ProbeLocation>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub step_y: i64,
    pub step_x: i64,
    pub radius: i64,
}

impl ScanPattern {
    /// Scan-grid coordinates of a probe index.
    pub fn grid_coords(&self, index: usize) -> (usize, usize) {
        (index / self.grid_cols, index % self.grid_cols)
    }

    /// Fractional overlap of adjacent circles along y: (2r - step) / 2r.
    pub fn overlap_ratio_y(&self) -> f64 {
        overlap_ratio(self.radius, self.step_y)
    }

    pub fn overlap_ratio_x(&self) -> f64 {
        overlap_ratio(self.radius, self.step_x)
    }
}

pub fn overlap_ratio(radius: i64, step: i64) -> f64 {
    (2 * radius - step) as f64 / (2 * radius) as f64
}

/// Bounding rect of the voxels satisfying (y-cy)^2 + (x-cx)^2 <= r^2.
pub fn circle_support_rect(loc: &ProbeLocation, radius: i64) -> Rect {
    Rect {
        y0: loc.center_y - radius,
        x0: loc.center_x - radius,
        y1: loc.center_y + radius + 1,
        x1: loc.center_x + radius + 1,
    }
}

/// N x N detector window centered (integer crop) on a probe.
pub fn window_rect(loc: &ProbeLocation, n: usize) -> Rect {
    let half = (n / 2) as i64;
    Rect {
        y0: loc.center_y - half,
        x0: loc.center_x - half,
        y1: loc.center_y - half + n as i64,
        x1: loc.center_x - half + n as i64,
    }
}

/// Worker mesh dimensions; K = rows * cols workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeshSpec {
    pub rows: usize,
    pub cols: usize,
}

impl MeshSpec {
    pub fn new(rows: usize, cols: usize) -> MeshSpec {
        assert!(rows >= 1 && cols >= 1);
        MeshSpec { rows, cols }
    }

    pub fn worker_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn index(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    /// Direct neighbors including diagonals, ascending mesh index.
    pub fn neighbors8(&self, r: usize, c: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let nr = r as i64 + dr;
                let nc = c as i64 + dc;
                if nr >= 0 && nr < self.rows as i64 && nc >= 0 && nc < self.cols as i64 {
                    out.push((nr as usize, nc as usize));
                }
            }
        }
        out
    }
}

/// A worker's owned interior rectangle plus its halo-extended rectangle,
/// with the probes assigned by center containment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileSpec {
    pub mesh_r: usize,
    pub mesh_c: usize,
    pub interior: Rect,
    pub extended: Rect,
    pub halo_width: i64,
    pub probe_indices: Vec<usize>,
}

/// Build a raster-ordered scan. Every circle support must fit inside the
/// volume's lateral extent.
pub fn build_raster_scan(
    grid_rows: usize,
    grid_cols: usize,
    step: i64,
    origin: (i64, i64),
    radius: i64,
    volume_extent: (i64, i64),
) -> Result<ScanPattern, GeometryError> {
    assert!(grid_rows >= 1 && grid_cols >= 1 && step >= 0 && radius >= 0);
    let (h, w) = volume_extent;
    let mut locations = Vec::with_capacity(grid_rows * grid_cols);
    for gy in 0..grid_rows {
        for gx in 0..grid_cols {
            let index = gy * grid_cols + gx;
            let loc = ProbeLocation {
                index,
                center_y: origin.0 + gy as i64 * step,
                center_x: origin.1 + gx as i64 * step,
            };
            let support = circle_support_rect(&loc, radius);
            if support.y0 < 0 || support.x0 < 0 || support.y1 > h || support.x1 > w {
                return Err(GeometryError::OutOfBounds {
                    index,
                    cy: loc.center_y,
                    cx: loc.center_x,
                    radius,
                    h,
                    w,
                });
            }
            locations.push(loc);
        }
    }
    Ok(ScanPattern {
        locations,
        grid_rows,
        grid_cols,
        step_y: step,
        step_x: step,
        radius,
    })
}

/// Decompose the lateral extent into an R x C grid of tiles. The last tile in
/// each row/column absorbs the division remainder so interiors always
/// partition the extent. Probes are assigned to the tile whose half-open
/// interior contains their center (integer centers make boundary ties
/// unrepresentable). Each tile's extended rect must cover the circle support
/// of every assigned probe.
pub fn decompose_mesh(
    volume_extent: (i64, i64),
    mesh: MeshSpec,
    halo_width: i64,
    scan: &ScanPattern,
) -> Result<Vec<TileSpec>, GeometryError> {
    let (h, w) = volume_extent;
    assert!(halo_width >= 0);
    if h < mesh.rows as i64 || w < mesh.cols as i64 {
        return Err(GeometryError::MeshTooFine {
            rows: mesh.rows,
            cols: mesh.cols,
            h,
            w,
        });
    }
    let base_h = h / mesh.rows as i64;
    let base_w = w / mesh.cols as i64;
    let min_side = base_h.min(base_w);
    if mesh.worker_count() > 1 && halo_width >= min_side {
        return Err(GeometryError::HaloTooWide {
            halo: halo_width,
            min_side,
        });
    }

    let mut tiles: Vec<TileSpec> = mesh_interiors(volume_extent, mesh)
        .into_iter()
        .enumerate()
        .map(|(i, interior)| {
            let extended = interior.dilate(halo_width).clip(volume_extent);
            TileSpec {
                mesh_r: i / mesh.cols,
                mesh_c: i % mesh.cols,
                interior,
                extended,
                halo_width,
                probe_indices: Vec::new(),
            }
        })
        .collect();

    for loc in &scan.locations {
        let (r, c) = assign_probe_tile(volume_extent, mesh, loc);
        let tile = &mut tiles[mesh.index(r, c)];
        debug_assert!(tile.interior.contains_point(loc.center_y, loc.center_x));
        tile.probe_indices.push(loc.index);
    }

    for tile in &tiles {
        for &p in &tile.probe_indices {
            let support = circle_support_rect(&scan.locations[p], scan.radius);
            if !tile.extended.contains_rect(&support) {
                return Err(GeometryError::HaloTooSmall {
                    halo: halo_width,
                    probe: p,
                    mesh_r: tile.mesh_r,
                    mesh_c: tile.mesh_c,
                });
            }
        }
    }
    Ok(tiles)
}

/// Interior rectangles of an R x C grid over the extent, row-major; the last
/// tile in each row/column absorbs the division remainder.
pub fn mesh_interiors(volume_extent: (i64, i64), mesh: MeshSpec) -> Vec<Rect> {
    let (h, w) = volume_extent;
    let base_h = h / mesh.rows as i64;
    let base_w = w / mesh.cols as i64;
    let mut out = Vec::with_capacity(mesh.worker_count());
    for r in 0..mesh.rows {
        for c in 0..mesh.cols {
            let y0 = r as i64 * base_h;
            let y1 = if r + 1 == mesh.rows { h } else { (r as i64 + 1) * base_h };
            let x0 = c as i64 * base_w;
            let x1 = if c + 1 == mesh.cols { w } else { (c as i64 + 1) * base_w };
            out.push(Rect::new(y0, x0, y1, x1));
        }
    }
    out
}

/// Mesh cell whose half-open interior contains a probe center.
pub fn assign_probe_tile(
    volume_extent: (i64, i64),
    mesh: MeshSpec,
    loc: &ProbeLocation,
) -> (usize, usize) {
    let base_h = volume_extent.0 / mesh.rows as i64;
    let base_w = volume_extent.1 / mesh.cols as i64;
    let r = ((loc.center_y / base_h) as usize).min(mesh.rows - 1);
    let c = ((loc.center_x / base_w) as usize).min(mesh.cols - 1);
    (r, c)
}

/// Intersection of two tiles' extended rects; empty for non-overlapping tiles.
pub fn overlap_region(a: &TileSpec, b: &TileSpec) -> Rect {
    a.extended.intersect(&b.extended)
}

/// Boolean disk mask over `region`: true exactly where
/// (y-cy)^2 + (x-cx)^2 <= radius^2.
pub fn circle_mask(loc: &ProbeLocation, radius: i64, region: &Rect) -> Array2<bool> {
    let mut mask = Array2::from_elem((region.height() as usize, region.width() as usize), false);
    let r2 = radius * radius;
    for (iy, mut row) in mask.rows_mut().into_iter().enumerate() {
        let y = region.y0 + iy as i64;
        let dy = y - loc.center_y;
        for (ix, m) in row.iter_mut().enumerate() {
            let x = region.x0 + ix as i64;
            let dx = x - loc.center_x;
            *m = dy * dy + dx * dx <= r2;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scan_3x3_step16() -> ScanPattern {
        build_raster_scan(3, 3, 16, (24, 24), 12, (96, 96)).unwrap()
    }

    #[test]
    fn single_probe_scan() {
        let scan = build_raster_scan(1, 1, 0, (32, 32), 12, (64, 64)).unwrap();
        assert_eq!(scan.locations.len(), 1);
        assert_eq!(scan.locations[0].index, 0);
        assert_eq!((scan.locations[0].center_y, scan.locations[0].center_x), (32, 32));
    }

    #[test]
    fn raster_order_and_overlap_ratio() {
        let scan = scan_3x3_step16();
        assert_eq!(scan.locations.len(), 9);
        let p4 = scan.locations[4];
        assert_eq!((p4.center_y, p4.center_x), (40, 40));
        assert!((scan.overlap_ratio_y() - 1.0 / 3.0).abs() < 1e-15);
        // raster order: x fastest
        assert_eq!(scan.locations[1].center_x, 40);
        assert_eq!(scan.locations[1].center_y, 24);
        for (i, loc) in scan.locations.iter().enumerate() {
            assert_eq!(loc.index, i);
        }
    }

    #[test]
    fn high_overlap_circles_intersect_indirect_neighbors() {
        let scan = build_raster_scan(3, 3, 6, (24, 24), 12, (96, 96)).unwrap();
        assert!((scan.overlap_ratio_y() - 0.75).abs() < 1e-15);
        // next-nearest column distance 12 < 2*radius
        assert_eq!(scan.locations[2].center_x - scan.locations[0].center_x, 12);
        // brute force: every one of the 36 pairs shares at least one lattice point
        let r = scan.radius;
        for i in 0..scan.locations.len() {
            for j in (i + 1)..scan.locations.len() {
                let a = scan.locations[i];
                let b = scan.locations[j];
                let mut shared = 0usize;
                for y in 0..96 {
                    for x in 0..96 {
                        let da = (y - a.center_y).pow(2) + (x - a.center_x).pow(2);
                        let db = (y - b.center_y).pow(2) + (x - b.center_x).pow(2);
                        if da <= r * r && db <= r * r {
                            shared += 1;
                        }
                    }
                }
                assert!(shared > 0, "pair ({i},{j}) should overlap");
            }
        }
    }

    #[test]
    fn scan_out_of_bounds() {
        // last row's circle support reaches y=69, one past a 68-row volume
        let err = build_raster_scan(3, 3, 16, (24, 24), 12, (68, 96)).unwrap_err();
        assert!(matches!(err, GeometryError::OutOfBounds { index: 6, .. }));
    }

    #[test]
    fn identity_decomposition() {
        let scan = scan_3x3_step16();
        let tiles = decompose_mesh((96, 96), MeshSpec::new(1, 1), 0, &scan).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].interior, Rect::new(0, 0, 96, 96));
        assert_eq!(tiles[0].extended, tiles[0].interior);
        assert_eq!(tiles[0].probe_indices.len(), 9);
    }

    #[test]
    fn mesh_3x3_halo8_rects() {
        let scan = scan_3x3_step16();
        let tiles = decompose_mesh((96, 96), MeshSpec::new(3, 3), 8, &scan).unwrap();
        let center = &tiles[4];
        assert_eq!(center.interior, Rect::new(32, 32, 64, 64));
        assert_eq!(center.extended, Rect::new(24, 24, 72, 72));
        let corner = &tiles[0];
        assert_eq!(corner.extended, Rect::new(0, 0, 40, 40));
    }

    #[test]
    fn halo_too_small_detected_by_coverage_check() {
        let scan = scan_3x3_step16();
        let err = decompose_mesh((96, 96), MeshSpec::new(3, 3), 4, &scan).unwrap_err();
        assert!(matches!(err, GeometryError::HaloTooSmall { .. }));
        // brute-force check over every (probe, tile) pair at halo 8: all covered
        let tiles = decompose_mesh((96, 96), MeshSpec::new(3, 3), 8, &scan).unwrap();
        for t in &tiles {
            for &p in &t.probe_indices {
                let sup = circle_support_rect(&scan.locations[p], scan.radius);
                assert!(t.extended.contains_rect(&sup));
            }
        }
    }

    #[test]
    fn halo_too_wide_rejected() {
        let scan = scan_3x3_step16();
        let err = decompose_mesh((96, 96), MeshSpec::new(3, 3), 32, &scan).unwrap_err();
        assert!(matches!(err, GeometryError::HaloTooWide { .. }));
    }

    #[test]
    fn overlap_regions() {
        let scan = scan_3x3_step16();
        let tiles = decompose_mesh((96, 96), MeshSpec::new(3, 3), 8, &scan).unwrap();
        let t00 = &tiles[0];
        let t10 = &tiles[3];
        let t20 = &tiles[6];
        assert_eq!(overlap_region(t00, t00), t00.extended);
        assert_eq!(overlap_region(t00, t10), Rect::new(24, 0, 40, 40));
        assert_eq!(overlap_region(t00, t10), overlap_region(t10, t00));
        assert!(overlap_region(t00, t20).is_empty());
    }

    #[test]
    fn circle_mask_cases() {
        let loc = ProbeLocation {
            index: 0,
            center_y: 40,
            center_x: 40,
        };
        let single = circle_mask(&loc, 0, &Rect::new(0, 0, 96, 96));
        assert_eq!(single.iter().filter(|&&m| m).count(), 1);
        assert!(single[[40, 40]]);

        let disk = circle_mask(&loc, 12, &Rect::new(0, 0, 96, 96));
        let mut brute = 0usize;
        for y in 0..96i64 {
            for x in 0..96i64 {
                if (y - 40).pow(2) + (x - 40).pow(2) <= 144 {
                    brute += 1;
                }
            }
        }
        assert_eq!(disk.iter().filter(|&&m| m).count(), brute);

        let far = circle_mask(&loc, 3, &Rect::new(80, 80, 96, 96));
        assert!(far.iter().all(|&m| !m));
    }

    #[test]
    fn partition_coverage_assignment_properties() {
        // exhaustive over a few small meshes, including non-divisible extents
        let scan = build_raster_scan(4, 4, 14, (20, 20), 10, (95, 97)).unwrap();
        for (rows, cols) in [(1usize, 1usize), (2, 2), (3, 3), (2, 3), (3, 2), (4, 3)] {
            let mesh = MeshSpec::new(rows, cols);
            let tiles = decompose_mesh((95, 97), mesh, 14, &scan).unwrap();
            // partition: areas sum and pairwise disjoint
            let total: i64 = tiles.iter().map(|t| t.interior.area()).sum();
            assert_eq!(total, 95 * 97);
            for i in 0..tiles.len() {
                for j in (i + 1)..tiles.len() {
                    assert!(tiles[i].interior.intersect(&tiles[j].interior).is_empty());
                }
            }
            // every probe assigned exactly once
            let mut seen = vec![0usize; scan.locations.len()];
            for t in &tiles {
                for &p in &t.probe_indices {
                    seen[p] += 1;
                }
            }
            assert!(seen.iter().all(|&s| s == 1));
            // coverage + mask containment in the extended rect
            for t in &tiles {
                assert!(t.extended.contains_rect(&t.interior));
                for &p in &t.probe_indices {
                    let sup = circle_support_rect(&scan.locations[p], scan.radius);
                    assert!(t.extended.contains_rect(&sup));
                }
            }
            // overlap symmetry
            for a in &tiles {
                for b in &tiles {
                    assert_eq!(overlap_region(a, b), overlap_region(b, a));
                }
            }
        }
    }
}
