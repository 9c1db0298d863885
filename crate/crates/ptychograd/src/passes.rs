//! Sequential reference semantics for gradient-tile accumulation: the
//! direct-neighbor add exchange, vertical/horizontal forward passes (ADD) and
//! backward passes (REPLACE), stitching, and the brute-force global-sum
//! oracle.
//!
//! This module is the single-threaded reference; the runtime re-implements
//! the same semantics concurrently and is tested against it.

use ndarray::Array3;
use thiserror::Error;

use crate::geometry::{overlap_region, MeshSpec, Rect, TileSpec};
use crate::gradients::GradField;
use crate::optics::Volume;
use crate::region::{add_scaled_region, copy_region, extract_region};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PassError {
    #[error("tile interiors do not partition the {h}x{w} extent")]
    IncompleteCover { h: i64, w: i64 },
}

/// Per-worker accumulated gradient buffer shaped like the tile's extended
/// rect (slices x height x width).
#[derive(Debug, Clone)]
pub struct GradBuffer {
    pub tile: TileSpec,
    pub data: Array3<f64>,
}

impl GradBuffer {
    pub fn zeros(tile: TileSpec, slices: usize) -> GradBuffer {
        let h = tile.extended.height() as usize;
        let w = tile.extended.width() as usize;
        GradBuffer {
            tile,
            data: Array3::zeros((slices, h, w)),
        }
    }

    pub fn origin(&self) -> (i64, i64) {
        self.tile.extended.origin()
    }

    /// Add a gradient field into the buffer, restricted to the extended rect.
    pub fn add_field(&mut self, g: &GradField) {
        let region = g.region.intersect(&self.tile.extended);
        let origin = self.origin();
        add_scaled_region(&mut self.data, origin, &g.data, g.region.origin(), &region, 1.0);
    }
}

/// R x C grid of gradient buffers over a valid decomposition.
#[derive(Debug, Clone)]
pub struct BufferMesh {
    pub mesh: MeshSpec,
    pub buffers: Vec<GradBuffer>,
}

impl BufferMesh {
    pub fn zeros(tiles: &[TileSpec], mesh: MeshSpec, slices: usize) -> BufferMesh {
        assert_eq!(tiles.len(), mesh.worker_count());
        BufferMesh {
            mesh,
            buffers: tiles
                .iter()
                .map(|t| GradBuffer::zeros(t.clone(), slices))
                .collect(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> &GradBuffer {
        &self.buffers[self.mesh.index(r, c)]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut GradBuffer {
        let idx = self.mesh.index(r, c);
        &mut self.buffers[idx]
    }

    fn pair_overlap(&self, a: (usize, usize), b: (usize, usize)) -> Rect {
        overlap_region(&self.at(a.0, a.1).tile, &self.at(b.0, b.1).tile)
    }
}

/// Symmetric direct-neighbor exchange: every buffer adds each neighbor's
/// pre-exchange values over their pairwise overlap (diagonals included). All
/// pairs see pre-exchange snapshots, so adds never double-count.
pub fn neighbor_add_exchange(mesh: &mut BufferMesh) {
    let snapshot: Vec<Array3<f64>> = mesh.buffers.iter().map(|b| b.data.clone()).collect();
    let spec = mesh.mesh;
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            for (nr, nc) in spec.neighbors8(r, c) {
                let region = mesh.pair_overlap((r, c), (nr, nc));
                if region.is_empty() {
                    continue;
                }
                let src_origin = mesh.at(nr, nc).origin();
                let dst_origin = mesh.at(r, c).origin();
                add_scaled_region(
                    &mut mesh.at_mut(r, c).data,
                    dst_origin,
                    &snapshot[spec.index(nr, nc)],
                    src_origin,
                    &region,
                    1.0,
                );
            }
        }
    }
}

fn chain_add(mesh: &mut BufferMesh, from: (usize, usize), to: (usize, usize)) {
    let region = mesh.pair_overlap(from, to);
    if region.is_empty() {
        return;
    }
    let payload = extract_region(&mesh.at(from.0, from.1).data, mesh.at(from.0, from.1).origin(), &region);
    let dst_origin = mesh.at(to.0, to.1).origin();
    add_scaled_region(
        &mut mesh.at_mut(to.0, to.1).data,
        dst_origin,
        &payload,
        region.origin(),
        &region,
        1.0,
    );
}

fn chain_replace(mesh: &mut BufferMesh, from: (usize, usize), to: (usize, usize)) {
    let region = mesh.pair_overlap(from, to);
    if region.is_empty() {
        return;
    }
    let payload = extract_region(&mesh.at(from.0, from.1).data, mesh.at(from.0, from.1).origin(), &region);
    let dst_origin = mesh.at(to.0, to.1).origin();
    copy_region(
        &mut mesh.at_mut(to.0, to.1).data,
        dst_origin,
        &payload,
        region.origin(),
        &region,
    );
}

/// Top-to-bottom sequential ADD chain within each tile column; later steps
/// see earlier steps' results.
pub fn vertical_forward(mesh: &mut BufferMesh) {
    let spec = mesh.mesh;
    for c in 0..spec.cols {
        for r in 0..spec.rows.saturating_sub(1) {
            chain_add(mesh, (r, c), (r + 1, c));
        }
    }
}

/// Bottom-to-top sequential REPLACE chain within each tile column.
pub fn vertical_backward(mesh: &mut BufferMesh) {
    let spec = mesh.mesh;
    for c in 0..spec.cols {
        for r in (1..spec.rows).rev() {
            chain_replace(mesh, (r, c), (r - 1, c));
        }
    }
}

/// Left-to-right sequential ADD chain within each tile row.
pub fn horizontal_forward(mesh: &mut BufferMesh) {
    let spec = mesh.mesh;
    for r in 0..spec.rows {
        for c in 0..spec.cols.saturating_sub(1) {
            chain_add(mesh, (r, c), (r, c + 1));
        }
    }
}

/// Right-to-left sequential REPLACE chain within each tile row.
pub fn horizontal_backward(mesh: &mut BufferMesh) {
    let spec = mesh.mesh;
    for r in 0..spec.rows {
        for c in (1..spec.cols).rev() {
            chain_replace(mesh, (r, c), (r, c - 1));
        }
    }
}

/// The four directional passes in fixed order: vertical forward, vertical
/// backward, horizontal forward, horizontal backward. Corner contributions
/// ride the vertical-then-horizontal composition; no dedicated diagonal
/// exchange is needed (asserted by the accumulation-equivalence tests).
pub fn full_pass(mesh: &mut BufferMesh) {
    vertical_forward(mesh);
    vertical_backward(mesh);
    horizontal_forward(mesh);
    horizontal_backward(mesh);
}

/// Scatter-add every per-probe gradient into a zero full-volume array.
pub fn global_sum_oracle(
    per_probe_grads: &[GradField],
    volume_extent: (i64, i64),
    slices: usize,
) -> Array3<f64> {
    let mut out = Array3::zeros((slices, volume_extent.0 as usize, volume_extent.1 as usize));
    let full = Rect::new(0, 0, volume_extent.0, volume_extent.1);
    for g in per_probe_grads {
        let region = g.region.intersect(&full);
        add_scaled_region(&mut out, (0, 0), &g.data, g.region.origin(), &region, 1.0);
    }
    out
}

/// Assemble a volume from tile interiors, discarding halos. The data arrays
/// are shaped like each tile's extended rect.
pub fn stitch(
    tiles: &[(TileSpec, Array3<f64>)],
    volume_extent: (i64, i64),
    pitch: (f64, f64, f64),
) -> Result<Volume, PassError> {
    let (h, w) = volume_extent;
    let slices = tiles.first().map(|(_, d)| d.dim().0).unwrap_or(0);
    let covered: i64 = tiles.iter().map(|(t, _)| t.interior.area()).sum();
    let mut painted = Array3::<f64>::zeros((1, h as usize, w as usize));
    for (t, _) in tiles {
        for y in t.interior.y0..t.interior.y1 {
            for x in t.interior.x0..t.interior.x1 {
                painted[[0, y as usize, x as usize]] += 1.0;
            }
        }
    }
    if covered != h * w || painted.iter().any(|&p| p != 1.0) {
        return Err(PassError::IncompleteCover { h, w });
    }
    let mut out = Array3::zeros((slices, h as usize, w as usize));
    for (t, data) in tiles {
        copy_region(&mut out, (0, 0), data, t.extended.origin(), &t.interior);
    }
    Ok(Volume {
        data: out,
        pitch_y: pitch.0,
        pitch_x: pitch.1,
        slice_thickness: pitch.2,
    })
}
