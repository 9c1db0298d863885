//! The voxel copy-paste baseline (Halo Voxel Exchange): every tile is
//! assigned its neighbors' probe locations up to `extra_rows` scan steps
//! away, the halo is widened to cover them, and per iteration each worker
//! sweeps its probes independently before pasting its interior voxels into
//! every neighbor's matching halo region.
//!
//! Kept for memory/seam/scaling comparison against the gradient-accumulation
//! path.

use std::sync::Arc;
use std::time::Instant;

use ndarray::Array3;
use thiserror::Error;

use crate::datastore::Dataset;
use crate::fft::Fft2;
use crate::geometry::{
    assign_probe_tile, circle_support_rect, mesh_interiors, window_rect, MeshSpec, Rect,
    ScanPattern, TileSpec,
};
use crate::gradients::loss_grad_window;
use crate::optics::{make_probe, Probe};
use crate::region::{add_scaled_region, extract_region, extract_region_padded};
use crate::runtime::{
    finish_run, run_cooperative, run_threaded, BodyFn, CombineMode, Observers, PhaseTag,
    ReconConfig, RegionMessage, RunResult, RuntimeError, Transport, WorkerId,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BaselineError {
    #[error(
        "tile ({mesh_r},{mesh_c}) is too small: its augmented halo exceeds the direct neighbors' interiors"
    )]
    TileTooSmall { mesh_r: usize, mesh_c: usize },
    #[error("{0}")]
    Config(String),
}

/// A baseline tile: the owned interior plus the halo augmented to cover the
/// extra neighbor probes. `base.extended` equals `augmented` so the generic
/// tile machinery applies unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HveTileSpec {
    pub base: TileSpec,
    pub extra_probe_indices: Vec<usize>,
    pub augmented: Rect,
}

/// Per-worker voxel and measurement storage counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryRow {
    pub worker: usize,
    pub voxels: i64,
    pub measurements: i64,
}

/// Decompose for the baseline: every tile holds its own probes plus all
/// probes within `extra_rows` scan-grid steps (Chebyshev distance) of one of
/// its own.
pub fn hve_decompose(
    volume_extent: (i64, i64),
    mesh: MeshSpec,
    scan: &ScanPattern,
    extra_rows: usize,
) -> Result<Vec<HveTileSpec>, BaselineError> {
    let (h, w) = volume_extent;
    if h < mesh.rows as i64 || w < mesh.cols as i64 {
        return Err(BaselineError::Config(format!(
            "{}x{} mesh does not fit a {h}x{w} volume",
            mesh.rows, mesh.cols
        )));
    }
    let interiors = mesh_interiors(volume_extent, mesh);
    let mut own: Vec<Vec<usize>> = vec![Vec::new(); mesh.worker_count()];
    for loc in &scan.locations {
        let (r, c) = assign_probe_tile(volume_extent, mesh, loc);
        own[mesh.index(r, c)].push(loc.index);
    }

    let mut tiles = Vec::with_capacity(mesh.worker_count());
    for (idx, interior) in interiors.iter().enumerate() {
        let own_grid: Vec<(i64, i64)> = own[idx]
            .iter()
            .map(|&p| {
                let (gy, gx) = scan.grid_coords(p);
                (gy as i64, gx as i64)
            })
            .collect();
        let mut extra: Vec<usize> = Vec::new();
        for loc in &scan.locations {
            if own[idx].contains(&loc.index) {
                continue;
            }
            let (gy, gx) = scan.grid_coords(loc.index);
            let near = own_grid.iter().any(|&(oy, ox)| {
                (gy as i64 - oy).abs() <= extra_rows as i64
                    && (gx as i64 - ox).abs() <= extra_rows as i64
            });
            if near {
                extra.push(loc.index);
            }
        }
        extra.sort_unstable();

        let mut augmented = *interior;
        for &p in own[idx].iter().chain(extra.iter()) {
            augmented =
                augmented.bounding_union(&circle_support_rect(&scan.locations[p], scan.radius));
        }
        let augmented = augmented.clip(volume_extent);

        // the paper's tile-size constraint: every halo voxel must belong to a
        // direct neighbor's interior, i.e. the augmented rect stays inside
        // the 3x3 neighborhood of interiors
        let (r, c) = (idx / mesh.cols, idx % mesh.cols);
        let mut nb_box = *interior;
        for (nr, nc) in mesh.neighbors8(r, c) {
            nb_box = nb_box.bounding_union(&interiors[mesh.index(nr, nc)]);
        }
        if !nb_box.contains_rect(&augmented) {
            return Err(BaselineError::TileTooSmall {
                mesh_r: r,
                mesh_c: c,
            });
        }

        tiles.push(HveTileSpec {
            base: TileSpec {
                mesh_r: r,
                mesh_c: c,
                interior: *interior,
                extended: augmented,
                halo_width: 0,
                probe_indices: own[idx].clone(),
            },
            extra_probe_indices: extra,
            augmented,
        });
    }
    Ok(tiles)
}

/// Analytic per-worker storage for the baseline decomposition.
pub fn memory_report_hve(tiles: &[HveTileSpec], slices: usize, detector: usize) -> Vec<MemoryRow> {
    tiles
        .iter()
        .enumerate()
        .map(|(i, t)| MemoryRow {
            worker: i,
            voxels: t.augmented.area() * slices as i64,
            measurements: (t.base.probe_indices.len() + t.extra_probe_indices.len()) as i64
                * (detector * detector) as i64,
        })
        .collect()
}

/// Analytic per-worker storage for the gradient-accumulation decomposition.
pub fn memory_report_gd(tiles: &[TileSpec], slices: usize, detector: usize) -> Vec<MemoryRow> {
    tiles
        .iter()
        .enumerate()
        .map(|(i, t)| MemoryRow {
            worker: i,
            voxels: t.extended.area() * slices as i64,
            measurements: t.probe_indices.len() as i64 * (detector * detector) as i64,
        })
        .collect()
}

struct HvePlan {
    idx: usize,
    id: WorkerId,
    tile: HveTileSpec,
    slices: usize,
    probe: Probe,
    tasks: Vec<crate::runtime::worker_support::ProbeTask>,
    iterations: usize,
    alpha: f64,
    compute_units_per_probe: f64,
    /// Ascending neighbor order: (id, send region, recv region).
    neighbors: Vec<(WorkerId, Rect, Rect)>,
}

fn run_hve_worker(
    ctx: &mut dyn Transport,
    plan: HvePlan,
    observers: &Arc<Observers>,
) -> Result<crate::runtime::worker_support::VolumeOut, RuntimeError> {
    let n = plan.probe.params.grid_size;
    let fft = Fft2::new(n);
    let aug = plan.tile.augmented;
    let shape = (plan.slices, aug.height() as usize, aug.width() as usize);
    let mut volume = Array3::<f64>::zeros(shape);
    let mut seq: u64 = 0;

    for iter in 0..plan.iterations {
        observers.note_iteration_start(plan.idx, iter);
        for task in &plan.tasks {
            let t0 = Instant::now();
            let window = window_rect(&task.loc, n);
            let wdata = extract_region_padded(&volume, &aug, &window);
            let (_, g) = loss_grad_window(&task.measurement, &plan.probe, &wdata, &fft, true);
            let g = g.expect("gradient requested");
            ctx.account_compute(plan.compute_units_per_probe, t0.elapsed());
            if plan.alpha != 0.0 {
                let region = window.intersect(&aug);
                add_scaled_region(
                    &mut volume,
                    aug.origin(),
                    &g,
                    window.origin(),
                    &region,
                    -plan.alpha,
                );
            }
        }
        // paste my interior into every neighbor's halo, then accept theirs;
        // ascending neighbor order keeps the fold deterministic
        for (id, send_region, _) in &plan.neighbors {
            if send_region.is_empty() {
                continue;
            }
            let payload = extract_region(&volume, aug.origin(), send_region);
            ctx.send(RegionMessage {
                src: plan.id,
                dst: *id,
                region: *send_region,
                slices: plan.slices,
                payload,
                mode: CombineMode::Replace,
                phase_tag: PhaseTag::Halo,
                sequence: seq,
            })?;
        }
        seq += 1;
        for (id, _, recv_region) in &plan.neighbors {
            if recv_region.is_empty() {
                continue;
            }
            let msg = ctx.recv(PhaseTag::Halo, *id)?;
            if msg.region != *recv_region || msg.mode != CombineMode::Replace {
                return Err(RuntimeError::Protocol(format!(
                    "unexpected halo payload: region {:?}",
                    msg.region
                )));
            }
            crate::runtime::fold_message(&mut volume, aug.origin(), &msg);
        }
        let interior = extract_region(&volume, aug.origin(), &plan.tile.base.interior);
        observers.post_snapshot(&plan.tile.base, iter, &interior, ctx.now());
    }

    Ok(crate::runtime::worker_support::VolumeOut {
        idx: plan.idx,
        volume,
        captured: None,
    })
}

/// Run the baseline reconstruction: independent per-tile sweeps plus a
/// synchronous interior-to-halo copy-paste exchange each iteration.
pub fn hve_reconstruct(
    dataset: &Dataset,
    mesh: MeshSpec,
    cfg: &ReconConfig,
    extra_rows: usize,
) -> Result<(RunResult, Vec<MemoryRow>), RuntimeError> {
    let mut warnings = Vec::new();
    if cfg.iterations == 0 {
        return Err(RuntimeError::Config("iterations must be >= 1".into()));
    }
    let header = &dataset.header;
    let scan = header
        .scan()
        .map_err(|e| RuntimeError::Config(e.to_string()))?;
    let probe = make_probe(&header.probe_params());
    let extent = header.volume_extent();
    let slices = header.slices as usize;
    let tiles =
        hve_decompose(extent, mesh, &scan, extra_rows).map_err(|e| RuntimeError::Config(e.to_string()))?;
    let memory = memory_report_hve(&tiles, slices, header.detector as usize);
    if cfg.converge_tol.is_some() {
        warnings.push("the baseline runs its full iteration budget".to_string());
    }

    let observers = Arc::new(Observers::new(
        tiles.len(),
        (slices, extent.0 as usize, extent.1 as usize),
        None,
    ));

    let plans: Vec<HvePlan> = tiles
        .iter()
        .enumerate()
        .map(|(idx, t)| {
            let mut all: Vec<usize> = t
                .base
                .probe_indices
                .iter()
                .chain(t.extra_probe_indices.iter())
                .copied()
                .collect();
            all.sort_unstable();
            let tasks = all
                .iter()
                .map(|&p| crate::runtime::worker_support::ProbeTask {
                    loc: scan.locations[p],
                    measurement: dataset.measurements[p].clone(),
                })
                .collect();
            let (r, c) = (t.base.mesh_r, t.base.mesh_c);
            let neighbors = mesh
                .neighbors8(r, c)
                .into_iter()
                .map(|(nr, nc)| {
                    let other = &tiles[mesh.index(nr, nc)];
                    (
                        WorkerId {
                            mesh_r: nr,
                            mesh_c: nc,
                        },
                        t.base.interior.intersect(&other.augmented),
                        other.base.interior.intersect(&t.augmented),
                    )
                })
                .collect();
            HvePlan {
                idx,
                id: WorkerId {
                    mesh_r: r,
                    mesh_c: c,
                },
                tile: t.clone(),
                slices,
                probe: probe.clone(),
                tasks,
                iterations: cfg.iterations,
                alpha: cfg.alpha.0,
                compute_units_per_probe: cfg.cost_model.compute_per_probe,
                neighbors,
            }
        })
        .collect();

    let bodies: Vec<BodyFn<crate::runtime::worker_support::VolumeOut>> = plans
        .into_iter()
        .map(|plan| {
            let obs = Arc::clone(&observers);
            let b: BodyFn<crate::runtime::worker_support::VolumeOut> =
                Box::new(move |ctx: &mut dyn Transport| run_hve_worker(ctx, plan, &obs));
            b
        })
        .collect();

    let outcome = if cfg.deterministic {
        run_cooperative(mesh, cfg.cost_model, bodies)?
    } else {
        run_threaded(mesh, bodies)?
    };

    let base_tiles: Vec<TileSpec> = tiles.iter().map(|t| t.base.clone()).collect();
    let result = finish_run(
        dataset, &scan, &probe, base_tiles, outcome, observers, warnings, mesh, false,
    )?;
    Ok((result, memory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_raster_scan;

    fn scan_3x3() -> ScanPattern {
        // aligned with a 3x3 mesh on a 96^2 volume: one probe per tile
        build_raster_scan(3, 3, 32, (16, 16), 12, (96, 96)).unwrap()
    }

    #[test]
    fn single_tile_holds_everything_without_halo() {
        let scan = scan_3x3();
        let tiles = hve_decompose((96, 96), MeshSpec::new(1, 1), &scan, 2).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].base.probe_indices.len(), 9);
        assert!(tiles[0].extra_probe_indices.is_empty());
        assert_eq!(tiles[0].augmented, Rect::new(0, 0, 96, 96));
        let mem = memory_report_hve(&tiles, 3, 16);
        assert_eq!(mem[0].voxels, 96 * 96 * 3);
        assert_eq!(mem[0].measurements, 9 * 256);
    }

    #[test]
    fn center_tile_collects_all_probes_with_one_extra_row() {
        let scan = scan_3x3();
        let tiles = hve_decompose((96, 96), MeshSpec::new(3, 3), &scan, 1).unwrap();
        let center = &tiles[4];
        assert_eq!(center.base.probe_indices, vec![4]);
        assert_eq!(
            center.base.probe_indices.len() + center.extra_probe_indices.len(),
            9,
            "center tile holds all nine probes"
        );
    }

    #[test]
    fn fine_mesh_trips_the_tile_size_constraint() {
        // interiors shrink to 12 voxels while neighbor probes two scan rows
        // away still demand much wider halos
        let scan = scan_3x3();
        let err = hve_decompose((96, 96), MeshSpec::new(8, 8), &scan, 2).unwrap_err();
        assert!(matches!(err, BaselineError::TileTooSmall { .. }));
    }

    #[test]
    fn doubling_the_mesh_quarters_interior_voxels() {
        let scan = build_raster_scan(6, 6, 12, (16, 16), 10, (96, 96)).unwrap();
        let m2 = hve_decompose((96, 96), MeshSpec::new(2, 2), &scan, 1).unwrap();
        let m4 = hve_decompose((96, 96), MeshSpec::new(4, 4), &scan, 1).unwrap();
        for t in &m4 {
            assert_eq!(t.base.interior.area() * 4, m2[0].base.interior.area());
        }
    }

    #[test]
    fn gd_holds_fewer_measurements_per_worker() {
        let scan = scan_3x3();
        let gd = crate::geometry::decompose_mesh((96, 96), MeshSpec::new(3, 3), 14, &scan).unwrap();
        let hve = hve_decompose((96, 96), MeshSpec::new(3, 3), &scan, 1).unwrap();
        let gd_mem = memory_report_gd(&gd, 2, 16);
        let hve_mem = memory_report_hve(&hve, 2, 16);
        for (a, b) in gd_mem.iter().zip(hve_mem.iter()) {
            assert!(
                a.measurements < b.measurements,
                "worker {}: {} !< {}",
                a.worker,
                a.measurements,
                b.measurements
            );
        }
    }
}
