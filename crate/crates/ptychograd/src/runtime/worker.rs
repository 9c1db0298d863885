//! The per-worker reconstruction loop: sweep assigned probes in raster
//! order, accumulate masked gradients, take local steps, and participate in
//! the four directional pass phases every T probes. The same body runs under
//! both engines.

use std::sync::Arc;
use std::time::Instant;

use ndarray::Array3;

use crate::datastore::Dataset;
use crate::fft::Fft2;
use crate::geometry::{
    circle_mask, window_rect, MeshSpec, ProbeLocation, Rect, ScanPattern, TileSpec,
};
use crate::gradients::loss_grad_window;
use crate::optics::{Measurement, Probe};
use crate::region::{add_scaled_region, extract_region, extract_region_padded};
use crate::runtime::{
    CombineMode, Observers, PhaseTag, ReconConfig, RegionMessage, RuntimeError, Transport,
    WorkerId,
};

pub(crate) struct ProbeTask {
    pub loc: ProbeLocation,
    pub measurement: Measurement,
}

struct Neighbor {
    id: WorkerId,
    overlap: Rect,
}

pub(crate) struct GdPlan {
    pub idx: usize,
    pub id: WorkerId,
    pub tile: TileSpec,
    pub slices: usize,
    pub probe: Probe,
    pub tasks: Vec<ProbeTask>,
    pub fire_marks: Vec<usize>,
    pub rounds_total: usize,
    pub iterations: usize,
    pub alpha: f64,
    pub mask_radius: Option<i64>,
    pub compute_units_per_probe: f64,
    pub capture_first_round: bool,
    up: Option<Neighbor>,
    down: Option<Neighbor>,
    left: Option<Neighbor>,
    right: Option<Neighbor>,
}

pub(crate) struct GdOut {
    pub idx: usize,
    pub volume: Array3<f64>,
    pub captured: Option<Array3<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn build_gd_plans(
    dataset: &Dataset,
    scan: &ScanPattern,
    probe: &Probe,
    mesh: MeshSpec,
    tiles: &[TileSpec],
    marks: &[Vec<usize>],
    rounds_total: usize,
    cfg: &ReconConfig,
) -> Vec<GdPlan> {
    let slices = dataset.header.slices as usize;
    let neighbor = |t: &TileSpec, dr: i64, dc: i64| -> Option<Neighbor> {
        let nr = t.mesh_r as i64 + dr;
        let nc = t.mesh_c as i64 + dc;
        if nr < 0 || nc < 0 || nr >= mesh.rows as i64 || nc >= mesh.cols as i64 {
            return None;
        }
        let other = &tiles[mesh.index(nr as usize, nc as usize)];
        Some(Neighbor {
            id: WorkerId {
                mesh_r: other.mesh_r,
                mesh_c: other.mesh_c,
            },
            overlap: crate::geometry::overlap_region(t, other),
        })
    };
    tiles
        .iter()
        .enumerate()
        .map(|(idx, t)| {
            let tasks: Vec<ProbeTask> = t
                .probe_indices
                .iter()
                .map(|&p| ProbeTask {
                    loc: scan.locations[p],
                    measurement: dataset.measurements[p].clone(),
                })
                .collect();
            GdPlan {
                idx,
                id: WorkerId {
                    mesh_r: t.mesh_r,
                    mesh_c: t.mesh_c,
                },
                tile: t.clone(),
                slices,
                probe: probe.clone(),
                tasks,
                fire_marks: marks[idx].clone(),
                rounds_total,
                iterations: cfg.iterations,
                alpha: cfg.alpha.0,
                mask_radius: cfg.mask_to_circle.then_some(scan.radius),
                compute_units_per_probe: cfg.cost_model.compute_per_probe,
                capture_first_round: cfg.capture_buffers,
                up: neighbor(t, -1, 0),
                down: neighbor(t, 1, 0),
                left: neighbor(t, 0, -1),
                right: neighbor(t, 0, 1),
            }
        })
        .collect()
}

struct PairSeqs {
    /// next sequence per destination worker index-free key (mesh coords)
    next_send: std::collections::BTreeMap<(usize, usize), u64>,
    next_recv: std::collections::BTreeMap<(usize, usize), u64>,
}

impl PairSeqs {
    fn new() -> PairSeqs {
        PairSeqs {
            next_send: Default::default(),
            next_recv: Default::default(),
        }
    }
    fn send(&mut self, dst: WorkerId) -> u64 {
        let e = self.next_send.entry((dst.mesh_r, dst.mesh_c)).or_insert(0);
        let s = *e;
        *e += 1;
        s
    }
    fn recv(&mut self, src: WorkerId, got: u64) -> Result<(), RuntimeError> {
        let e = self.next_recv.entry((src.mesh_r, src.mesh_c)).or_insert(0);
        if got != *e {
            return Err(RuntimeError::Protocol(format!(
                "out-of-order message from ({}, {}): sequence {got}, expected {}",
                src.mesh_r, src.mesh_c, *e
            )));
        }
        *e += 1;
        Ok(())
    }
}

pub(crate) fn run_gd_worker(
    ctx: &mut dyn Transport,
    plan: GdPlan,
    observers: &Arc<Observers>,
) -> Result<GdOut, RuntimeError> {
    let n = plan.probe.params.grid_size;
    let fft = Fft2::new(n);
    let ext = plan.tile.extended;
    let shape = (plan.slices, ext.height() as usize, ext.width() as usize);
    let mut volume = Array3::<f64>::zeros(shape);
    let mut accbuf = Array3::<f64>::zeros(shape);
    let mut seqs = PairSeqs::new();
    let mut captured = None;

    // per-probe circle masks over the window, precomputed
    let masks: Vec<Option<ndarray::Array2<bool>>> = plan
        .tasks
        .iter()
        .map(|t| {
            plan.mask_radius
                .map(|r| circle_mask(&t.loc, r, &window_rect(&t.loc, n)))
        })
        .collect();

    for iter in 0..plan.iterations {
        if observers.should_stop(iter) {
            break;
        }
        observers.note_iteration_start(plan.idx, iter);
        let mut fired = 0;
        for (k, task) in plan.tasks.iter().enumerate() {
            let t0 = Instant::now();
            let window = window_rect(&task.loc, n);
            let wdata = extract_region_padded(&volume, &ext, &window);
            let (_, g) = loss_grad_window(&task.measurement, &plan.probe, &wdata, &fft, true);
            let mut g = g.expect("gradient requested");
            if let Some(mask) = &masks[k] {
                for mut slice in g.outer_iter_mut() {
                    for ((yy, xx), v) in slice.indexed_iter_mut() {
                        if !mask[[yy, xx]] {
                            *v = 0.0;
                        }
                    }
                }
            }
            ctx.account_compute(plan.compute_units_per_probe, t0.elapsed());
            let region = window.intersect(&ext);
            add_scaled_region(&mut accbuf, ext.origin(), &g, window.origin(), &region, 1.0);
            if plan.alpha != 0.0 {
                add_scaled_region(
                    &mut volume,
                    ext.origin(),
                    &g,
                    window.origin(),
                    &region,
                    -plan.alpha,
                );
            }
            while fired < plan.fire_marks.len() && plan.fire_marks[fired] == k + 1 {
                pass_round(
                    ctx,
                    &plan,
                    &mut accbuf,
                    &mut volume,
                    &mut seqs,
                    &mut captured,
                    iter == 0 && fired == 0,
                )?;
                fired += 1;
            }
        }
        // pad to keep chains aligned with workers that fire more often
        while fired < plan.rounds_total {
            pass_round(
                ctx,
                &plan,
                &mut accbuf,
                &mut volume,
                &mut seqs,
                &mut captured,
                iter == 0 && fired == 0,
            )?;
            fired += 1;
        }
        let interior = extract_region(&volume, ext.origin(), &plan.tile.interior);
        observers.post_snapshot(&plan.tile, iter, &interior, ctx.now());
    }

    Ok(GdOut {
        idx: plan.idx,
        volume,
        captured,
    })
}

/// One full pass round: vertical forward/backward then horizontal
/// forward/backward, each a recv-fold followed by a send along the chain.
/// Afterwards the accumulated buffer updates the tile and resets.
fn pass_round(
    ctx: &mut dyn Transport,
    plan: &GdPlan,
    accbuf: &mut Array3<f64>,
    volume: &mut Array3<f64>,
    seqs: &mut PairSeqs,
    captured: &mut Option<Array3<f64>>,
    capture_now: bool,
) -> Result<(), RuntimeError> {
    let ext = plan.tile.extended;
    let origin = ext.origin();
    let receive = |ctx: &mut dyn Transport,
                       nb: &Option<Neighbor>,
                       phase: PhaseTag,
                       mode: CombineMode,
                       accbuf: &mut Array3<f64>,
                       seqs: &mut PairSeqs|
     -> Result<(), RuntimeError> {
        if let Some(nb) = nb {
            if nb.overlap.is_empty() {
                return Ok(());
            }
            let msg = ctx.recv(phase, nb.id)?;
            seqs.recv(nb.id, msg.sequence)?;
            if msg.region != nb.overlap || msg.mode != mode {
                return Err(RuntimeError::Protocol(format!(
                    "unexpected payload in {phase:?}: region {:?}, mode {:?}",
                    msg.region, msg.mode
                )));
            }
            crate::runtime::fold_message(accbuf, origin, &msg);
        }
        Ok(())
    };
    let transmit = |ctx: &mut dyn Transport,
                        nb: &Option<Neighbor>,
                        phase: PhaseTag,
                        mode: CombineMode,
                        accbuf: &Array3<f64>,
                        seqs: &mut PairSeqs|
     -> Result<(), RuntimeError> {
        if let Some(nb) = nb {
            if nb.overlap.is_empty() {
                return Ok(());
            }
            let payload = extract_region(accbuf, origin, &nb.overlap);
            ctx.send(RegionMessage {
                src: plan.id,
                dst: nb.id,
                region: nb.overlap,
                slices: plan.slices,
                payload,
                mode,
                phase_tag: phase,
                sequence: seqs.send(nb.id),
            })?;
        }
        Ok(())
    };

    receive(ctx, &plan.up, PhaseTag::VFwd, CombineMode::Add, accbuf, seqs)?;
    transmit(ctx, &plan.down, PhaseTag::VFwd, CombineMode::Add, accbuf, seqs)?;
    receive(ctx, &plan.down, PhaseTag::VBwd, CombineMode::Replace, accbuf, seqs)?;
    transmit(ctx, &plan.up, PhaseTag::VBwd, CombineMode::Replace, accbuf, seqs)?;
    receive(ctx, &plan.left, PhaseTag::HFwd, CombineMode::Add, accbuf, seqs)?;
    transmit(ctx, &plan.right, PhaseTag::HFwd, CombineMode::Add, accbuf, seqs)?;
    receive(ctx, &plan.right, PhaseTag::HBwd, CombineMode::Replace, accbuf, seqs)?;
    transmit(ctx, &plan.left, PhaseTag::HBwd, CombineMode::Replace, accbuf, seqs)?;

    if capture_now && plan.capture_first_round {
        *captured = Some(accbuf.clone());
    }
    // update the tile with the accumulated gradient, then reset the buffer
    if plan.alpha != 0.0 {
        volume.zip_mut_with(accbuf, |v, &g| *v -= plan.alpha * g);
    }
    accbuf.fill(0.0);
    Ok(())
}
