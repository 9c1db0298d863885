//! Concurrent execution of the reconstruction loop on a mesh of K workers:
//! per-probe local updates, delayed accumulation every T probes, pipelined
//! directional passes over point-to-point messages, and compute/wait/comm
//! accounting.
//!
//! Workers are independent sequential agents with exclusive ownership of
//! their tile and buffer; all cross-worker data flow is by immutable message
//! payloads. Two engines run the same worker body: a deterministic
//! cooperative scheduler with simulated time, and a free-running threaded
//! mode. The fold order is fixed by the protocol itself, so both produce
//! bit-identical numerics.

mod engine_sim;
mod engine_threaded;
mod worker;

pub use engine_sim::run_cooperative;
pub use engine_threaded::run_threaded;

/// Building blocks shared with the baseline's worker body.
pub(crate) mod worker_support {
    pub(crate) use super::worker::{GdOut as VolumeOut, ProbeTask};
}

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ndarray::Array3;
use thiserror::Error;

use crate::datastore::{Dataset, IterationRecord};
use crate::geometry::{decompose_mesh, GeometryError, MeshSpec, Rect, TileSpec};
use crate::gradients::{total_cost, GradError, StepSize};
use crate::optics::{make_probe, Volume};
use crate::passes::{BufferMesh, GradBuffer, PassError};
use crate::region::{add_scaled_region, copy_region};

pub(crate) use worker::{build_gd_plans, run_gd_worker};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("coverage error: {0}")]
    Coverage(#[from] GeometryError),
    #[error("config error: {0}")]
    Config(String),
    #[error("deadlock detected: no runnable worker, waiting: {waiting}")]
    DeadlockDetected { waiting: String },
    #[error("self-send is forbidden (worker {idx})")]
    SelfSend { idx: usize },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Stitch(#[from] PassError),
    #[error("worker panicked")]
    WorkerPanic,
}

/// Mesh coordinates of a worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorkerId {
    pub mesh_r: usize,
    pub mesh_c: usize,
}

/// How a received payload combines into the local buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    Add,
    Replace,
}

/// Which protocol phase a message belongs to. `Halo` is the baseline's
/// copy-paste exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseTag {
    VFwd,
    VBwd,
    HFwd,
    HBwd,
    Halo,
}

/// Point-to-point payload carrying a rectangular sub-array.
#[derive(Debug, Clone)]
pub struct RegionMessage {
    pub src: WorkerId,
    pub dst: WorkerId,
    pub region: Rect,
    pub slices: usize,
    pub payload: Array3<f64>,
    pub mode: CombineMode,
    pub phase_tag: PhaseTag,
    pub sequence: u64,
}

/// Fold a received message into a buffer anchored at `origin`.
pub fn fold_message(buffer: &mut Array3<f64>, origin: (i64, i64), msg: &RegionMessage) {
    match msg.mode {
        CombineMode::Add => add_scaled_region(
            buffer,
            origin,
            &msg.payload,
            msg.region.origin(),
            &msg.region,
            1.0,
        ),
        CombineMode::Replace => copy_region(
            buffer,
            origin,
            &msg.payload,
            msg.region.origin(),
            &msg.region,
        ),
    }
}

/// Per-worker compute/wait/communication tallies. Units are simulated-time
/// units under the cooperative scheduler and wall-clock seconds in threaded
/// mode.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TimingBreakdown {
    pub compute_units: f64,
    pub wait_units: f64,
    pub comm_units: f64,
    pub messages_sent: u64,
}

/// Deterministic cost model for the simulated scheduler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub compute_per_probe: f64,
    pub comm_per_message: f64,
    pub comm_per_voxel: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            compute_per_probe: 1.0,
            comm_per_message: 0.1,
            comm_per_voxel: 1e-4,
        }
    }
}

/// One entry of the deterministic schedule trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub order: u64,
    pub sim_time: f64,
    pub worker: usize,
    pub kind: TraceKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceKind {
    Send {
        dst: usize,
        phase: PhaseTag,
        voxels: usize,
    },
    Recv {
        src: usize,
        phase: PhaseTag,
        waited: f64,
    },
}

/// Abstract worker-side endpoint: non-blocking ordered sends, blocking tagged
/// receive, and time accounting. Implemented by both engines.
pub trait Transport {
    fn send(&mut self, msg: RegionMessage) -> Result<(), RuntimeError>;
    fn recv(&mut self, phase: PhaseTag, src: WorkerId) -> Result<RegionMessage, RuntimeError>;
    /// Record gradient-computation work: simulated units and measured wall time.
    fn account_compute(&mut self, units: f64, wall: Duration);
    /// Worker-local clock (simulated units or wall seconds).
    fn now(&self) -> f64;
}

/// Worker body signature shared by both engines.
pub type BodyFn<R> = Box<dyn FnOnce(&mut dyn Transport) -> Result<R, RuntimeError> + Send>;

/// What an engine hands back after all workers return.
pub struct EngineOutcome<R> {
    pub results: Vec<R>,
    pub timing: Vec<TimingBreakdown>,
    pub trace: Option<Vec<TraceEvent>>,
}

/// When the directional passes fire relative to a worker's local probe count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassFrequency {
    /// After every probe (T = 1).
    PerProbe,
    /// After every T local probes.
    Every(usize),
    /// Once per iteration, after the worker's last probe.
    OncePerIteration,
    /// Twice per iteration: mid-sweep and at the end.
    TwicePerIteration,
    /// K evenly spaced pass rounds per iteration.
    TimesPerIteration(usize),
}

#[derive(Debug, Clone)]
pub struct ReconConfig {
    pub iterations: usize,
    pub pass_freq: PassFrequency,
    pub alpha: StepSize,
    pub seed: u64,
    pub deterministic: bool,
    pub halo_width: i64,
    /// Mask per-probe gradients to their scan circles before buffering.
    pub mask_to_circle: bool,
    /// Optional relative cost-decrease threshold; deterministic mode only.
    pub converge_tol: Option<f64>,
    pub cost_model: CostModel,
    /// Capture every worker's accumulated buffer right after the first pass
    /// round (post-pass, pre-update) for verification.
    pub capture_buffers: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            iterations: 100,
            pass_freq: PassFrequency::OncePerIteration,
            alpha: StepSize(1.0),
            seed: 0,
            deterministic: true,
            halo_width: 24,
            mask_to_circle: true,
            converge_tol: None,
            cost_model: CostModel::default(),
            capture_buffers: false,
        }
    }
}

/// Everything a reconstruction run produces.
pub struct RunResult {
    pub volume: Volume,
    pub convergence: Vec<IterationRecord>,
    pub timing: Vec<TimingBreakdown>,
    pub trace: Option<Vec<TraceEvent>>,
    pub captured: Option<BufferMesh>,
    pub warnings: Vec<String>,
    pub tiles: Vec<TileSpec>,
    /// Final per-worker extended-tile data, row-major worker order.
    pub worker_volumes: Vec<Array3<f64>>,
}

/// Per-iteration assembly of worker interiors plus the stop control shared by
/// all workers. Pure observation: posting never sends messages or advances
/// simulated time.
pub(crate) struct Observers {
    volume_dims: (usize, usize, usize),
    workers: usize,
    state: Mutex<SnapshotState>,
    started: Mutex<Vec<usize>>,
    stop_at: AtomicUsize,
    converge: Option<ConvergeCtl>,
}

struct SnapshotState {
    iters: Vec<IterSnapshot>,
}

struct IterSnapshot {
    remaining: usize,
    volume: Array3<f64>,
    max_time: f64,
    cost: Option<f64>,
}

pub(crate) struct ConvergeCtl {
    pub tol: f64,
    pub eval: Box<dyn Fn(&Array3<f64>) -> f64 + Send + Sync>,
}

impl Observers {
    pub fn new(
        workers: usize,
        volume_dims: (usize, usize, usize),
        converge: Option<ConvergeCtl>,
    ) -> Observers {
        Observers {
            volume_dims,
            workers,
            state: Mutex::new(SnapshotState { iters: Vec::new() }),
            started: Mutex::new(vec![0; workers]),
            stop_at: AtomicUsize::new(usize::MAX),
            converge,
        }
    }

    /// True when the worker must not begin `iter`.
    pub fn should_stop(&self, iter: usize) -> bool {
        iter > self.stop_at.load(Ordering::SeqCst)
    }

    pub fn note_iteration_start(&self, worker: usize, iter: usize) {
        let mut started = self.started.lock().unwrap();
        started[worker] = started[worker].max(iter);
    }

    pub fn post_snapshot(
        &self,
        tile: &TileSpec,
        iter: usize,
        interior: &Array3<f64>,
        time: f64,
    ) {
        let mut st = self.state.lock().unwrap();
        while st.iters.len() <= iter {
            st.iters.push(IterSnapshot {
                remaining: self.workers,
                volume: Array3::zeros(self.volume_dims),
                max_time: 0.0,
                cost: None,
            });
        }
        let snap = &mut st.iters[iter];
        copy_region(
            &mut snap.volume,
            (0, 0),
            interior,
            tile.interior.origin(),
            &tile.interior,
        );
        snap.max_time = snap.max_time.max(time);
        snap.remaining -= 1;
        if snap.remaining == 0 {
            if let Some(ctl) = &self.converge {
                let cost = (ctl.eval)(&snap.volume);
                snap.cost = Some(cost);
                if iter > 0 {
                    if let Some(prev) = st.iters[iter - 1].cost {
                        let rel = (prev - cost).abs() / prev.abs().max(f64::MIN_POSITIVE);
                        if rel < ctl.tol
                            && self.stop_at.load(Ordering::SeqCst) == usize::MAX
                        {
                            let started = self.started.lock().unwrap();
                            let horizon = started.iter().copied().max().unwrap_or(iter);
                            let _ = self.stop_at.compare_exchange(
                                usize::MAX,
                                iter.max(horizon),
                                Ordering::SeqCst,
                                Ordering::SeqCst,
                            );
                        }
                    }
                }
            }
        }
    }

    /// Completed iterations in order: (volume, max worker time, cost if
    /// already evaluated during the run).
    pub fn into_iterations(self) -> Vec<(Array3<f64>, f64, Option<f64>)> {
        let st = self.state.into_inner().unwrap();
        st.iters
            .into_iter()
            .filter(|s| s.remaining == 0)
            .map(|s| (s.volume, s.max_time, s.cost))
            .collect()
    }
}

/// Fire marks for one worker: after which local probe counts a pass round
/// triggers. Returns (marks, collapsed) where collapsed notes the
/// fell-back-to-once case.
fn fire_marks(freq: PassFrequency, n_probes: usize) -> Result<Vec<usize>, RuntimeError> {
    Ok(match freq {
        PassFrequency::PerProbe => (1..=n_probes).collect(),
        PassFrequency::Every(t) => {
            if t == 0 {
                return Err(RuntimeError::Config("pass frequency T must be >= 1".into()));
            }
            (1..=n_probes).filter(|i| i % t == 0).collect()
        }
        PassFrequency::OncePerIteration => times_per_iteration(1, n_probes),
        PassFrequency::TwicePerIteration => times_per_iteration(2, n_probes),
        PassFrequency::TimesPerIteration(k) => {
            if k == 0 {
                return Err(RuntimeError::Config("passes per iteration must be >= 1".into()));
            }
            times_per_iteration(k, n_probes)
        }
    })
}

fn times_per_iteration(k: usize, n_probes: usize) -> Vec<usize> {
    if n_probes == 0 {
        return vec![];
    }
    let mut marks: Vec<usize> = (1..=k).map(|j| (n_probes * j).div_ceil(k)).collect();
    marks.dedup();
    marks
}

/// Run the pipelined reconstruction (Gradient-Decomposition mode) over a
/// dataset on an R x C worker mesh.
pub fn appp_reconstruct(
    dataset: &Dataset,
    mesh: MeshSpec,
    cfg: &ReconConfig,
) -> Result<RunResult, RuntimeError> {
    let mut warnings = Vec::new();
    if cfg.iterations == 0 {
        return Err(RuntimeError::Config("iterations must be >= 1".into()));
    }
    if dataset.measurements.len() != dataset.header.probe_count as usize {
        return Err(RuntimeError::Config(format!(
            "dataset holds {} measurements but header says {}",
            dataset.measurements.len(),
            dataset.header.probe_count
        )));
    }
    let header = &dataset.header;
    let scan = header
        .scan()
        .map_err(|e| RuntimeError::Config(e.to_string()))?;
    let probe = make_probe(&header.probe_params());
    let extent = header.volume_extent();
    let slices = header.slices as usize;
    let tiles = decompose_mesh(extent, mesh, cfg.halo_width, &scan)?;

    // pass-round schedule; collapse to once-per-iteration when T exceeds
    // every worker's probe count
    let mut marks: Vec<Vec<usize>> = Vec::with_capacity(tiles.len());
    for t in &tiles {
        marks.push(fire_marks(cfg.pass_freq, t.probe_indices.len())?);
    }
    let mut rounds_total = marks.iter().map(|m| m.len()).max().unwrap_or(0);
    if rounds_total == 0 {
        warnings.push(
            "pass frequency fires never at this probe distribution; collapsing to once-per-iteration"
                .to_string(),
        );
        marks = tiles
            .iter()
            .map(|t| fire_marks(PassFrequency::OncePerIteration, t.probe_indices.len()))
            .collect::<Result<_, _>>()?;
        rounds_total = marks.iter().map(|m| m.len()).max().unwrap_or(1).max(1);
    }

    let converge = match (cfg.converge_tol, cfg.deterministic) {
        (Some(tol), true) => {
            let measurements = dataset.measurements.clone();
            let scan_c = scan.clone();
            let probe_c = probe.clone();
            let (py, px, dz) = (header.pitch_y, header.pitch_x, header.slice_thickness);
            Some(ConvergeCtl {
                tol,
                eval: Box::new(move |data: &Array3<f64>| {
                    let vol = Volume {
                        data: data.clone(),
                        pitch_y: py,
                        pitch_x: px,
                        slice_thickness: dz,
                    };
                    total_cost(&measurements, &scan_c, &probe_c, &vol).unwrap_or(f64::NAN)
                }),
            })
        }
        (Some(_), false) => {
            warnings.push(
                "convergence threshold needs the deterministic scheduler; running the full budget"
                    .to_string(),
            );
            None
        }
        (None, _) => None,
    };

    let observers = Arc::new(Observers::new(
        tiles.len(),
        (slices, extent.0 as usize, extent.1 as usize),
        converge,
    ));
    let plans = build_gd_plans(dataset, &scan, &probe, mesh, &tiles, &marks, rounds_total, cfg);

    let bodies: Vec<BodyFn<worker::GdOut>> = plans
        .into_iter()
        .map(|plan| {
            let obs = Arc::clone(&observers);
            let b: BodyFn<worker::GdOut> =
                Box::new(move |ctx: &mut dyn Transport| run_gd_worker(ctx, plan, &obs));
            b
        })
        .collect();

    let outcome = if cfg.deterministic {
        run_cooperative(mesh, cfg.cost_model, bodies)?
    } else {
        run_threaded(mesh, bodies)?
    };

    finish_run(
        dataset,
        &scan,
        &probe,
        tiles,
        outcome,
        observers,
        warnings,
        mesh,
        cfg.capture_buffers,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn finish_run(
    dataset: &Dataset,
    scan: &crate::geometry::ScanPattern,
    probe: &crate::optics::Probe,
    tiles: Vec<TileSpec>,
    outcome: EngineOutcome<worker::GdOut>,
    observers: Arc<Observers>,
    warnings: Vec<String>,
    mesh: MeshSpec,
    capture: bool,
) -> Result<RunResult, RuntimeError> {
    let header = &dataset.header;
    let extent = header.volume_extent();
    let pitch = (header.pitch_y, header.pitch_x, header.slice_thickness);

    let mut results = outcome.results;
    results.sort_by_key(|r| r.idx);
    let parts: Vec<(TileSpec, Array3<f64>)> = results
        .iter()
        .map(|r| (tiles[r.idx].clone(), r.volume.clone()))
        .collect();
    let volume = crate::passes::stitch(&parts, extent, pitch)?;
    let worker_volumes: Vec<Array3<f64>> = results.iter().map(|r| r.volume.clone()).collect();

    let captured = if capture {
        let mut bm = BufferMesh {
            mesh,
            buffers: results
                .iter()
                .map(|r| GradBuffer {
                    tile: tiles[r.idx].clone(),
                    data: r
                        .captured
                        .clone()
                        .unwrap_or_else(|| Array3::zeros((0, 0, 0))),
                })
                .collect(),
        };
        bm.buffers.sort_by_key(|b| (b.tile.mesh_r, b.tile.mesh_c));
        Some(bm)
    } else {
        None
    };

    let observers =
        Arc::try_unwrap(observers).unwrap_or_else(|_| panic!("observers still shared"));
    let mut convergence = Vec::new();
    for (iter, (data, time, cost)) in observers.into_iterations().into_iter().enumerate() {
        let cost = match cost {
            Some(c) => c,
            None => {
                let vol = Volume {
                    data,
                    pitch_y: pitch.0,
                    pitch_x: pitch.1,
                    slice_thickness: pitch.2,
                };
                total_cost(&dataset.measurements, scan, probe, &vol)?
            }
        };
        convergence.push(IterationRecord {
            iteration: iter,
            cost,
            sim_time: time,
        });
    }

    Ok(RunResult {
        volume,
        convergence,
        timing: outcome.timing,
        trace: outcome.trace,
        captured,
        warnings,
        tiles,
        worker_volumes,
    })
}

/// Total pass messages expected per full pass round on an R x C mesh:
/// 2 (R-1) C vertical + 2 (C-1) R horizontal.
pub fn pass_message_budget(mesh: MeshSpec) -> u64 {
    let r = mesh.rows as u64;
    let c = mesh.cols as u64;
    2 * (r - 1) * c + 2 * (c - 1) * r
}
