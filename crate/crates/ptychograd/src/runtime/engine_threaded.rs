//! Free-running threaded engine: one OS thread per worker, one unbounded
//! channel per ordered worker pair. Timing tallies are wall-clock seconds.
//!
//! The pass protocol receives from a specific source in program order, so
//! the floating-point fold order is schedule-independent and results are
//! bit-identical to the cooperative scheduler.

use std::collections::BTreeMap;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::{Duration, Instant};

use super::{
    BodyFn, EngineOutcome, PhaseTag, RegionMessage, RuntimeError, TimingBreakdown, Transport,
    WorkerId,
};

pub(crate) struct ThreadedCtx {
    idx: usize,
    mesh_cols: usize,
    senders: BTreeMap<usize, Sender<RegionMessage>>,
    receivers: BTreeMap<usize, Receiver<RegionMessage>>,
    stats: TimingBreakdown,
    start: Instant,
}

impl ThreadedCtx {
    fn wid_to_idx(&self, id: WorkerId) -> usize {
        id.mesh_r * self.mesh_cols + id.mesh_c
    }
}

impl Transport for ThreadedCtx {
    fn send(&mut self, msg: RegionMessage) -> Result<(), RuntimeError> {
        let dst = self.wid_to_idx(msg.dst);
        if dst == self.idx {
            return Err(RuntimeError::SelfSend { idx: self.idx });
        }
        let t0 = Instant::now();
        let tx = self
            .senders
            .get(&dst)
            .ok_or_else(|| RuntimeError::Protocol(format!("no channel to worker {dst}")))?;
        tx.send(msg)
            .map_err(|_| RuntimeError::Protocol(format!("worker {dst} hung up")))?;
        self.stats.comm_units += t0.elapsed().as_secs_f64();
        self.stats.messages_sent += 1;
        Ok(())
    }

    fn recv(&mut self, phase: PhaseTag, src: WorkerId) -> Result<RegionMessage, RuntimeError> {
        let src_idx = self.wid_to_idx(src);
        let rx = self
            .receivers
            .get(&src_idx)
            .ok_or_else(|| RuntimeError::Protocol(format!("no channel from worker {src_idx}")))?;
        let t0 = Instant::now();
        let msg = rx.recv().map_err(|_| {
            RuntimeError::Protocol(format!(
                "worker {src_idx} exited while {} awaited {phase:?}",
                self.idx
            ))
        })?;
        self.stats.wait_units += t0.elapsed().as_secs_f64();
        if msg.phase_tag != phase {
            return Err(RuntimeError::Protocol(format!(
                "worker {} expected {:?} from {src_idx}, got {:?}",
                self.idx, phase, msg.phase_tag
            )));
        }
        Ok(msg)
    }

    fn account_compute(&mut self, _units: f64, wall: Duration) {
        self.stats.compute_units += wall.as_secs_f64();
    }

    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

/// Run worker bodies on free-running threads, one per mesh cell in row-major
/// order.
pub fn run_threaded<R: Send>(
    mesh: crate::geometry::MeshSpec,
    bodies: Vec<BodyFn<R>>,
) -> Result<EngineOutcome<R>, RuntimeError> {
    assert_eq!(bodies.len(), mesh.worker_count());
    run_threaded_mesh(mesh.cols, bodies)
}

fn run_threaded_mesh<R: Send>(
    mesh_cols: usize,
    bodies: Vec<BodyFn<R>>,
) -> Result<EngineOutcome<R>, RuntimeError> {
    let n = bodies.len();
    // channels for every ordered pair
    let mut txs: Vec<BTreeMap<usize, Sender<RegionMessage>>> = (0..n).map(|_| BTreeMap::new()).collect();
    let mut rxs: Vec<BTreeMap<usize, Receiver<RegionMessage>>> =
        (0..n).map(|_| BTreeMap::new()).collect();
    for src in 0..n {
        for dst in 0..n {
            if src == dst {
                continue;
            }
            let (tx, rx) = channel();
            txs[src].insert(dst, tx);
            rxs[dst].insert(src, rx);
        }
    }

    let start = Instant::now();
    let mut joined: Vec<Option<Result<(R, TimingBreakdown), RuntimeError>>> =
        (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (idx, body) in bodies.into_iter().enumerate() {
            let senders = std::mem::take(&mut txs[idx]);
            let receivers = std::mem::take(&mut rxs[idx]);
            handles.push(scope.spawn(move || {
                let mut ctx = ThreadedCtx {
                    idx,
                    mesh_cols,
                    senders,
                    receivers,
                    stats: TimingBreakdown::default(),
                    start,
                };
                let out = body(&mut ctx)?;
                Ok::<_, RuntimeError>((out, ctx.stats))
            }));
        }
        for (idx, h) in handles.into_iter().enumerate() {
            joined[idx] = Some(h.join().unwrap_or(Err(RuntimeError::WorkerPanic)));
        }
    });

    let mut results = Vec::with_capacity(n);
    let mut timing = Vec::with_capacity(n);
    for j in joined {
        let (r, t) = j.expect("joined")?;
        results.push(r);
        timing.push(t);
    }
    Ok(EngineOutcome {
        results,
        timing,
        trace: None,
    })
}
