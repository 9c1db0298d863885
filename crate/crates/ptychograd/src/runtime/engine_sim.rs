//! Deterministic cooperative scheduler with simulated time.
//!
//! Exactly one worker runs at a time. A worker keeps the token until it
//! blocks on a receive or finishes; the token then moves to the lowest-index
//! runnable worker. Send costs advance the sender's clock, receives advance
//! the receiver's to the payload arrival time, and a blocked set with no
//! runnable worker is reported as a deadlock.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use super::{
    BodyFn, CostModel, EngineOutcome, PhaseTag, RegionMessage, RuntimeError, TimingBreakdown,
    TraceEvent, TraceKind, Transport, WorkerId,
};

struct SimState {
    token: Option<usize>,
    runnable: BTreeSet<usize>,
    blocked: BTreeMap<usize, (PhaseTag, usize)>,
    queues: BTreeMap<(usize, usize), VecDeque<(RegionMessage, f64)>>,
    clocks: Vec<f64>,
    stats: Vec<TimingBreakdown>,
    trace: Vec<TraceEvent>,
    finished: BTreeSet<usize>,
    failed: Option<String>,
    order: u64,
}

impl SimState {
    fn grant_next(&mut self, n: usize) {
        if let Some(&next) = self.runnable.iter().next() {
            self.runnable.remove(&next);
            self.token = Some(next);
        } else {
            self.token = None;
            if self.finished.len() < n && !self.blocked.is_empty() && self.failed.is_none() {
                let waiting: Vec<String> = self
                    .blocked
                    .iter()
                    .map(|(w, (phase, src))| format!("worker {w} awaits {phase:?} from {src}"))
                    .collect();
                self.failed = Some(waiting.join("; "));
            }
        }
    }
}

struct SimShared {
    n: usize,
    cost: CostModel,
    state: Mutex<SimState>,
    cv: Condvar,
}

pub(crate) struct SimCtx {
    shared: Arc<SimShared>,
    idx: usize,
    mesh_cols: usize,
}

impl SimCtx {
    fn wid_to_idx(&self, id: WorkerId) -> usize {
        id.mesh_r * self.mesh_cols + id.mesh_c
    }
}

impl Transport for SimCtx {
    fn send(&mut self, msg: RegionMessage) -> Result<(), RuntimeError> {
        let dst = self.wid_to_idx(msg.dst);
        let src = self.wid_to_idx(msg.src);
        if src != self.idx {
            return Err(RuntimeError::Protocol(format!(
                "worker {} sent a message labeled src={src}",
                self.idx
            )));
        }
        if dst == self.idx {
            return Err(RuntimeError::SelfSend { idx: self.idx });
        }
        if dst >= self.shared.n {
            return Err(RuntimeError::Protocol(format!("bad destination {dst}")));
        }
        let mut st = self.shared.state.lock().unwrap();
        if let Some(msg_text) = &st.failed {
            return Err(RuntimeError::DeadlockDetected {
                waiting: msg_text.clone(),
            });
        }
        let cost = self.shared.cost.comm_per_message
            + self.shared.cost.comm_per_voxel * msg.payload.len() as f64;
        st.clocks[self.idx] += cost;
        st.stats[self.idx].comm_units += cost;
        st.stats[self.idx].messages_sent += 1;
        let arrival = st.clocks[self.idx];
        let order = st.order;
        st.order += 1;
        let sim_time = st.clocks[self.idx];
        st.trace.push(TraceEvent {
            order,
            sim_time,
            worker: self.idx,
            kind: TraceKind::Send {
                dst,
                phase: msg.phase_tag,
                voxels: msg.payload.len(),
            },
        });
        let phase = msg.phase_tag;
        st.queues
            .entry((src, dst))
            .or_default()
            .push_back((msg, arrival));
        if let Some(&(want_phase, want_src)) = st.blocked.get(&dst) {
            if want_phase == phase && want_src == src {
                st.blocked.remove(&dst);
                st.runnable.insert(dst);
            }
        }
        Ok(())
    }

    fn recv(&mut self, phase: PhaseTag, src: WorkerId) -> Result<RegionMessage, RuntimeError> {
        let src_idx = self.wid_to_idx(src);
        let mut st = self.shared.state.lock().unwrap();
        loop {
            if let Some(msg_text) = &st.failed {
                return Err(RuntimeError::DeadlockDetected {
                    waiting: msg_text.clone(),
                });
            }
            let has_msg = st
                .queues
                .get(&(src_idx, self.idx))
                .is_some_and(|q| !q.is_empty());
            if st.token == Some(self.idx) && has_msg {
                let (msg, arrival) = st
                    .queues
                    .get_mut(&(src_idx, self.idx))
                    .unwrap()
                    .pop_front()
                    .unwrap();
                if msg.phase_tag != phase {
                    let err = format!(
                        "worker {} expected {:?} from {} but queue head is {:?}",
                        self.idx, phase, src_idx, msg.phase_tag
                    );
                    st.failed = Some(err.clone());
                    self.shared.cv.notify_all();
                    return Err(RuntimeError::Protocol(err));
                }
                let waited = (arrival - st.clocks[self.idx]).max(0.0);
                st.stats[self.idx].wait_units += waited;
                st.clocks[self.idx] = st.clocks[self.idx].max(arrival);
                let order = st.order;
                st.order += 1;
                let sim_time = st.clocks[self.idx];
                st.trace.push(TraceEvent {
                    order,
                    sim_time,
                    worker: self.idx,
                    kind: TraceKind::Recv {
                        src: src_idx,
                        phase,
                        waited,
                    },
                });
                return Ok(msg);
            }
            if st.token == Some(self.idx) {
                // nothing to read: yield the token and park
                st.blocked.insert(self.idx, (phase, src_idx));
                st.grant_next(self.shared.n);
                self.shared.cv.notify_all();
            }
            st = self.shared.cv.wait(st).unwrap();
        }
    }

    fn account_compute(&mut self, units: f64, _wall: Duration) {
        let mut st = self.shared.state.lock().unwrap();
        st.clocks[self.idx] += units;
        st.stats[self.idx].compute_units += units;
    }

    fn now(&self) -> f64 {
        self.shared.state.lock().unwrap().clocks[self.idx]
    }
}

/// Run worker bodies under the cooperative scheduler, one per mesh cell in
/// row-major order. Deterministic: the token always moves to the
/// lowest-index runnable worker.
pub fn run_cooperative<R: Send>(
    mesh: crate::geometry::MeshSpec,
    cost: CostModel,
    bodies: Vec<BodyFn<R>>,
) -> Result<EngineOutcome<R>, RuntimeError> {
    let n = mesh.worker_count();
    assert_eq!(bodies.len(), n);
    run_cooperative_mesh(n, mesh.cols, cost, bodies)
}

fn run_cooperative_mesh<R: Send>(
    n: usize,
    mesh_cols: usize,
    cost: CostModel,
    bodies: Vec<BodyFn<R>>,
) -> Result<EngineOutcome<R>, RuntimeError> {
    let shared = Arc::new(SimShared {
        n,
        cost,
        state: Mutex::new(SimState {
            token: None,
            runnable: (0..n).collect(),
            blocked: BTreeMap::new(),
            queues: BTreeMap::new(),
            clocks: vec![0.0; n],
            stats: vec![TimingBreakdown::default(); n],
            trace: Vec::new(),
            finished: BTreeSet::new(),
            failed: None,
            order: 0,
        }),
        cv: Condvar::new(),
    });
    shared.state.lock().unwrap().grant_next(n);

    let mut results: Vec<Option<Result<R, RuntimeError>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (idx, body) in bodies.into_iter().enumerate() {
            let shared = Arc::clone(&shared);
            handles.push(scope.spawn(move || {
                // wait for the first grant
                {
                    let mut st = shared.state.lock().unwrap();
                    while st.token != Some(idx) && st.failed.is_none() {
                        st = shared.cv.wait(st).unwrap();
                    }
                    if let Some(m) = &st.failed {
                        return Err(RuntimeError::DeadlockDetected { waiting: m.clone() });
                    }
                }
                let mut ctx = SimCtx {
                    shared: Arc::clone(&shared),
                    idx,
                    mesh_cols,
                };
                let out = body(&mut ctx);
                let mut st = shared.state.lock().unwrap();
                st.finished.insert(idx);
                if out.is_err() && st.failed.is_none() {
                    st.failed = Some(format!("worker {idx} failed"));
                }
                if st.token == Some(idx) {
                    st.grant_next(n);
                }
                shared.cv.notify_all();
                out
            }));
        }
        for (idx, h) in handles.into_iter().enumerate() {
            results[idx] = Some(h.join().map_err(|_| RuntimeError::WorkerPanic).and_then(|r| r));
        }
    });

    let st = Arc::try_unwrap(shared)
        .map_err(|_| RuntimeError::Protocol("scheduler state still shared".into()))?
        .state
        .into_inner()
        .unwrap();

    let mut out = Vec::with_capacity(n);
    for r in results {
        out.push(r.expect("worker result")?);
    }
    Ok(EngineOutcome {
        results: out,
        timing: st.stats,
        trace: Some(st.trace),
    })
}
