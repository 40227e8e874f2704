//! One coordinator thread per rank plus `workers` leaf threads.
//!
//! Each worker owns a deque: it pops its newest task and, when empty,
//! steals the oldest task of a randomly chosen victim. Completions flow back
//! to the coordinator over a channel; the coordinator is the only thread
//! touching the engine and the transport.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LeafJob, Placement, Program, RankEngine, RankOutcome, RunConfig, RunOutcome};
use crate::datahier::Rank;
use crate::error::{Error, Result};
use crate::observe::TraceEvent;
use crate::protocol::{Message, MessageType};
use crate::transport::Transport;

const IDLE_WAIT: Duration = Duration::from_millis(2);

enum Event {
    Done {
        leaf: u32,
        task_id: u64,
        kind: &'static str,
        result: std::result::Result<(), String>,
        trace: Option<TraceEvent>,
    },
    Wake,
}

struct Shared {
    deques: Vec<Mutex<VecDeque<LeafJob>>>,
    queued: AtomicUsize,
    idle: Mutex<()>,
    signal: Condvar,
    stop: AtomicBool,
    steals: AtomicU64,
}

impl Shared {
    fn push(&self, worker: usize, job: LeafJob) {
        self.queued.fetch_add(1, Ordering::SeqCst);
        self.deques[worker].lock().expect("deque lock").push_back(job);
    }

    fn notify(&self) {
        let _guard = self.idle.lock().expect("idle lock");
        self.signal.notify_all();
    }

    fn pop_own(&self, me: usize) -> Option<LeafJob> {
        let job = self.deques[me].lock().expect("deque lock").pop_back();
        if job.is_some() {
            self.queued.fetch_sub(1, Ordering::SeqCst);
        }
        job
    }

    fn steal(&self, me: usize, rng: &mut ChaCha8Rng) -> Option<LeafJob> {
        let n = self.deques.len();
        if n < 2 {
            return None;
        }
        let start = rng.gen_range(0..n);
        for k in 0..n {
            let victim = (start + k) % n;
            if victim == me {
                continue;
            }
            let job = self.deques[victim].lock().expect("deque lock").pop_front();
            if let Some(job) = job {
                self.queued.fetch_sub(1, Ordering::SeqCst);
                self.steals.fetch_add(1, Ordering::Relaxed);
                return Some(job);
            }
        }
        None
    }
}

struct WorkerCtx {
    rank: Rank,
    index: usize,
    seed: u64,
    sim: bool,
    trace: bool,
    epoch: Instant,
}

fn worker_loop(ctx: WorkerCtx, shared: Arc<Shared>, program: Arc<dyn Program>, tx: Sender<Event>) {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ ((ctx.rank as u64) << 32) ^ ctx.index as u64);
    while !shared.stop.load(Ordering::Acquire) {
        let job = shared.pop_own(ctx.index).or_else(|| shared.steal(ctx.index, &mut rng));
        let Some(job) = job else {
            let guard = shared.idle.lock().expect("idle lock");
            if shared.queued.load(Ordering::SeqCst) == 0 && !shared.stop.load(Ordering::Acquire) {
                let _ = shared.signal.wait_timeout(guard, IDLE_WAIT).expect("idle wait");
            }
            continue;
        };
        let start = ctx.epoch.elapsed().as_nanos() as u64;
        let result = job.execute(program.as_ref(), ctx.sim);
        let end = ctx.epoch.elapsed().as_nanos() as u64;
        let trace = ctx.trace.then(|| TraceEvent {
            rank: ctx.rank,
            thread: ctx.index as u32 + 1,
            task_id: job.task_id,
            kind: job.kind().to_string(),
            level: 1,
            start_ns: start,
            end_ns: end.max(start),
        });
        let done = Event::Done {
            leaf: job.leaf,
            task_id: job.task_id,
            kind: job.kind(),
            result,
            trace,
        };
        if tx.send(done).is_err() {
            return;
        }
    }
}

/// Termination handshake: every rank reports quiescence to rank 0, which
/// answers with SHUTDOWN once all have reported.
pub(super) struct Termination {
    me: Rank,
    ranks: usize,
    reported: bool,
    done: Vec<bool>,
    released: bool,
}

impl Termination {
    pub(super) fn new(me: Rank, ranks: usize) -> Self {
        Termination {
            me,
            ranks,
            reported: false,
            done: vec![false; ranks],
            released: false,
        }
    }

    pub(super) fn on_shutdown(&mut self, msg: &Message) -> Result<()> {
        let src = msg.header.source as usize;
        if self.me == 0 {
            if src == 0 || src >= self.ranks || self.done[src] {
                return Err(Error::Protocol(format!("stray shutdown from rank {src}")));
            }
            self.done[src] = true;
        } else if src == 0 {
            self.released = true;
        } else {
            return Err(Error::Protocol(format!("shutdown from rank {src} to rank {}", self.me)));
        }
        Ok(())
    }

    /// Advances the handshake; returns true when this rank may exit.
    pub(super) fn step(&mut self, quiescent: bool, transport: &mut dyn Transport) -> Result<bool> {
        if self.me == 0 {
            if quiescent && self.done.iter().skip(1).all(|&d| d) {
                for r in 1..self.ranks {
                    transport.post_send(Message::shutdown(0, r as Rank))?;
                }
                transport.begin_shutdown();
                return Ok(true);
            }
            Ok(false)
        } else {
            if quiescent && !self.reported {
                transport.post_send(Message::shutdown(self.me, 0))?;
                transport.begin_shutdown();
                self.reported = true;
            }
            Ok(self.released)
        }
    }
}

fn coordinate(
    program: Arc<dyn Program>,
    mut transport: Box<dyn Transport>,
    config: &RunConfig,
    abort: &AtomicBool,
) -> Result<RankOutcome> {
    let me = transport.rank();
    let ranks = transport.ranks();
    let epoch = Instant::now();
    let mut engine = RankEngine::new(me, program.clone(), config)?;
    engine.set_epoch(epoch);
    let (tx, rx) = mpsc::channel::<Event>();
    {
        let tx = Mutex::new(tx.clone());
        transport.set_waker(Arc::new(move || {
            let _ = tx.lock().expect("waker lock").send(Event::Wake);
        }));
    }
    let shared = Arc::new(Shared {
        deques: (0..config.workers).map(|_| Mutex::new(VecDeque::new())).collect(),
        queued: AtomicUsize::new(0),
        idle: Mutex::new(()),
        signal: Condvar::new(),
        stop: AtomicBool::new(false),
        steals: AtomicU64::new(0),
    });
    let handles: Vec<_> = (0..config.workers)
        .map(|w| {
            let ctx = WorkerCtx {
                rank: me,
                index: w,
                seed: config.seed,
                sim: config.sim,
                trace: config.trace,
                epoch,
            };
            let (shared, program, tx) = (shared.clone(), program.clone(), tx.clone());
            thread::Builder::new()
                .name(format!("rank{me}-worker{w}"))
                .spawn(move || worker_loop(ctx, shared, program, tx))
                .map_err(Error::Io)
        })
        .collect::<Result<_>>()?;
    drop(tx);
    let result = drive(&mut engine, transport.as_mut(), &shared, &rx, config, abort, me, ranks);
    shared.stop.store(true, Ordering::Release);
    shared.notify();
    for h in handles {
        let _ = h.join();
    }
    if result.is_err() {
        abort.store(true, Ordering::Release);
    }
    result?;
    transport.close()?;
    engine.note_steals(shared.steals.load(Ordering::Relaxed));
    engine.finish(transport.audit().clone())
}

#[allow(clippy::too_many_arguments)]
fn drive(
    engine: &mut RankEngine,
    transport: &mut dyn Transport,
    shared: &Shared,
    rx: &Receiver<Event>,
    config: &RunConfig,
    abort: &AtomicBool,
    me: Rank,
    ranks: usize,
) -> Result<()> {
    let mut term = Termination::new(me, ranks);
    let mut round_robin = 0usize;
    let mut last_progress = Instant::now();
    let mut leaf_events = Vec::new();
    engine.start()?;
    let handle = |engine: &mut RankEngine, ev: Event, leaf_events: &mut Vec<TraceEvent>| -> Result<bool> {
        match ev {
            Event::Done {
                leaf,
                task_id,
                kind,
                result,
                trace,
            } => {
                if let Err(reason) = result {
                    return Err(Error::Kernel {
                        task: task_id,
                        kind: kind.to_string(),
                        reason,
                    });
                }
                leaf_events.extend(trace);
                engine.on_leaf_done(leaf)?;
                Ok(true)
            }
            Event::Wake => Ok(false),
        }
    };
    loop {
        if abort.load(Ordering::Acquire) {
            return Err(Error::Aborted);
        }
        let mut progressed = false;
        let polled = transport.poll()?;
        progressed |= !polled.is_empty();
        for msg in polled.received {
            if msg.header.msg_type == MessageType::Shutdown {
                msg.verify()?;
                term.on_shutdown(&msg)?;
            } else {
                engine.on_message(msg)?;
            }
        }
        while let Ok(ev) = rx.try_recv() {
            progressed |= handle(engine, ev, &mut leaf_events)?;
        }
        let mut dispatched = false;
        while let Some(job) = engine.take_ready() {
            let w = match config.placement {
                Placement::Locality => (job.affinity % config.workers as u64) as usize,
                Placement::RoundRobin => {
                    round_robin += 1;
                    round_robin % config.workers
                }
                Placement::Pinned(w) => w,
            };
            shared.push(w, job);
            dispatched = true;
        }
        if dispatched {
            shared.notify();
            progressed = true;
        }
        let out = engine.drain_outbox();
        if !out.is_empty() {
            progressed = true;
            for msg in out {
                transport.post_send(msg)?;
            }
            engine.note_pending(transport.in_flight());
        }
        let quiescent = engine.is_quiescent(transport.in_flight());
        if term.step(quiescent, transport)? {
            // Let the final SHUTDOWN messages leave before closing.
            let deadline = Instant::now() + config.stall_timeout;
            while transport.in_flight() > 0 {
                transport.poll()?;
                if Instant::now() > deadline {
                    return Err(Error::Stalled(format!("rank {me}: shutdown messages never completed")));
                }
                thread::sleep(Duration::from_micros(200));
            }
            engine.push_events(leaf_events);
            return Ok(());
        }
        if progressed {
            last_progress = Instant::now();
            continue;
        }
        if last_progress.elapsed() > config.stall_timeout {
            return Err(Error::Stalled(engine.diagnostics()));
        }
        match rx.recv_timeout(Duration::from_millis(1)) {
            Ok(ev) => {
                if handle(engine, ev, &mut leaf_events)? {
                    last_progress = Instant::now();
                }
            }
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {}
        }
    }
}

/// Runs every transport's rank on its own coordinator thread and joins them.
pub fn run_ranks(
    program: Arc<dyn Program>,
    transports: Vec<Box<dyn Transport>>,
    config: &RunConfig,
) -> Result<RunOutcome> {
    let abort = AtomicBool::new(false);
    let results: Vec<Result<RankOutcome>> = thread::scope(|s| {
        let handles: Vec<_> = transports
            .into_iter()
            .map(|t| {
                let program = program.clone();
                let abort = &abort;
                thread::Builder::new()
                    .name(format!("rank{}-coord", t.rank()))
                    .spawn_scoped(s, move || coordinate(program, t, config, abort))
                    .expect("spawn coordinator")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Protocol("coordinator panicked".into())))
            })
            .collect()
    });
    let mut ranks = Vec::with_capacity(results.len());
    let mut first_err = None;
    for r in results {
        match r {
            Ok(o) => ranks.push(o),
            Err(Error::Aborted) => {
                first_err.get_or_insert(Error::Aborted);
            }
            Err(e) => {
                if matches!(first_err, None | Some(Error::Aborted)) {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    ranks.sort_by_key(|r| r.stats.rank);
    Ok(RunOutcome { ranks })
}
