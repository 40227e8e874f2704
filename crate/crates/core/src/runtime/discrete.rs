//! Single-threaded, tick-based executor for co-hosted ranks.
//!
//! Each rank gets `workers` virtual workers. A round visits the ranks in
//! order: poll the network, start ready leaves on idle workers, post
//! messages. Then virtual time advances one tick and finished leaves are
//! completed. Given the seed, every run is identical, including stats,
//! traces and transport audit logs. With `fuzz` set, the ready leaf to start
//! is drawn at random and leaf durations vary, which explores different
//! legal schedules.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::threaded::Termination;
use super::{LeafJob, Program, RankEngine, RunConfig, RunOutcome};
use crate::error::{Error, Result};
use crate::observe::TraceEvent;
use crate::protocol::MessageType;
use crate::transport::{SimEndpoint, SimNet, Transport};

/// Virtual nanoseconds per tick, for trace stamps.
pub const TICK_NS: u64 = 1000;

/// Longest fuzzed leaf duration in ticks.
const MAX_FUZZ_TICKS: u64 = 8;

struct Running {
    job: LeafJob,
    start: u64,
    finish: u64,
}

struct RankSim {
    engine: RankEngine,
    endpoint: SimEndpoint,
    term: Termination,
    workers: Vec<Option<Running>>,
    leaf_events: Vec<TraceEvent>,
    done: bool,
}

pub fn run(
    program: Arc<dyn Program>,
    net: SimNet,
    endpoints: Vec<SimEndpoint>,
    config: &RunConfig,
) -> Result<RunOutcome> {
    let ranks = endpoints.len();
    let mut sims = Vec::with_capacity(ranks);
    for ep in endpoints {
        let me = ep.rank();
        let mut engine = RankEngine::new(me, program.clone(), config)?;
        engine.set_virtual_time(0);
        engine.start()?;
        sims.push(RankSim {
            engine,
            endpoint: ep,
            term: Termination::new(me, ranks),
            workers: (0..config.workers).map(|_| None).collect(),
            leaf_events: Vec::new(),
            done: false,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d15c);
    let mut now: u64 = 0;
    loop {
        let mut activity = false;
        for sim in sims.iter_mut().filter(|s| !s.done) {
            sim.engine.set_virtual_time(now * TICK_NS);
            let polled = sim.endpoint.poll()?;
            activity |= !polled.is_empty();
            for msg in polled.received {
                if msg.header.msg_type == MessageType::Shutdown {
                    msg.verify()?;
                    sim.term.on_shutdown(&msg)?;
                } else {
                    sim.engine.on_message(msg)?;
                }
            }
            for slot in sim.workers.iter_mut().filter(|w| w.is_none()) {
                let n = sim.engine.ready_len();
                if n == 0 {
                    break;
                }
                let job = if config.fuzz {
                    sim.engine.take_ready_at(rng.gen_range(0..n))
                } else {
                    sim.engine.take_ready()
                }
                .expect("ready leaf");
                let ticks = if config.fuzz {
                    rng.gen_range(1..=MAX_FUZZ_TICKS)
                } else {
                    1
                };
                *slot = Some(Running {
                    job,
                    start: now,
                    finish: now + ticks,
                });
                activity = true;
            }
            let out = sim.engine.drain_outbox();
            if !out.is_empty() {
                activity = true;
                for msg in out {
                    sim.endpoint.post_send(msg)?;
                }
                sim.engine.note_pending(sim.endpoint.in_flight());
            }
            let quiescent = sim.engine.is_quiescent(sim.endpoint.in_flight());
            if sim.term.step(quiescent, &mut sim.endpoint)? {
                sim.done = true;
                activity = true;
            }
        }
        now += 1;
        let mut running = false;
        for sim in sims.iter_mut() {
            sim.engine.set_virtual_time(now * TICK_NS);
            for w in 0..sim.workers.len() {
                match &sim.workers[w] {
                    Some(r) if r.finish <= now => {}
                    Some(_) => {
                        running = true;
                        continue;
                    }
                    None => continue,
                }
                let r = sim.workers[w].take().expect("checked");
                let program = sim.engine.program().clone();
                if let Err(reason) = r.job.execute(program.as_ref(), sim.engine.is_sim()) {
                    return Err(Error::Kernel {
                        task: r.job.task_id,
                        kind: r.job.kind().to_string(),
                        reason,
                    });
                }
                if config.trace {
                    sim.leaf_events.push(TraceEvent {
                        rank: sim.engine.rank(),
                        thread: w as u32 + 1,
                        task_id: r.job.task_id,
                        kind: r.job.kind().to_string(),
                        level: 1,
                        start_ns: r.start * TICK_NS,
                        end_ns: r.finish * TICK_NS,
                    });
                }
                sim.engine.on_leaf_done(r.job.leaf)?;
                activity = true;
            }
        }
        if sims.iter().all(|s| s.done) {
            break;
        }
        if !activity && !running && net.is_idle() {
            let diag: Vec<String> = sims.iter().map(|s| s.engine.diagnostics()).collect();
            return Err(Error::Stalled(diag.join("; ")));
        }
    }
    let mut out = Vec::with_capacity(ranks);
    for mut sim in sims {
        sim.endpoint.close()?;
        sim.engine.push_events(sim.leaf_events);
        let audit = sim.endpoint.audit().clone();
        out.push(sim.engine.finish(audit)?);
    }
    Ok(RunOutcome { ranks: out })
}
