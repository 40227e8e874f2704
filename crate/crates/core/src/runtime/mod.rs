//! Two-level task engine.
//!
//! Every rank traverses the same sequence of level-0 statements. Each
//! statement registers its block accesses on every rank, so required
//! versions agree everywhere, but only the owner of the first output runs
//! it. A running level-0 task expands into leaf children over the tiles of
//! its blocks; the children run on worker threads.
//!
//! [`RankEngine`] holds all per-rank state and performs no I/O. Two
//! executors drive it: [`threaded`] (one coordinator thread per rank plus
//! work-stealing workers) and [`discrete`] (single-threaded, tick based and
//! fully deterministic).

use std::cell::Cell;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use crate::datahier::{DataDescriptor, DataId};
use crate::error::{Error, Result};
use crate::mempool::ContentPtr;
use crate::observe::{RankStats, SimStats, TraceEvent};
use crate::transport::{AuditLog, Latency, SimNet, SimNetConfig};
use crate::versioning::{AccessType, HandleId, Version};

pub mod discrete;
mod engine;
pub mod threaded;

pub use engine::{LeafJob, RankEngine};

/// One block access of a level-0 statement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockAccess {
    pub data: DataId,
    pub i: usize,
    pub j: usize,
    pub ty: AccessType,
}

impl BlockAccess {
    pub fn new(data: DataId, i: usize, j: usize, ty: AccessType) -> Self {
        BlockAccess { data, i, j, ty }
    }
}

/// A level-0 task submission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement {
    pub kind: &'static str,
    pub accesses: Vec<BlockAccess>,
    pub args: [usize; 4],
}

impl Statement {
    pub fn new(kind: &'static str, args: [usize; 4]) -> Self {
        Statement {
            kind,
            accesses: Vec::new(),
            args,
        }
    }

    pub fn access(mut self, data: DataId, i: usize, j: usize, ty: AccessType) -> Self {
        self.accesses.push(BlockAccess::new(data, i, j, ty));
        self
    }
}

/// One tile access of a leaf child. `arg` indexes the parent's accesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileAccess {
    pub arg: u16,
    pub ti: u16,
    pub tj: u16,
    pub ty: AccessType,
}

/// A leaf task created by a parent body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Child {
    pub kind: &'static str,
    pub accesses: Vec<TileAccess>,
    pub args: [usize; 4],
}

impl Child {
    pub fn new(kind: &'static str, args: [usize; 4]) -> Self {
        Child {
            kind,
            accesses: Vec::with_capacity(3),
            args,
        }
    }

    /// Adds a tile access and returns its index. A repeated read of the
    /// same tile reuses the earlier index.
    pub fn tile(&mut self, arg: usize, ti: usize, tj: usize, ty: AccessType) -> usize {
        let ta = TileAccess {
            arg: arg as u16,
            ti: ti as u16,
            tj: tj as u16,
            ty,
        };
        if ty == AccessType::Read {
            if let Some(k) = self
                .accesses
                .iter()
                .position(|a| a.arg == ta.arg && a.ti == ta.ti && a.tj == ta.tj && a.ty == AccessType::Read)
            {
                return k;
            }
        }
        self.accesses.push(ta);
        self.accesses.len() - 1
    }

    pub fn with(mut self, arg: usize, ti: usize, tj: usize, ty: AccessType) -> Self {
        self.tile(arg, ti, tj, ty);
        self
    }
}

/// Tile contents handed to a leaf kernel, one entry per child access.
pub struct Tiles<'a> {
    ptrs: &'a [ContentPtr],
    child: &'a Child,
    lent: Cell<u64>,
}

impl<'a> Tiles<'a> {
    pub(crate) fn new(ptrs: &'a [ContentPtr], child: &'a Child) -> Self {
        assert!(ptrs.len() == child.accesses.len() && ptrs.len() <= 64);
        Tiles {
            ptrs,
            child,
            lent: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.ptrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ptrs.is_empty()
    }

    pub fn access(&self, k: usize) -> TileAccess {
        self.child.accesses[k]
    }

    /// Shared view of access `k`.
    pub fn read(&self, k: usize) -> &'a [f64] {
        assert!(self.lent.get() & (1 << k) == 0, "tile {k} is lent mutably");
        // Safety: versioning grants this task read access to the tile and
        // no mutable view of it exists (checked above).
        unsafe { self.ptrs[k].as_slice() }
    }

    /// Mutable view of output access `k`; may be taken once.
    #[allow(clippy::mut_from_ref)]
    pub fn write(&self, k: usize) -> &'a mut [f64] {
        assert!(self.child.accesses[k].ty.is_output(), "tile {k} is not an output");
        let lent = self.lent.get();
        assert!(lent & (1 << k) == 0, "tile {k} lent twice");
        self.lent.set(lent | (1 << k));
        // Safety: the exclusive token of this tile is held by the task and
        // this is the only view handed out for it.
        unsafe { self.ptrs[k].as_mut_slice() }
    }
}

/// A program run identically by every rank.
pub trait Program: Send + Sync + 'static {
    /// Distributed arrays; `data()[k].id()` must be `DataId(k)`.
    fn data(&self) -> &[DataDescriptor];

    /// Number of macro steps admitted through the pacing window.
    fn steps(&self) -> usize;

    /// Level-0 statements of macro step `step`, in program order.
    fn step(&self, step: usize, out: &mut Vec<Statement>);

    /// Leaf children of `stmt`, in submission order.
    fn expand(&self, stmt: &Statement, out: &mut Vec<Child>);

    /// Initial content of an owned block.
    fn init_block(&self, data: DataId, i: usize, j: usize, content: &mut [f64]);

    fn run_leaf(&self, child: &Child, tiles: &Tiles<'_>) -> std::result::Result<(), String>;

    /// Work of one leaf task in flop-proportional units.
    fn leaf_work(&self) -> u64 {
        1
    }
}

/// How the threaded executor picks the deque for a ready leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Placement {
    /// Hash of the first output tile, so repeated updates stay on one worker.
    #[default]
    Locality,
    RoundRobin,
    /// Everything to one worker; the rest must steal.
    Pinned(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecutorKind {
    #[default]
    Threaded,
    Discrete,
}

impl fmt::Display for ExecutorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecutorKind::Threaded => "threaded",
            ExecutorKind::Discrete => "discrete",
        })
    }
}

impl std::str::FromStr for ExecutorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threaded" => Ok(ExecutorKind::Threaded),
            "discrete" => Ok(ExecutorKind::Discrete),
            other => Err(Error::Parse(format!("unknown executor `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub workers: usize,
    /// Macro steps in flight per rank.
    pub window: usize,
    pub seed: u64,
    /// Empty kernels and one-byte messages.
    pub sim: bool,
    pub trace: bool,
    pub placement: Placement,
    /// Re-check every leaf's versions and tokens right before it starts.
    pub debug_checks: bool,
    /// Keep the (handle, required version) log of every level-0 access.
    pub record_versions: bool,
    pub executor: ExecutorKind,
    /// SimNet latency model.
    pub latency: Latency,
    /// Discrete executor: random ready-task choice and leaf durations.
    pub fuzz: bool,
    /// Threaded executor: give up if nothing happens for this long.
    pub stall_timeout: Duration,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            workers: 1,
            window: 4,
            seed: 0,
            sim: false,
            trace: false,
            placement: Placement::Locality,
            debug_checks: cfg!(debug_assertions),
            record_versions: false,
            executor: ExecutorKind::Threaded,
            latency: Latency::Fixed(0),
            fuzz: false,
            stall_timeout: Duration::from_secs(60),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("at least one worker per rank is required".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("the pacing window must be at least 1".into()));
        }
        if let Placement::Pinned(w) = self.placement {
            if w >= self.workers {
                return Err(Error::Config(format!("pinned worker {w} does not exist")));
            }
        }
        Ok(())
    }
}

/// Owned block content gathered at the end of a real-mode run.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockData {
    pub data: DataId,
    pub i: usize,
    pub j: usize,
    pub content: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RankOutcome {
    pub stats: RankStats,
    pub audit: AuditLog,
    pub trace: Vec<TraceEvent>,
    pub versions: Vec<(HandleId, Version)>,
    pub blocks: Vec<BlockData>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub ranks: Vec<RankOutcome>,
}

impl RunOutcome {
    pub fn stats(&self) -> SimStats {
        SimStats::new(self.ranks.iter().map(|r| r.stats.clone()).collect())
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        self.ranks.iter().flat_map(|r| r.trace.iter().cloned()).collect()
    }

    /// Final content of block `(i, j)` of `data`, from whichever rank owns it.
    pub fn block(&self, data: DataId, i: usize, j: usize) -> Option<&[f64]> {
        self.ranks
            .iter()
            .flat_map(|r| r.blocks.iter())
            .find(|b| b.data == data && b.i == i && b.j == j)
            .map(|b| b.content.as_slice())
    }
}

fn check_program(program: &dyn Program, ranks: usize) -> Result<()> {
    for (k, d) in program.data().iter().enumerate() {
        if d.id() != DataId(k as u32) {
            return Err(Error::Config(format!("data descriptor {k} carries id {}", d.id().0)));
        }
        if d.grid().ranks() != ranks {
            return Err(Error::Config(format!(
                "array {k} is distributed over a {} grid but the run has {ranks} rank(s)",
                d.grid()
            )));
        }
    }
    Ok(())
}

/// Runs `program` on `ranks` co-hosted ranks connected by a SimNet.
pub fn run_simnet(program: Arc<dyn Program>, ranks: usize, config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    check_program(program.as_ref(), ranks)?;
    let net_cfg = SimNetConfig {
        seed: config.seed,
        latency: config.latency,
        capacity: usize::MAX,
    };
    let (net, endpoints) = SimNet::create(ranks, net_cfg)?;
    match config.executor {
        ExecutorKind::Threaded => {
            let transports = endpoints
                .into_iter()
                .map(|e| Box::new(e) as Box<dyn crate::transport::Transport>)
                .collect();
            threaded::run_ranks(program, transports, config)
        }
        ExecutorKind::Discrete => discrete::run(program, net, endpoints, config),
    }
}

/// Runs a single rank of a multi-process job over `transport`.
pub fn run_rank(
    program: Arc<dyn Program>,
    transport: Box<dyn crate::transport::Transport>,
    config: &RunConfig,
) -> Result<RankOutcome> {
    config.validate()?;
    check_program(program.as_ref(), transport.ranks())?;
    let mut out = threaded::run_ranks(program, vec![transport], config)?;
    Ok(out.ranks.remove(0))
}
