use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::hash::BuildHasherDefault;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use super::{BlockData, Child, Program, RankOutcome, RunConfig, Statement, Tiles};
use crate::datahier::{DataDescriptor, DataId, Rank, TileLayout};
use crate::error::{Error, Result};
use crate::mempool::{BlockHeader, BlockId, ContentPtr, Pool, HEADER_SIZE};
use crate::observe::{RankStats, TraceEvent};
use crate::protocol::{scan_submission, ListenerTable, Message, MessageType, ScannedAccess, TrafficLedger};
use crate::transport::AuditLog;
use crate::versioning::{AccessRequest, AccessType, HandleId, HandleState, Readiness, Version};

/// Hash map with a fixed hasher, so runs do not depend on a random seed.
type DetMap<K, V> = HashMap<K, V, BuildHasherDefault<DefaultHasher>>;

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskRef {
    Parent(u32),
    Leaf(u32),
}

/// A received remote block version and the local tasks that will read it.
#[derive(Debug)]
struct CopySlot {
    block: Option<BlockId>,
    tiles: u32,
    waiters: Vec<u32>,
    /// Registered local accesses that have not finished yet.
    uses: u32,
    /// No further local access can be registered for this version.
    closed: bool,
}

struct Slot {
    state: HandleState<u32>,
    owner: Rank,
    /// Block and tile set of the resident owned version.
    owned: Option<(BlockId, u32)>,
    copies: BTreeMap<Version, CopySlot>,
    /// Listeners already shipped for the current access group.
    fired: Vec<(Version, Rank)>,
}

struct TileSet {
    states: Vec<HandleState<u32>>,
    content: ContentPtr,
    tile_elements: usize,
}

#[derive(Debug, Clone, Copy)]
struct ParentAccess {
    req: AccessRequest,
    remote: bool,
    tiles: u32,
}

struct ParentTask {
    id: u64,
    step: usize,
    stmt: Statement,
    accesses: Vec<ParentAccess>,
    pending: usize,
}

struct LeafTask {
    parent: u32,
    id: u64,
    reqs: Vec<(u32, u32, AccessRequest)>,
    child: Option<Child>,
}

/// A leaf ready to run, detached from engine state.
#[derive(Debug)]
pub struct LeafJob {
    pub leaf: u32,
    pub task_id: u64,
    pub child: Child,
    pub ptrs: Vec<ContentPtr>,
    /// Stable hash of the first output tile.
    pub affinity: u64,
}

impl LeafJob {
    pub fn kind(&self) -> &'static str {
        self.child.kind
    }

    /// Runs the kernel, converting a panic into an error string.
    pub fn execute(&self, program: &dyn Program, sim: bool) -> std::result::Result<(), String> {
        if sim {
            return Ok(());
        }
        let tiles = Tiles::new(&self.ptrs, &self.child);
        match panic::catch_unwind(AssertUnwindSafe(|| program.run_leaf(&self.child, &tiles))) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "kernel panicked".into())),
        }
    }
}

enum Clock {
    Wall(Instant),
    Virtual(u64),
}

/// All state of one rank. Every method runs on the rank's coordinator.
pub struct RankEngine {
    me: Rank,
    program: Arc<dyn Program>,
    descs: Vec<DataDescriptor>,
    layouts: Vec<TileLayout>,
    slots: Vec<Vec<Option<Slot>>>,
    pool: Pool,
    tilesets: Vec<Option<TileSet>>,
    free_tilesets: Vec<u32>,
    parents: Vec<Option<ParentTask>>,
    free_parents: Vec<u32>,
    leaves: Vec<Option<LeafTask>>,
    free_leaves: Vec<u32>,
    listeners: ListenerTable,
    ledger: TrafficLedger,
    early: DetMap<(HandleId, Version), Message>,
    wake: VecDeque<TaskRef>,
    ready: VecDeque<LeafJob>,
    outbox: Vec<Message>,
    sim: bool,
    trace: bool,
    debug_checks: bool,
    record_versions: bool,
    window: usize,
    steps: usize,
    next_step: usize,
    inflight_steps: usize,
    step_live: DetMap<usize, usize>,
    next_stmt: u64,
    live_parents: usize,
    live_leaves: usize,
    stats: RankStats,
    events: Vec<TraceEvent>,
    versions: Vec<(HandleId, Version)>,
    clock: Clock,
    stmt_buf: Vec<Statement>,
    child_buf: Vec<Child>,
}

impl RankEngine {
    pub fn new(me: Rank, program: Arc<dyn Program>, config: &RunConfig) -> Result<Self> {
        let descs = program.data().to_vec();
        let layouts: Vec<TileLayout> = descs.iter().map(DataDescriptor::layout).collect();
        let sim = config.sim;
        let mut owned_bytes = 0;
        let mut slots = Vec::with_capacity(descs.len());
        for d in &descs {
            let (br, bc) = d.block_grid();
            let mut row: Vec<Option<Slot>> = (0..br * bc).map(|_| None).collect();
            for (i, j) in d.blocks() {
                let owner = d.owner_of(i, j)?;
                if owner == me {
                    owned_bytes += HEADER_SIZE + if sim { 0 } else { d.block_bytes() };
                }
                row[i * bc + j] = Some(Slot {
                    state: HandleState::new(d.handle_id(i, j)),
                    owner,
                    owned: None,
                    copies: BTreeMap::new(),
                    fired: Vec::new(),
                });
            }
            slots.push(row);
        }
        let pool = Pool::init(owned_bytes.max(1 << 16) + owned_bytes / 4)?;
        let mut engine = RankEngine {
            me,
            steps: program.steps(),
            program,
            descs,
            layouts,
            slots,
            pool,
            tilesets: Vec::new(),
            free_tilesets: Vec::new(),
            parents: Vec::new(),
            free_parents: Vec::new(),
            leaves: Vec::new(),
            free_leaves: Vec::new(),
            listeners: ListenerTable::new(),
            ledger: TrafficLedger::new(),
            early: DetMap::default(),
            wake: VecDeque::new(),
            ready: VecDeque::new(),
            outbox: Vec::new(),
            sim,
            trace: config.trace,
            debug_checks: config.debug_checks,
            record_versions: config.record_versions,
            window: config.window,
            next_step: 0,
            inflight_steps: 0,
            step_live: DetMap::default(),
            next_stmt: 0,
            live_parents: 0,
            live_leaves: 0,
            stats: RankStats {
                rank: me,
                ..Default::default()
            },
            events: Vec::new(),
            versions: Vec::new(),
            clock: Clock::Wall(Instant::now()),
            stmt_buf: Vec::new(),
            child_buf: Vec::new(),
        };
        engine.allocate_owned()?;
        Ok(engine)
    }

    fn allocate_owned(&mut self) -> Result<()> {
        for d in 0..self.descs.len() {
            let desc = self.descs[d].clone();
            let blocks: Vec<(usize, usize)> = desc.blocks().collect();
            for (i, j) in blocks {
                if desc.owner_of(i, j)? != self.me {
                    continue;
                }
                let h = desc.handle_id(i, j);
                let len = if self.sim { 0 } else { desc.block_bytes() };
                let block = self.pool.acquire(h, Version::ZERO, len, self.me)?;
                if !self.sim {
                    let content = self.pool.content(block)?;
                    // Safety: freshly acquired and not yet visible to any task.
                    let dst = unsafe { content.as_mut_slice() };
                    dst.fill(0.0);
                    self.program.init_block(desc.id(), i, j, dst);
                }
                let ts = self.new_tileset(d, block)?;
                self.slot_mut(h).owned = Some((block, ts));
            }
        }
        Ok(())
    }

    /// Uses virtual time (ns) for trace stamps instead of the wall clock.
    pub fn set_virtual_time(&mut self, ns: u64) {
        self.clock = Clock::Virtual(ns);
    }

    /// Restarts the wall clock epoch.
    pub fn set_epoch(&mut self, epoch: Instant) {
        self.clock = Clock::Wall(epoch);
    }

    fn now(&self) -> u64 {
        match &self.clock {
            Clock::Wall(epoch) => epoch.elapsed().as_nanos() as u64,
            Clock::Virtual(t) => *t,
        }
    }

    pub fn rank(&self) -> Rank {
        self.me
    }

    pub fn program(&self) -> &Arc<dyn Program> {
        &self.program
    }

    pub fn is_sim(&self) -> bool {
        self.sim
    }

    fn new_tileset(&mut self, data: usize, block: BlockId) -> Result<u32> {
        let layout = self.layouts[data];
        let (tr, tc) = layout.tile_grid();
        let content = self.pool.content(block)?;
        let h = self.pool.header(block)?.handle;
        let ts = TileSet {
            states: (0..tr * tc)
                .map(|t| HandleState::new(HandleId(h.0 ^ ((t as u64 + 1) << 48))))
                .collect(),
            content,
            tile_elements: layout.tile_elements(),
        };
        Ok(match self.free_tilesets.pop() {
            Some(idx) => {
                self.tilesets[idx as usize] = Some(ts);
                idx
            }
            None => {
                self.tilesets.push(Some(ts));
                (self.tilesets.len() - 1) as u32
            }
        })
    }

    fn drop_tileset(&mut self, idx: u32) {
        if idx != NONE {
            self.tilesets[idx as usize] = None;
            self.free_tilesets.push(idx);
        }
    }

    fn locate(&self, h: HandleId) -> Option<(usize, usize)> {
        let data = (h.0 >> 32) as usize;
        let lin = (h.0 & 0xffff_ffff) as usize;
        let row = self.slots.get(data)?;
        row.get(lin)?.as_ref()?;
        Some((data, lin))
    }

    fn slot(&self, h: HandleId) -> &Slot {
        let (d, l) = self.locate(h).expect("handle of a registered block");
        self.slots[d][l].as_ref().expect("stored block")
    }

    fn slot_mut(&mut self, h: HandleId) -> &mut Slot {
        let (d, l) = self.locate(h).expect("handle of a registered block");
        self.slots[d][l].as_mut().expect("stored block")
    }

    fn desc_of(&self, h: HandleId) -> &DataDescriptor {
        &self.descs[(h.0 >> 32) as usize]
    }

    /// Runtime version of a level-1 handle as seen by this rank.
    pub fn handle_version(&self, h: HandleId) -> Option<Version> {
        self.locate(h).map(|_| self.slot(h).state.runtime_version())
    }

    /// Admits the first steps and evaluates everything that can start.
    pub fn start(&mut self) -> Result<()> {
        self.pump()
    }

    fn pump(&mut self) -> Result<()> {
        loop {
            while let Some(t) = self.wake.pop_front() {
                match t {
                    TaskRef::Parent(p) => self.try_start_parent(p)?,
                    TaskRef::Leaf(l) => self.try_start_leaf(l)?,
                }
            }
            if self.next_step < self.steps && self.inflight_steps < self.window {
                self.admit_step()?;
                continue;
            }
            return Ok(());
        }
    }

    fn admit_step(&mut self) -> Result<()> {
        let s = self.next_step;
        self.next_step += 1;
        let mut stmts = std::mem::take(&mut self.stmt_buf);
        stmts.clear();
        self.program.step(s, &mut stmts);
        self.step_live.insert(s, 0);
        self.inflight_steps += 1;
        for stmt in stmts.drain(..) {
            self.submit(s, stmt)?;
        }
        self.stmt_buf = stmts;
        if self.step_live[&s] == 0 {
            self.step_live.remove(&s);
            self.inflight_steps -= 1;
        } else {
            self.stats.max_inflight_steps = self.stats.max_inflight_steps.max(self.inflight_steps as u64);
        }
        if self.next_step == self.steps {
            self.close_all_copies()?;
        }
        Ok(())
    }

    fn submit(&mut self, step: usize, stmt: Statement) -> Result<()> {
        let id = self.next_stmt;
        self.next_stmt += 1;
        let mut scanned = Vec::with_capacity(stmt.accesses.len());
        let mut accesses = Vec::with_capacity(stmt.accesses.len());
        for (k, a) in stmt.accesses.iter().enumerate() {
            let desc = self
                .descs
                .get(a.data.0 as usize)
                .ok_or_else(|| Error::Submission(format!("{} accesses unknown array {}", stmt.kind, a.data.0)))?;
            if !desc.has_block(a.i, a.j) {
                return Err(Error::Submission(format!(
                    "{} accesses block ({},{}) of array {} which is not stored",
                    stmt.kind, a.i, a.j, a.data.0
                )));
            }
            let h = desc.handle_id(a.i, a.j);
            if stmt.accesses[..k]
                .iter()
                .any(|b| b.data == a.data && b.i == a.i && b.j == a.j && (b.ty.is_output() || a.ty.is_output()))
            {
                return Err(Error::Submission(format!(
                    "{} both reads and writes block ({},{}) of array {}",
                    stmt.kind, a.i, a.j, a.data.0
                )));
            }
            let me = self.me;
            let slot = self.slot_mut(h);
            let req = slot.state.register_access(a.ty);
            let owner = slot.owner;
            if owner == me {
                slot.fired.retain(|&(v, _)| v >= req.required);
            }
            if self.record_versions {
                self.versions.push((h, req.required));
            }
            if owner != me {
                self.close_copies_below(h, req.required)?;
            }
            scanned.push(ScannedAccess {
                handle: h,
                ty: a.ty,
                required: req.required,
                data_owner: owner,
            });
            accesses.push(ParentAccess {
                req,
                remote: owner != me,
                tiles: NONE,
            });
        }
        let scan = scan_submission(&scanned, self.me)
            .map_err(|e| Error::Submission(format!("statement {id} ({}): {e}", stmt.kind)))?;
        for &(h, v, dest) in &scan.listeners {
            self.add_listener(h, v, dest)?;
        }
        if !scan.is_local(self.me) {
            return Ok(());
        }
        for &(h, v) in &scan.receives {
            let first = self.ledger.expect_receive(h, v);
            let copy = self.slot_mut(h).copies.entry(v).or_insert(CopySlot {
                block: None,
                tiles: NONE,
                waiters: Vec::new(),
                uses: 0,
                closed: false,
            });
            copy.uses += 1;
            if let Some(b) = copy.block {
                self.pool.pin(b)?;
            }
            if first {
                if let Some(msg) = self.early.remove(&(h, v)) {
                    self.accept(msg)?;
                }
            }
        }
        let task = ParentTask {
            id,
            step,
            stmt,
            accesses,
            pending: 0,
        };
        let idx = match self.free_parents.pop() {
            Some(i) => {
                self.parents[i as usize] = Some(task);
                i
            }
            None => {
                self.parents.push(Some(task));
                (self.parents.len() - 1) as u32
            }
        };
        *self.step_live.get_mut(&step).expect("admitted step") += 1;
        self.live_parents += 1;
        self.wake.push_back(TaskRef::Parent(idx));
        Ok(())
    }

    fn add_listener(&mut self, h: HandleId, v: Version, dest: Rank) -> Result<()> {
        let slot = self.slot_mut(h);
        if slot.fired.contains(&(v, dest)) {
            // Already shipped to `dest`; the copy there serves this read too.
            let (_, woken) = slot.state.complete_access(&AccessRequest {
                handle: h,
                ty: AccessType::Read,
                required: v,
            });
            self.wake.extend(woken.into_iter().map(TaskRef::Parent));
            return self.fire(h);
        }
        if self.listeners.add(h, v, dest) {
            let bytes = self.desc_of(h).block_bytes() as u64;
            self.ledger.expect_send(bytes);
        }
        if self.slot(h).state.runtime_version() >= v {
            self.fire(h)?;
        }
        Ok(())
    }

    /// Ships every listener of `h` whose version has been reached. Each
    /// shipped read advances the version, which may release more.
    fn fire(&mut self, h: HandleId) -> Result<()> {
        loop {
            let reached = self.slot(h).state.runtime_version();
            let ready = self.listeners.take_ready(h, reached);
            if ready.is_empty() {
                return Ok(());
            }
            // A listener may sit below `reached` when local reads of the same
            // group finished first; the content is still that version.
            let mut woken_all = Vec::new();
            for l in ready {
                let (block, _) = self
                    .slot(h)
                    .owned
                    .ok_or_else(|| Error::Protocol(format!("firing {h} which is not resident")))?;
                let msg = if self.sim {
                    Message::sim_data(self.me, l.dest, h, l.version)
                } else {
                    self.pool.restamp(block, l.version)?;
                    Message::data(self.me, l.dest, h, l.version, self.pool.block_bytes(block)?)
                };
                self.ledger.record_send()?;
                self.stats.msgs_out += 1;
                self.stats.bytes += self.desc_of(h).block_bytes() as u64;
                self.outbox.push(msg);
                let slot = self.slot_mut(h);
                slot.fired.push((l.version, l.dest));
                let req = AccessRequest {
                    handle: h,
                    ty: AccessType::Read,
                    required: l.version,
                };
                for _ in 0..l.reads {
                    let (_, woken) = slot.state.complete_access(&req);
                    woken_all.extend(woken);
                }
            }
            self.wake.extend(woken_all.into_iter().map(TaskRef::Parent));
        }
    }

    fn close_copies_below(&mut self, h: HandleId, version: Version) -> Result<()> {
        let closing: Vec<Version> = self
            .slot(h)
            .copies
            .range(..version)
            .filter(|(_, c)| !c.closed)
            .map(|(v, _)| *v)
            .collect();
        for v in closing {
            self.slot_mut(h).copies.get_mut(&v).expect("listed").closed = true;
            self.maybe_release_copy(h, v)?;
        }
        Ok(())
    }

    fn close_all_copies(&mut self) -> Result<()> {
        let mut all = Vec::new();
        for row in &self.slots {
            for slot in row.iter().flatten() {
                for (v, c) in &slot.copies {
                    if !c.closed {
                        all.push((slot.state.id(), *v));
                    }
                }
            }
        }
        for (h, v) in all {
            self.slot_mut(h).copies.get_mut(&v).expect("listed").closed = true;
            self.maybe_release_copy(h, v)?;
        }
        Ok(())
    }

    fn maybe_release_copy(&mut self, h: HandleId, v: Version) -> Result<()> {
        let copy = &self.slot(h).copies[&v];
        if !copy.closed || copy.uses > 0 {
            return Ok(());
        }
        let copy = self.slot_mut(h).copies.remove(&v).expect("present");
        if let Some(b) = copy.block {
            if self.pool.lookup(h, v) == Some(b) {
                self.pool.release(b)?;
            }
        }
        self.drop_tileset(copy.tiles);
        Ok(())
    }

    /// Handles a DATA or SIM_DATA message from the transport.
    pub fn on_message(&mut self, msg: Message) -> Result<()> {
        msg.verify()?;
        if msg.header.msg_type == MessageType::Shutdown {
            return Err(Error::Protocol("shutdown reached the engine".into()));
        }
        if msg.header.dest != self.me {
            return Err(Error::Protocol(format!(
                "rank {} got a message for rank {}",
                self.me, msg.header.dest
            )));
        }
        let key = (msg.header.handle, msg.header.version);
        if self.locate(key.0).is_none() {
            return Err(Error::Protocol(format!("message for unknown handle {}", key.0)));
        }
        if self.ledger.is_expected(key.0, key.1) {
            self.accept(msg)?;
        } else if self.early.insert(key, msg).is_some() {
            return Err(Error::Protocol(format!("duplicate message for {} {}", key.0, key.1)));
        }
        self.pump()
    }

    fn accept(&mut self, msg: Message) -> Result<()> {
        let (h, v) = (msg.header.handle, msg.header.version);
        self.ledger.record_receive(h, v)?;
        let data = (h.0 >> 32) as usize;
        let content_len = self.descs[data].block_bytes();
        match (msg.header.msg_type, self.sim) {
            (MessageType::SimData, true) => {}
            (MessageType::Data, false) => {
                if msg.payload.len() != HEADER_SIZE + content_len {
                    return Err(Error::Protocol(format!(
                        "{h} {v}: payload of {} bytes, expected {}",
                        msg.payload.len(),
                        HEADER_SIZE + content_len
                    )));
                }
                let hdr = BlockHeader::decode(&msg.payload[..HEADER_SIZE])?;
                if hdr.handle != h || hdr.version != v {
                    return Err(Error::Protocol(format!(
                        "block header {} {} inside message for {h} {v}",
                        hdr.handle, hdr.version
                    )));
                }
            }
            (ty, sim) => {
                return Err(Error::Protocol(format!(
                    "{ty:?} message in {} mode",
                    if sim { "simulation" } else { "real" }
                )))
            }
        }
        let block = self
            .pool
            .acquire(h, v, if self.sim { 0 } else { content_len }, msg.header.source)?;
        if !self.sim {
            self.pool.write_content_bytes(block, &msg.payload[HEADER_SIZE..])?;
        }
        let ts = self.new_tileset(data, block)?;
        self.stats.msgs_in += 1;
        let copy = self
            .slot_mut(h)
            .copies
            .get_mut(&v)
            .ok_or_else(|| Error::Protocol(format!("no local reader waits for {h} {v}")))?;
        copy.block = Some(block);
        copy.tiles = ts;
        let uses = copy.uses;
        let waiters = std::mem::take(&mut copy.waiters);
        for _ in 0..uses {
            self.pool.pin(block)?;
        }
        self.wake.extend(waiters.into_iter().map(TaskRef::Parent));
        Ok(())
    }

    fn try_start_parent(&mut self, idx: u32) -> Result<()> {
        let task = self.parents[idx as usize].as_ref().expect("live parent");
        for a in &task.accesses {
            let h = a.req.handle;
            let (d, l) = self.locate(h).expect("registered");
            let slot = self.slots[d][l].as_mut().expect("stored");
            if a.remote {
                let copy = slot.copies.get_mut(&a.req.required).expect("expected copy");
                if copy.block.is_none() {
                    copy.waiters.push(idx);
                    return Ok(());
                }
            } else if slot.state.readiness(&a.req) != Readiness::Ready {
                slot.state.enqueue_waiter(a.req.required, idx);
                return Ok(());
            }
        }
        self.start_parent(idx)
    }

    fn start_parent(&mut self, idx: u32) -> Result<()> {
        let t0 = self.now();
        let mut task = self.parents[idx as usize].take().expect("live parent");
        for a in &mut task.accesses {
            let h = a.req.handle;
            if a.remote {
                let copy = &self.slot(h).copies[&a.req.required];
                a.tiles = copy.tiles;
                self.pool.evict_older(h, a.req.required);
            } else {
                let slot = self.slot_mut(h);
                if a.req.ty.needs_token() {
                    let granted = slot.state.is_satisfied(&a.req);
                    assert!(granted, "token for {h} vanished between check and start");
                }
                a.tiles = slot.owned.expect("owned block").1;
            }
        }
        let mut children = std::mem::take(&mut self.child_buf);
        children.clear();
        self.program.expand(&task.stmt, &mut children);
        task.pending = children.len();
        let parent_id = task.id;
        let kind = task.stmt.kind;
        let accesses = task.accesses.clone();
        let stmt_accesses = task.stmt.accesses.clone();
        self.parents[idx as usize] = Some(task);
        for (ci, child) in children.drain(..).enumerate() {
            let mut reqs = Vec::with_capacity(child.accesses.len());
            for ta in &child.accesses {
                let pa = accesses.get(ta.arg as usize).ok_or_else(|| {
                    Error::Submission(format!("{kind} child {ci} uses argument {} it does not have", ta.arg))
                })?;
                if ta.ty.is_output() && !pa.req.ty.is_output() {
                    return Err(Error::Submission(format!(
                        "{kind} child {ci} writes a tile of an input block"
                    )));
                }
                let ba = stmt_accesses[ta.arg as usize];
                let desc = &self.descs[ba.data.0 as usize];
                let (tr, tc) = desc.tile_grid();
                let (ti, tj) = (ta.ti as usize, ta.tj as usize);
                let lower_diag = desc.symmetry() == crate::datahier::Symmetry::Lower && ba.i == ba.j;
                if ti >= tr || tj >= tc || (lower_diag && ti < tj) {
                    return Err(Error::Submission(format!(
                        "{kind} child {ci} touches tile ({ti},{tj}) which block ({},{}) does not store",
                        ba.i, ba.j
                    )));
                }
                let tile = self.layouts[ba.data.0 as usize].tile_index(ti, tj) as u32;
                if reqs.iter().any(|&(s, t, r): &(u32, u32, AccessRequest)| {
                    s == pa.tiles && t == tile && (r.ty.is_output() || ta.ty.is_output())
                }) {
                    return Err(Error::Submission(format!(
                        "{kind} child {ci} both reads and writes tile ({ti},{tj})"
                    )));
                }
                let ts = self.tilesets[pa.tiles as usize].as_mut().expect("live tile set");
                let req = ts.states[tile as usize].register_access(ta.ty);
                reqs.push((pa.tiles, tile, req));
            }
            let leaf = LeafTask {
                parent: idx,
                id: (parent_id << 24) | ci as u64,
                reqs,
                child: Some(child),
            };
            let li = match self.free_leaves.pop() {
                Some(i) => {
                    self.leaves[i as usize] = Some(leaf);
                    i
                }
                None => {
                    self.leaves.push(Some(leaf));
                    (self.leaves.len() - 1) as u32
                }
            };
            self.live_leaves += 1;
            self.wake.push_back(TaskRef::Leaf(li));
        }
        self.child_buf = children;
        if self.trace {
            let t1 = self.now();
            self.events.push(TraceEvent {
                rank: self.me,
                thread: 0,
                task_id: parent_id,
                kind: kind.to_string(),
                level: 0,
                start_ns: t0,
                end_ns: t1.max(t0),
            });
        }
        if self.parents[idx as usize].as_ref().expect("live").pending == 0 {
            self.complete_parent(idx)?;
        }
        Ok(())
    }

    fn try_start_leaf(&mut self, idx: u32) -> Result<()> {
        let leaf = self.leaves[idx as usize].as_ref().expect("live leaf");
        for &(ts, tile, req) in &leaf.reqs {
            let state = &mut self.tilesets[ts as usize].as_mut().expect("live tile set").states[tile as usize];
            if state.readiness(&req) != Readiness::Ready {
                state.enqueue_waiter(req.required, idx);
                return Ok(());
            }
        }
        let leaf = self.leaves[idx as usize].as_mut().expect("live leaf");
        let mut affinity = None;
        let mut ptrs = Vec::with_capacity(if self.sim { 0 } else { leaf.reqs.len() });
        for &(ts, tile, req) in &leaf.reqs {
            let set = self.tilesets[ts as usize].as_mut().expect("live tile set");
            if req.ty.needs_token() {
                let granted = set.states[tile as usize].is_satisfied(&req);
                debug_assert!(granted);
            }
            if affinity.is_none() && req.ty.is_output() {
                affinity = Some(((ts as u64) << 32 | tile as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            }
            if !self.sim {
                let e = set.tile_elements;
                ptrs.push(set.content.slice(tile as usize * e..(tile as usize + 1) * e));
            }
        }
        let job = LeafJob {
            leaf: idx,
            task_id: leaf.id,
            child: leaf.child.take().expect("child body"),
            ptrs,
            affinity: affinity.unwrap_or(idx as u64),
        };
        self.ready.push_back(job);
        Ok(())
    }

    fn check_startable(&self, leaf: u32) {
        let leaf = self.leaves[leaf as usize].as_ref().expect("live leaf");
        for &(ts, tile, req) in &leaf.reqs {
            let state = &self.tilesets[ts as usize].as_ref().expect("live tile set").states[tile as usize];
            assert!(
                state.runtime_version() >= req.required,
                "leaf {} starts before tile version {} (at {})",
                leaf.id,
                req.required,
                state.runtime_version()
            );
            assert!(
                !req.ty.needs_token() || state.token_held(),
                "leaf {} runs without its token",
                leaf.id
            );
        }
        let parent = self.parents[leaf.parent as usize].as_ref().expect("live parent");
        for a in parent.accesses.iter().filter(|a| !a.remote) {
            let slot = self.slot(a.req.handle);
            assert!(slot.state.runtime_version() >= a.req.required);
        }
    }

    pub fn ready_len(&self) -> usize {
        self.ready.len()
    }

    /// Oldest ready leaf.
    pub fn take_ready(&mut self) -> Option<LeafJob> {
        let job = self.ready.pop_front()?;
        if self.debug_checks {
            self.check_startable(job.leaf);
        }
        Some(job)
    }

    /// Ready leaf at position `i` (any order; used for schedule fuzzing).
    pub fn take_ready_at(&mut self, i: usize) -> Option<LeafJob> {
        let job = self.ready.swap_remove_back(i)?;
        if self.debug_checks {
            self.check_startable(job.leaf);
        }
        Some(job)
    }

    /// Records a finished leaf: completes its tile accesses and, for the
    /// last child, its parent.
    pub fn on_leaf_done(&mut self, idx: u32) -> Result<()> {
        let leaf = self.leaves[idx as usize]
            .take()
            .ok_or_else(|| Error::Protocol(format!("completion of unknown leaf slot {idx}")))?;
        self.free_leaves.push(idx);
        for &(ts, tile, req) in &leaf.reqs {
            let state = &mut self.tilesets[ts as usize].as_mut().expect("live tile set").states[tile as usize];
            let (_, woken) = state.complete_access(&req);
            self.wake.extend(woken.into_iter().map(TaskRef::Leaf));
        }
        self.stats.tasks_l1 += 1;
        self.live_leaves -= 1;
        let parent = self.parents[leaf.parent as usize].as_mut().expect("live parent");
        parent.pending -= 1;
        if parent.pending == 0 {
            self.complete_parent(leaf.parent)?;
        }
        self.pump()
    }

    fn complete_parent(&mut self, idx: u32) -> Result<()> {
        let task = self.parents[idx as usize].take().expect("live parent");
        self.free_parents.push(idx);
        for a in &task.accesses {
            let h = a.req.handle;
            if a.remote {
                let v = a.req.required;
                let copy = self.slot_mut(h).copies.get_mut(&v).expect("copy in use");
                copy.uses -= 1;
                let block = copy.block.expect("resident copy");
                if self.pool.unpin(block)? {
                    let copy = self.slot_mut(h).copies.remove(&v).expect("present");
                    self.drop_tileset(copy.tiles);
                } else {
                    self.maybe_release_copy(h, v)?;
                }
            } else {
                let (_, woken) = self.slot_mut(h).state.complete_access(&a.req);
                self.wake.extend(woken.into_iter().map(TaskRef::Parent));
                self.fire(h)?;
            }
        }
        self.stats.tasks_l0 += 1;
        self.live_parents -= 1;
        let live = self.step_live.get_mut(&task.step).expect("admitted step");
        *live -= 1;
        if *live == 0 {
            self.step_live.remove(&task.step);
            self.inflight_steps -= 1;
        }
        Ok(())
    }

    /// Messages produced since the last call, in production order.
    pub fn drain_outbox(&mut self) -> Vec<Message> {
        std::mem::take(&mut self.outbox)
    }

    pub fn note_pending(&mut self, in_flight: usize) {
        self.stats.max_pending = self.stats.max_pending.max(in_flight as u64);
    }

    pub fn note_steals(&mut self, steals: u64) {
        self.stats.steals += steals;
    }

    pub fn traversal_done(&self) -> bool {
        self.next_step == self.steps
    }

    pub fn live_tasks(&self) -> usize {
        self.live_parents + self.live_leaves
    }

    /// True once nothing is left to run, send or receive on this rank.
    pub fn is_quiescent(&self, transport_in_flight: usize) -> bool {
        let local = crate::protocol::LocalProgress {
            traversal_done: self.traversal_done() && self.wake.is_empty(),
            live_tasks: self.live_tasks(),
            queued_listeners: self.listeners.len(),
            transport_in_flight,
        };
        crate::protocol::quiescent(&self.ledger, &local) && self.outbox.is_empty() && self.early.is_empty()
    }

    /// One-line summary of what this rank is still waiting for.
    pub fn diagnostics(&self) -> String {
        let waiting_copies: usize = self
            .slots
            .iter()
            .flatten()
            .flatten()
            .map(|s| s.copies.values().filter(|c| c.block.is_none()).count())
            .sum();
        format!(
            "rank {}: step {}/{} ({} in flight), {} parent(s) and {} leaf task(s) live, {} ready, \
             {} listener(s) queued, sends {}/{}, receives {}/{}, {} copy version(s) awaited, {} early message(s)",
            self.me,
            self.next_step,
            self.steps,
            self.inflight_steps,
            self.live_parents,
            self.live_leaves,
            self.ready.len(),
            self.listeners.len(),
            self.ledger.sent(),
            self.ledger.expected_sends(),
            self.ledger.received(),
            self.ledger.expected_receives(),
            waiting_copies,
            self.early.len()
        )
    }

    /// Adds executor-side events (leaf bodies) to the rank trace.
    pub fn push_events(&mut self, events: impl IntoIterator<Item = TraceEvent>) {
        self.events.extend(events);
    }

    pub fn stats(&self) -> &RankStats {
        &self.stats
    }

    /// Final statistics, trace, version log and owned block contents, with
    /// the transport's audit log.
    pub fn finish(mut self, audit: AuditLog) -> Result<RankOutcome> {
        if !self.early.is_empty() {
            let (h, v) = self.early.keys().next().copied().expect("non-empty");
            return Err(Error::Protocol(format!("unexpected message for {h} {v}")));
        }
        self.stats.work_proxy = self.stats.tasks_l1 * self.program.leaf_work();
        let mut blocks = Vec::new();
        if !self.sim {
            for (d, desc) in self.descs.iter().enumerate() {
                for (i, j) in desc.blocks() {
                    let slot = self.slots[d][i * desc.block_grid().1 + j].as_ref().expect("stored");
                    if let Some((block, _)) = slot.owned {
                        let content = self.pool.content(block)?;
                        // Safety: all tasks are finished; nothing writes any more.
                        let data = unsafe { content.as_slice() }[..desc.block_bytes() / 8].to_vec();
                        blocks.push(BlockData {
                            data: DataId(d as u32),
                            i,
                            j,
                            content: data,
                        });
                    }
                }
            }
        }
        self.events.sort_by_key(|e| (e.thread, e.start_ns, e.task_id));
        Ok(RankOutcome {
            stats: self.stats,
            audit,
            trace: self.events,
            versions: self.versions,
            blocks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahier::ProcessGrid;
    use crate::versioning::AccessType::*;

    /// Two blocks; step s: M(X) with 2 children, then R(X) + M(Y).
    struct Tiny {
        data: Vec<DataDescriptor>,
    }

    impl Tiny {
        fn new() -> Self {
            let g = ProcessGrid::single();
            Tiny {
                data: vec![DataDescriptor::vector(DataId(0), 8, 2, 2, g).unwrap()],
            }
        }
    }

    impl Program for Tiny {
        fn data(&self) -> &[DataDescriptor] {
            &self.data
        }
        fn steps(&self) -> usize {
            1
        }
        fn step(&self, _: usize, out: &mut Vec<Statement>) {
            out.push(Statement::new("m", [0; 4]).access(DataId(0), 0, 0, Modify));
            out.push(
                Statement::new("copy", [0; 4])
                    .access(DataId(0), 1, 0, Modify)
                    .access(DataId(0), 0, 0, Read),
            );
        }
        fn expand(&self, stmt: &Statement, out: &mut Vec<Child>) {
            for t in 0..2 {
                let mut c = Child::new(stmt.kind, [t, 0, 0, 0]);
                c.tile(0, t, 0, Modify);
                if stmt.accesses.len() > 1 {
                    c.tile(1, t, 0, Read);
                }
                out.push(c);
            }
        }
        fn init_block(&self, _: DataId, i: usize, _: usize, content: &mut [f64]) {
            content.fill(i as f64);
        }
        fn run_leaf(&self, child: &Child, tiles: &Tiles<'_>) -> std::result::Result<(), String> {
            let out = tiles.write(0);
            if child.kind == "m" {
                out.iter_mut().for_each(|x| *x += 10.0);
            } else {
                out.copy_from_slice(tiles.read(1));
            }
            Ok(())
        }
    }

    #[test]
    fn parent_version_advances_only_after_all_children() {
        let prog: Arc<dyn Program> = Arc::new(Tiny::new());
        let x = prog.data()[0].handle_id(0, 0);
        let mut e = RankEngine::new(0, prog.clone(), &RunConfig::default()).unwrap();
        e.start().unwrap();
        assert_eq!(e.ready_len(), 2);
        let a = e.take_ready().unwrap();
        a.execute(prog.as_ref(), false).unwrap();
        e.on_leaf_done(a.leaf).unwrap();
        // Mid-drain probe: one child of M(X) finished, version unchanged.
        assert_eq!(e.handle_version(x), Some(Version(0)));
        assert_eq!(e.ready_len(), 1);
        let b = e.take_ready().unwrap();
        b.execute(prog.as_ref(), false).unwrap();
        e.on_leaf_done(b.leaf).unwrap();
        assert_eq!(e.handle_version(x), Some(Version(1)));
        while let Some(j) = e.take_ready() {
            j.execute(prog.as_ref(), false).unwrap();
            e.on_leaf_done(j.leaf).unwrap();
        }
        assert!(e.is_quiescent(0));
        let RankOutcome { stats, blocks, .. } = e.finish(AuditLog::default()).unwrap();
        assert_eq!((stats.tasks_l0, stats.tasks_l1), (2, 4));
        assert!(blocks.iter().all(|b| b.content.iter().all(|&v| v == 10.0)));
    }
}
