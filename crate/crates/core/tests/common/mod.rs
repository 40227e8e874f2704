#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strata::protocol::MessageType;
use strata::runtime::{Child, Program, RunOutcome, Statement, Tiles};
use strata::transport::Direction;
use strata::versioning::{AccessRequest, HandleState};
use strata::{AccessType, DataDescriptor, DataId, HandleId, ProcessGrid, Version};

/// Values stay below this modulus, so sums of a few of them are exact.
pub const MODULUS: f64 = 1_000_003.0;
pub const TILE_LEN: usize = 2;

/// Random program over integer-valued vector blocks. Statement kinds:
/// `set` (Modify), `acc` (Add) and `scale` (Modify); each also reads up to
/// three other blocks.
#[derive(Debug, Clone)]
pub struct DagProgram {
    pub data: Vec<DataDescriptor>,
    pub steps: Vec<Vec<Statement>>,
    pub blocks: usize,
    pub tiles: usize,
}

impl DagProgram {
    pub fn random(seed: u64, ranks: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = rng.gen_range(2..10);
        let tiles = rng.gen_range(1..4);
        let arrays = rng.gen_range(1..3);
        let grid = ProcessGrid::column(ranks).unwrap();
        let data = (0..arrays)
            .map(|k| DataDescriptor::vector(DataId(k as u32), blocks * tiles * TILE_LEN, blocks, tiles, grid).unwrap())
            .collect();
        let nsteps = rng.gen_range(1..8);
        let steps = (0..nsteps)
            .map(|_| {
                (0..rng.gen_range(1..6))
                    .map(|_| {
                        let out = (rng.gen_range(0..arrays), rng.gen_range(0..blocks));
                        let (kind, ty) = match rng.gen_range(0..3) {
                            0 => ("set", AccessType::Modify),
                            1 => ("acc", AccessType::Add),
                            _ => ("scale", AccessType::Modify),
                        };
                        let c = rng.gen_range(1..100);
                        let mut st = Statement::new(kind, [c, 0, 0, 0]).access(DataId(out.0 as u32), out.1, 0, ty);
                        let mut used = vec![out];
                        for _ in 0..rng.gen_range(0..4) {
                            let r = (rng.gen_range(0..arrays), rng.gen_range(0..blocks));
                            if !used.contains(&r) {
                                used.push(r);
                                st = st.access(DataId(r.0 as u32), r.1, 0, AccessType::Read);
                            }
                        }
                        st
                    })
                    .collect()
            })
            .collect();
        DagProgram {
            data,
            steps,
            blocks,
            tiles,
        }
    }

    pub fn statements(&self) -> impl Iterator<Item = &Statement> {
        self.steps.iter().flatten()
    }
}

fn initial(data: usize, block: usize, e: usize) -> f64 {
    ((data * 7919 + block * 104_729 + e * 31) % 1000) as f64
}

/// The element update of every kind, shared by kernel and oracle.
fn apply(kind: &str, c: usize, out: f64, reads: f64) -> f64 {
    let c = c as f64;
    match kind {
        "set" => (reads + c) % MODULUS,
        "acc" => (out + reads + c) % MODULUS,
        _ => (out * c + reads) % MODULUS,
    }
}

impl Program for DagProgram {
    fn data(&self) -> &[DataDescriptor] {
        &self.data
    }

    fn steps(&self) -> usize {
        self.steps.len()
    }

    fn step(&self, step: usize, out: &mut Vec<Statement>) {
        out.extend(self.steps[step].iter().cloned());
    }

    fn expand(&self, stmt: &Statement, out: &mut Vec<Child>) {
        for t in 0..self.tiles {
            let mut ch = Child::new(stmt.kind, stmt.args).with(0, t, 0, stmt.accesses[0].ty);
            for arg in 1..stmt.accesses.len() {
                ch.tile(arg, t, 0, AccessType::Read);
            }
            out.push(ch);
        }
    }

    fn init_block(&self, data: DataId, i: usize, _: usize, content: &mut [f64]) {
        for (e, v) in content.iter_mut().enumerate() {
            *v = initial(data.0 as usize, i, e);
        }
    }

    fn run_leaf(&self, child: &Child, tiles: &Tiles<'_>) -> Result<(), String> {
        let out = tiles.write(0);
        for (e, o) in out.iter_mut().enumerate() {
            let reads: f64 = (1..tiles.len()).map(|k| tiles.read(k)[e]).sum();
            *o = apply(child.kind, child.args[0], *o, reads);
        }
        Ok(())
    }
}

/// Sequential replay of the program on plain vectors; `[array][block]`.
pub fn replay(p: &DagProgram) -> Vec<Vec<Vec<f64>>> {
    let len = p.tiles * TILE_LEN;
    let mut mem: Vec<Vec<Vec<f64>>> = (0..p.data.len())
        .map(|d| {
            (0..p.blocks)
                .map(|b| (0..len).map(|e| initial(d, b, e)).collect())
                .collect()
        })
        .collect();
    for st in p.statements() {
        let o = st.accesses[0];
        let reads: Vec<f64> = (0..len)
            .map(|e| st.accesses[1..].iter().map(|a| mem[a.data.0 as usize][a.i][e]).sum())
            .collect();
        for (slot, r) in mem[o.data.0 as usize][o.i].iter_mut().zip(reads) {
            *slot = apply(st.kind, st.args[0], *slot, r);
        }
    }
    mem
}

pub fn dag(seed: u64, ranks: usize) -> (Arc<DagProgram>, Arc<dyn Program>) {
    let p = Arc::new(DagProgram::random(seed, ranks));
    (p.clone(), p)
}

/// Compares a run against [`replay`]; returns the first mismatch.
pub fn check_against_replay(p: &DagProgram, out: &RunOutcome) -> Result<(), String> {
    let want = replay(p);
    for (d, arr) in want.iter().enumerate() {
        for (b, block) in arr.iter().enumerate() {
            let got = out
                .block(DataId(d as u32), b, 0)
                .ok_or_else(|| format!("array {d} block {b} missing"))?;
            if got != block.as_slice() {
                return Err(format!("array {d} block {b}: got {got:?}, want {block:?}"));
            }
        }
    }
    Ok(())
}

/// `(handle, version, dest)` triples sent more than once as DATA.
pub fn duplicate_data_sends(out: &RunOutcome) -> Vec<(HandleId, Version, u32)> {
    let mut seen = HashMap::new();
    for r in &out.ranks {
        for e in r.audit.entries() {
            let h = &e.header;
            if e.direction == Direction::Sent && matches!(h.msg_type, MessageType::Data | MessageType::SimData) {
                *seen.entry((h.handle, h.version, h.dest)).or_insert(0) += 1;
            }
        }
    }
    let mut dups: Vec<_> = seen.into_iter().filter(|&(_, n)| n > 1).map(|(k, _)| k).collect();
    dups.sort();
    dups
}

/// Every sent DATA header was received by its destination.
pub fn sends_match_receives(out: &RunOutcome) -> bool {
    let collect = |dir: Direction| -> Vec<_> {
        let mut v: Vec<_> = out
            .ranks
            .iter()
            .flat_map(|r| r.audit.entries().iter())
            .filter(|e| e.direction == dir && e.header.msg_type != MessageType::Shutdown)
            .map(|e| (e.header.source, e.header.dest, e.header.handle, e.header.version))
            .collect();
        v.sort();
        v
    };
    collect(Direction::Sent) == collect(Direction::Received)
}

/// Brute-force model of which accesses of a single-handle sequence may
/// start, given the completed and running sets. Access `k` may start when
/// every earlier access is finished or belongs to `k`'s own run of
/// consecutive reads or adds; an add additionally needs no add running.
pub fn oracle_startable(seq: &[AccessType], done: &BTreeSet<usize>, running: &BTreeSet<usize>) -> BTreeSet<usize> {
    (0..seq.len())
        .filter(|k| !done.contains(k) && !running.contains(k))
        .filter(|&k| {
            let ty = seq[k];
            let group_start = if ty == AccessType::Modify {
                k
            } else {
                (0..k).rev().take_while(|&j| seq[j] == ty).last().unwrap_or(k)
            };
            let earlier_done = (0..group_start).all(|j| done.contains(&j));
            let token_free = !ty.is_output() || !running.iter().any(|&j| seq[j].is_output());
            earlier_done && token_free
        })
        .collect()
}

/// Drives a `HandleState` through one random schedule of `seq`, checking
/// the set of startable accesses against [`oracle_startable`] at every
/// state. Returns the runtime version observed when each access started
/// and the largest number of outputs ever running at once.
pub fn replay_schedule(seq: &[AccessType], rng: &mut impl Rng) -> Result<(Vec<Version>, usize), String> {
    let mut state: HandleState<usize> = HandleState::new(HandleId(1));
    let reqs: Vec<AccessRequest> = seq.iter().map(|&t| state.register_access(t)).collect();
    let (mut done, mut running) = (BTreeSet::new(), BTreeSet::new());
    let mut started_at = vec![Version::ZERO; seq.len()];
    let mut max_outputs = 0;
    while done.len() < seq.len() {
        let probe: BTreeSet<usize> = (0..seq.len())
            .filter(|k| !done.contains(k) && !running.contains(k))
            .filter(|&k| state.readiness(&reqs[k]) == strata::versioning::Readiness::Ready)
            .collect();
        let want = oracle_startable(seq, &done, &running);
        if probe != want {
            return Err(format!(
                "{seq:?}: done {done:?} running {running:?}: runtime {probe:?}, oracle {want:?}"
            ));
        }
        let choices = probe.len() + running.len();
        if choices == 0 {
            return Err(format!("{seq:?}: stuck with done {done:?}"));
        }
        let pick = rng.gen_range(0..choices);
        if pick < probe.len() {
            let k = *probe.iter().nth(pick).unwrap();
            if !state.is_satisfied(&reqs[k]) {
                return Err(format!("access {k} reported ready but not satisfied"));
            }
            started_at[k] = state.runtime_version();
            running.insert(k);
            max_outputs = max_outputs.max(running.iter().filter(|&&j| seq[j].is_output()).count());
        } else {
            let k = *running.iter().nth(pick - probe.len()).unwrap();
            running.remove(&k);
            state.complete_access(&reqs[k]);
            done.insert(k);
        }
    }
    Ok((started_at, max_outputs))
}
