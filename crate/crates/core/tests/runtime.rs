mod common;

use std::sync::Arc;

use strata::apps::cholesky::{spd_matrix, CholeskyConfig, CholeskyProgram};
use strata::apps::rk4::{CrsMatrix, Rk4Config, Rk4Program};
use strata::observe::find_thread_overlap;
use strata::runtime::{run_simnet, ExecutorKind, Placement, Program, RunConfig};
use strata::transport::Latency;
use strata::ProcessGrid;

fn cholesky(n: usize, blocks: usize, tiles: usize, p: usize, q: usize, seed: u64) -> Arc<dyn Program> {
    let cfg = CholeskyConfig::new(n, blocks, tiles, ProcessGrid::new(p, q).unwrap()).unwrap();
    Arc::new(CholeskyProgram::new(cfg, Arc::new(spd_matrix(n, seed))).unwrap())
}

fn discrete() -> RunConfig {
    RunConfig {
        executor: ExecutorKind::Discrete,
        ..Default::default()
    }
}

#[test]
fn single_rank_sends_nothing() {
    let out = run_simnet(cholesky(32, 4, 2, 1, 1, 1), 1, &RunConfig::default()).unwrap();
    let s = out.stats();
    assert_eq!((s.total_messages(), s.total_bytes()), (0, 0));
    assert_eq!(s.ranks[0].tasks_l0, 20);
}

#[test]
fn required_versions_do_not_depend_on_the_grid() {
    let cfg = RunConfig {
        record_versions: true,
        ..discrete()
    };
    let a = run_simnet(cholesky(32, 4, 2, 2, 2, 1), 4, &cfg).unwrap();
    let b = run_simnet(cholesky(32, 4, 2, 1, 4, 1), 4, &cfg).unwrap();
    assert!(!a.ranks[0].versions.is_empty());
    for r in 0..4 {
        assert_eq!(a.ranks[r].versions, a.ranks[0].versions);
        assert_eq!(b.ranks[r].versions, a.ranks[0].versions);
    }
}

#[test]
fn pinned_placement_forces_steals() {
    let cfg = RunConfig {
        workers: 4,
        placement: Placement::Pinned(0),
        ..Default::default()
    };
    let out = run_simnet(cholesky(192, 2, 4, 1, 1, 2), 1, &cfg).unwrap();
    assert!(out.ranks[0].stats.steals > 0);
}

#[test]
fn every_placement_gives_the_same_result() {
    let base = run_simnet(cholesky(48, 3, 2, 2, 1, 5), 2, &discrete()).unwrap();
    for placement in [Placement::Locality, Placement::RoundRobin, Placement::Pinned(1)] {
        let cfg = RunConfig {
            workers: 3,
            placement,
            ..Default::default()
        };
        let out = run_simnet(cholesky(48, 3, 2, 2, 1, 5), 2, &cfg).unwrap();
        let l = strata::apps::cholesky::gather_factor(
            &out,
            &CholeskyConfig::new(48, 3, 2, ProcessGrid::new(2, 1).unwrap()).unwrap(),
        )
        .unwrap();
        let l0 = strata::apps::cholesky::gather_factor(
            &base,
            &CholeskyConfig::new(48, 3, 2, ProcessGrid::new(2, 1).unwrap()).unwrap(),
        )
        .unwrap();
        assert!(strata::apps::cholesky::max_abs_diff(&l, &l0) < 1e-12);
    }
}

fn banded_rk4(steps: usize, ranks: usize) -> Arc<dyn Program> {
    let n = 64;
    let entries = (0..n)
        .flat_map(|r: usize| {
            [r.wrapping_sub(1), r, r + 1]
                .into_iter()
                .filter(move |&c| c < n)
                .map(move |c| (r, c, -0.3))
        })
        .collect();
    let d = Arc::new(CrsMatrix::from_triplets(n, entries).unwrap());
    let cfg = Rk4Config {
        dt: 0.01,
        steps,
        blocks: 4,
        tiles: 4,
    };
    Arc::new(Rk4Program::new(cfg, d, Arc::new(vec![1.0; n]), ranks).unwrap())
}

#[test]
fn window_bounds_steps_in_flight() {
    for (w, steps) in [(1, 20), (3, 20), (8, 5)] {
        let cfg = RunConfig {
            window: w,
            workers: 2,
            ..discrete()
        };
        let out = run_simnet(banded_rk4(steps, 2), 2, &cfg).unwrap();
        let max = out.ranks.iter().map(|r| r.stats.max_inflight_steps).max().unwrap();
        assert_eq!(max, w.min(steps) as u64, "window {w}, {steps} steps");
    }
}

#[test]
fn random_dags_match_sequential_replay() {
    let mut messages = 0;
    for seed in 0..40 {
        let (p, prog) = common::dag(seed, 3);
        for executor in [ExecutorKind::Threaded, ExecutorKind::Discrete] {
            let cfg = RunConfig {
                executor,
                workers: 1 + seed as usize % 4,
                window: 1 + seed as usize % 3,
                seed,
                fuzz: true,
                latency: Latency::Uniform { min: 0, max: 5 },
                debug_checks: true,
                ..Default::default()
            };
            let out = run_simnet(prog.clone(), 3, &cfg).unwrap_or_else(|e| panic!("seed {seed} {executor}: {e}"));
            common::check_against_replay(&p, &out).unwrap_or_else(|e| panic!("seed {seed} {executor}: {e}"));
            assert!(common::duplicate_data_sends(&out).is_empty());
            assert!(common::sends_match_receives(&out));
            messages += out.stats().total_messages();
        }
    }
    assert!(messages > 0, "no DAG exercised remote reads");
}

#[test]
fn every_worker_count_terminates() {
    for workers in 1..=8 {
        let cfg = RunConfig {
            workers,
            fuzz: true,
            seed: workers as u64,
            ..discrete()
        };
        run_simnet(cholesky(64, 4, 2, 2, 2, 3), 4, &cfg).unwrap();
        let cfg = RunConfig {
            workers,
            ..Default::default()
        };
        run_simnet(cholesky(64, 4, 2, 2, 2, 3), 4, &cfg).unwrap();
    }
}

#[test]
fn sim_mode_keeps_task_counts() {
    let real = run_simnet(cholesky(48, 3, 2, 2, 2, 4), 4, &discrete()).unwrap();
    let sim = run_simnet(
        cholesky(48, 3, 2, 2, 2, 4),
        4,
        &RunConfig {
            sim: true,
            ..discrete()
        },
    )
    .unwrap();
    for (a, b) in real.ranks.iter().zip(&sim.ranks) {
        assert_eq!(
            (
                a.stats.tasks_l0,
                a.stats.tasks_l1,
                a.stats.msgs_out,
                a.stats.msgs_in,
                a.stats.bytes
            ),
            (
                b.stats.tasks_l0,
                b.stats.tasks_l1,
                b.stats.msgs_out,
                b.stats.msgs_in,
                b.stats.bytes
            )
        );
    }
    assert!(sim.ranks.iter().all(|r| r.blocks.is_empty()));
}

#[test]
fn one_trace_event_per_leaf_and_no_thread_overlap() {
    for executor in [ExecutorKind::Threaded, ExecutorKind::Discrete] {
        let cfg = RunConfig {
            trace: true,
            workers: 3,
            executor,
            ..Default::default()
        };
        let out = run_simnet(cholesky(64, 4, 2, 2, 2, 6), 4, &cfg).unwrap();
        let trace = out.trace();
        let leaves: u64 = out.ranks.iter().map(|r| r.stats.tasks_l1).sum();
        let parents: u64 = out.ranks.iter().map(|r| r.stats.tasks_l0).sum();
        assert_eq!(trace.iter().filter(|e| e.level == 1).count() as u64, leaves);
        assert_eq!(trace.iter().filter(|e| e.level == 0).count() as u64, parents);
        assert!(trace.iter().all(|e| e.end_ns >= e.start_ns));
        assert!(find_thread_overlap(&trace).is_none(), "{executor}");
    }
}

#[test]
fn bad_configs_are_rejected() {
    let prog = cholesky(32, 4, 2, 2, 2, 1);
    assert!(run_simnet(prog.clone(), 3, &RunConfig::default()).is_err());
    let zero = RunConfig {
        workers: 0,
        ..Default::default()
    };
    assert!(run_simnet(prog.clone(), 4, &zero).is_err());
    let pinned = RunConfig {
        workers: 2,
        placement: Placement::Pinned(2),
        ..Default::default()
    };
    assert!(run_simnet(prog, 4, &pinned).is_err());
}
