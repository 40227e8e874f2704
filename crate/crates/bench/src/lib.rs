//! Shared fixtures for the runtime benchmarks.

use std::sync::Arc;

use strata::apps::cholesky::{spd_matrix, CholeskyConfig, CholeskyProgram};
use strata::apps::rk4::{CrsMatrix, Rk4Config, Rk4Program};
use strata::{ExecutorKind, ProcessGrid, Program, RunConfig};

/// Cholesky on a `p × q` grid; symbolic when `sim` is set.
pub fn cholesky(n: usize, blocks: usize, tiles: usize, p: usize, q: usize, sim: bool) -> Arc<dyn Program> {
    let cfg = CholeskyConfig::new(n, blocks, tiles, ProcessGrid::new(p, q).expect("grid")).expect("config");
    if sim {
        Arc::new(CholeskyProgram::symbolic(cfg).expect("program"))
    } else {
        Arc::new(CholeskyProgram::new(cfg, Arc::new(spd_matrix(n, 1))).expect("program"))
    }
}

/// RK4 over a seeded random matrix with 10 nonzeros per row.
pub fn rk4(n: usize, steps: usize, blocks: usize, tiles: usize, ranks: usize) -> Arc<dyn Program> {
    let d = Arc::new(CrsMatrix::random(n, 10, 1).expect("matrix"));
    let cfg = Rk4Config {
        dt: 0.01,
        steps,
        blocks,
        tiles,
    };
    Arc::new(Rk4Program::new(cfg, d, Arc::new(vec![1.0; n]), ranks).expect("program"))
}

pub fn config(executor: ExecutorKind, workers: usize, sim: bool) -> RunConfig {
    RunConfig {
        executor,
        workers,
        sim,
        debug_checks: false,
        ..Default::default()
    }
}
