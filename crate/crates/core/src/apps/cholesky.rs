//! Hierarchical blocked Cholesky factorization.
//!
//! Level 0 is the right-looking loop nest over `B × B` blocks; each block
//! task expands into the same algorithm over its `b × b` tiles. Updates to a
//! block or tile are `Add` accesses, so updates from different `k` commute.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use crate::datahier::{DataDescriptor, DataId, ProcessGrid, Symmetry};
use crate::error::{Error, Result};
use crate::runtime::{Child, Program, RunOutcome, Statement, Tiles};
use crate::versioning::AccessType::{Add, Modify, Read};

pub const MATRIX: DataId = DataId(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CholeskyConfig {
    /// Matrix edge.
    pub n: usize,
    /// Level-1 blocks per edge.
    pub blocks: usize,
    /// Level-2 tiles per edge of one block.
    pub tiles: usize,
    pub grid: ProcessGrid,
}

impl CholeskyConfig {
    pub fn new(n: usize, blocks: usize, tiles: usize, grid: ProcessGrid) -> Result<Self> {
        let cfg = CholeskyConfig { n, blocks, tiles, grid };
        cfg.descriptor()?;
        Ok(cfg)
    }

    /// Leaf tile edge `N / (B·b)`.
    pub fn tile_edge(&self) -> usize {
        self.n / (self.blocks * self.tiles)
    }

    pub fn descriptor(&self) -> Result<DataDescriptor> {
        DataDescriptor::square(MATRIX, self.n, self.blocks, self.tiles, Symmetry::Lower, self.grid)
    }
}

/// Tile kernels used by the leaves. Swap in tuned routines through
/// [`CholeskyProgram::with_kernels`].
pub trait TileKernels: Send + Sync {
    fn potrf(&self, a: &mut [f64], n: usize) -> std::result::Result<(), usize>;
    fn trsm(&self, l: &[f64], b: &mut [f64], n: usize);
    fn syrk(&self, a: &[f64], c: &mut [f64], n: usize);
    fn gemm(&self, a: &[f64], b: &[f64], c: &mut [f64], n: usize);
}

/// The plain loop kernels of [`kernels`].
#[derive(Debug, Default, Clone, Copy)]
pub struct LoopKernels;

impl TileKernels for LoopKernels {
    fn potrf(&self, a: &mut [f64], n: usize) -> std::result::Result<(), usize> {
        kernels::potrf(a, n)
    }
    fn trsm(&self, l: &[f64], b: &mut [f64], n: usize) {
        kernels::trsm(l, b, n)
    }
    fn syrk(&self, a: &[f64], c: &mut [f64], n: usize) {
        kernels::syrk(a, c, n)
    }
    fn gemm(&self, a: &[f64], b: &[f64], c: &mut [f64], n: usize) {
        kernels::gemm(a, b, c, n)
    }
}

pub struct CholeskyProgram {
    cfg: CholeskyConfig,
    data: Vec<DataDescriptor>,
    /// Row-major input; `None` leaves blocks zero (simulation runs).
    matrix: Option<Arc<Vec<f64>>>,
    kernels: Arc<dyn TileKernels>,
}

impl CholeskyProgram {
    /// Factorizes the row-major `n × n` matrix `a`; only its lower triangle
    /// is read.
    pub fn new(cfg: CholeskyConfig, a: Arc<Vec<f64>>) -> Result<Self> {
        if a.len() != cfg.n * cfg.n {
            return Err(Error::Shape(format!(
                "{} elements given for a {}x{} matrix",
                a.len(),
                cfg.n,
                cfg.n
            )));
        }
        let mut p = Self::symbolic(cfg)?;
        p.matrix = Some(a);
        Ok(p)
    }

    /// Program without input data, for simulation mode.
    pub fn symbolic(cfg: CholeskyConfig) -> Result<Self> {
        Ok(CholeskyProgram {
            data: vec![cfg.descriptor()?],
            cfg,
            matrix: None,
            kernels: Arc::new(LoopKernels),
        })
    }

    pub fn with_kernels(mut self, kernels: Arc<dyn TileKernels>) -> Self {
        self.kernels = kernels;
        self
    }

    pub fn config(&self) -> &CholeskyConfig {
        &self.cfg
    }
}

/// Level-0 statements of step `k`.
fn step_statements(blocks: usize, k: usize, out: &mut Vec<Statement>) {
    out.push(Statement::new("potrf", [k, k, k, 0]).access(MATRIX, k, k, Modify));
    for i in k + 1..blocks {
        out.push(
            Statement::new("trsm", [i, k, k, 0])
                .access(MATRIX, i, k, Modify)
                .access(MATRIX, k, k, Read),
        );
    }
    for j in k + 1..blocks {
        for i in j..blocks {
            if i == j {
                out.push(
                    Statement::new("syrk", [i, i, k, 0])
                        .access(MATRIX, i, i, Add)
                        .access(MATRIX, i, k, Read),
                );
            } else {
                out.push(
                    Statement::new("gemm", [i, j, k, 0])
                        .access(MATRIX, i, j, Add)
                        .access(MATRIX, i, k, Read)
                        .access(MATRIX, j, k, Read),
                );
            }
        }
    }
}

/// Children of one level-0 task over a block of `b × b` tiles. Statement
/// args are `[i, j, k, _]`; child args are `[i, j, ti, tj]` of the output.
fn expand_statement(stmt: &Statement, b: usize, out: &mut Vec<Child>) {
    let [i, j, _, _] = stmt.args;
    match stmt.kind {
        "potrf" => {
            for kk in 0..b {
                out.push(Child::new("potrf", [i, i, kk, kk]).with(0, kk, kk, Modify));
                for ii in kk + 1..b {
                    out.push(
                        Child::new("trsm", [i, i, ii, kk])
                            .with(0, ii, kk, Modify)
                            .with(0, kk, kk, Read),
                    );
                }
                for jj in kk + 1..b {
                    for ii in jj..b {
                        if ii == jj {
                            out.push(
                                Child::new("syrk", [i, i, ii, ii])
                                    .with(0, ii, ii, Add)
                                    .with(0, ii, kk, Read),
                            );
                        } else {
                            out.push(
                                Child::new("gemm", [i, i, ii, jj])
                                    .with(0, ii, jj, Add)
                                    .with(0, ii, kk, Read)
                                    .with(0, jj, kk, Read),
                            );
                        }
                    }
                }
            }
        }
        "trsm" => {
            // Tile (r, c) of the panel, with the updates from its left
            // neighbours fused in.
            for r in 0..b {
                for c in 0..b {
                    let mut ch = Child::new("trsm", [i, j, r, c]).with(0, r, c, Modify);
                    for m in 0..c {
                        ch.tile(0, r, m, Read);
                        ch.tile(1, c, m, Read);
                    }
                    ch.tile(1, c, c, Read);
                    out.push(ch);
                }
            }
        }
        "syrk" => {
            for r in 0..b {
                for c in 0..=r {
                    for m in 0..b {
                        out.push(if r == c {
                            Child::new("syrk", [i, i, r, r]).with(0, r, r, Add).with(1, r, m, Read)
                        } else {
                            Child::new("gemm", [i, i, r, c])
                                .with(0, r, c, Add)
                                .with(1, r, m, Read)
                                .with(1, c, m, Read)
                        });
                    }
                }
            }
        }
        "gemm" => {
            for r in 0..b {
                for c in 0..b {
                    for m in 0..b {
                        out.push(
                            Child::new("gemm", [i, j, r, c])
                                .with(0, r, c, Add)
                                .with(1, r, m, Read)
                                .with(2, c, m, Read),
                        );
                    }
                }
            }
        }
        other => unreachable!("unknown cholesky statement {other}"),
    }
}

impl Program for CholeskyProgram {
    fn data(&self) -> &[DataDescriptor] {
        &self.data
    }

    fn steps(&self) -> usize {
        self.cfg.blocks
    }

    fn step(&self, step: usize, out: &mut Vec<Statement>) {
        step_statements(self.cfg.blocks, step, out);
    }

    fn expand(&self, stmt: &Statement, out: &mut Vec<Child>) {
        expand_statement(stmt, self.cfg.tiles, out);
    }

    fn init_block(&self, _: DataId, i: usize, j: usize, content: &mut [f64]) {
        let Some(a) = &self.matrix else { return };
        let desc = &self.data[0];
        let layout = desc.layout();
        let n = self.cfg.tile_edge();
        let edge = self.cfg.n;
        let bh = desc.block_shape().0;
        for (ti, tj) in desc.stored_tiles(i, j) {
            let base = layout.tile_index(ti, tj) * n * n;
            for er in 0..n {
                let row = i * bh + ti * n + er;
                let col0 = j * bh + tj * n;
                content[base + er * n..base + (er + 1) * n]
                    .copy_from_slice(&a[row * edge + col0..row * edge + col0 + n]);
            }
        }
    }

    fn run_leaf(&self, child: &Child, tiles: &Tiles<'_>) -> std::result::Result<(), String> {
        let n = self.cfg.tile_edge();
        let k = &*self.kernels;
        match child.kind {
            "potrf" => {
                let [i, _, t, _] = child.args;
                k.potrf(tiles.write(0), n)
                    .map_err(|row| format!("non-positive pivot in block ({i},{i}), tile ({t},{t}), row {row}"))
            }
            "trsm" => {
                let out = tiles.write(0);
                let pairs = (tiles.len() - 2) / 2;
                for m in 0..pairs {
                    k.gemm(tiles.read(1 + 2 * m), tiles.read(2 + 2 * m), out, n);
                }
                k.trsm(tiles.read(tiles.len() - 1), out, n);
                Ok(())
            }
            "syrk" => {
                k.syrk(tiles.read(1), tiles.write(0), n);
                Ok(())
            }
            "gemm" => {
                k.gemm(tiles.read(1), tiles.read(2), tiles.write(0), n);
                Ok(())
            }
            other => Err(format!("unknown kernel {other}")),
        }
    }

    fn leaf_work(&self) -> u64 {
        (self.cfg.tile_edge() as u64).pow(3)
    }
}

/// Level-0 statements of the whole factorization, in submission order.
pub fn level0_statements(blocks: usize) -> Vec<Statement> {
    let mut out = Vec::new();
    for k in 0..blocks {
        step_statements(blocks, k, &mut out);
    }
    out
}

/// Children a level-0 statement expands into for `b × b` tiles.
pub fn children_of(stmt: &Statement, tiles: usize) -> Vec<Child> {
    let mut out = Vec::new();
    expand_statement(stmt, tiles, &mut out);
    out
}

/// Seeded symmetric positive definite matrix `MᵀM + n·I`, row-major, with
/// `M` uniform in `[-1, 1)`.
pub fn spd_matrix(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Rows of Mᵀ, so that A[i][j] is a dot product of two contiguous rows.
    let mut mt = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            mt[c * n + r] = rng.gen_range(-1.0..1.0);
        }
    }
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let ri = &mt[i * n..(i + 1) * n];
        for j in 0..=i {
            let v: f64 = ri.iter().zip(&mt[j * n..(j + 1) * n]).map(|(x, y)| x * y).sum();
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
        a[i * n + i] += n as f64;
    }
    a
}

/// Serial unblocked factorization of a row-major matrix; returns `L` with a
/// zero upper triangle.
pub fn serial_cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = a.to_vec();
    kernels::potrf(&mut l, n).map_err(|row| Error::Kernel {
        task: 0,
        kind: "potrf".into(),
        reason: format!("non-positive pivot at row {row}"),
    })?;
    Ok(l)
}

/// Visits every lower-triangle element held in the blocks of `outcome` as
/// `(row, col, value)`; returns how many blocks were present.
fn for_each_factor_entry(
    outcome: &RunOutcome,
    cfg: &CholeskyConfig,
    mut f: impl FnMut(usize, usize, f64),
) -> Result<usize> {
    let desc = cfg.descriptor()?;
    let layout = desc.layout();
    let n = cfg.tile_edge();
    let bh = desc.block_shape().0;
    let mut present = 0;
    for (i, j) in desc.blocks() {
        let Some(block) = outcome.block(MATRIX, i, j) else {
            continue;
        };
        present += 1;
        for (ti, tj) in desc.stored_tiles(i, j) {
            let base = layout.tile_index(ti, tj) * n * n;
            for er in 0..n {
                for ec in 0..n {
                    let (r, c) = (i * bh + ti * n + er, j * bh + tj * n + ec);
                    if c <= r {
                        f(r, c, block[base + er * n + ec]);
                    }
                }
            }
        }
    }
    Ok(present)
}

/// Gathers the factor from the owned blocks of a run into a row-major
/// matrix with a zero upper triangle.
pub fn gather_factor(outcome: &RunOutcome, cfg: &CholeskyConfig) -> Result<Vec<f64>> {
    let mut l = vec![0.0; cfg.n * cfg.n];
    let present = for_each_factor_entry(outcome, cfg, |r, c, v| l[r * cfg.n + c] = v)?;
    let expected = cfg.descriptor()?.block_count();
    if present != expected {
        return Err(Error::Shape(format!("run output holds {present} of {expected} blocks")));
    }
    Ok(l)
}

/// Largest difference between the blocks present in `outcome` and the
/// row-major `reference` factor, with the number of blocks compared.
pub fn max_block_diff(outcome: &RunOutcome, cfg: &CholeskyConfig, reference: &[f64]) -> Result<(usize, f64)> {
    let mut worst = 0.0f64;
    let present = for_each_factor_entry(outcome, cfg, |r, c, v| {
        worst = worst.max((v - reference[r * cfg.n + c]).abs())
    })?;
    Ok((present, worst))
}

/// `‖A − L·Lᵀ‖_F / ‖A‖_F` for a row-major lower factor `l`.
pub fn relative_residual(a: &[f64], l: &[f64], n: usize) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let li = &l[i * n..i * n + i + 1];
        for j in 0..=i {
            let llt: f64 = li[..=j].iter().zip(&l[j * n..j * n + j + 1]).map(|(x, y)| x * y).sum();
            let w = if i == j { 1.0 } else { 2.0 };
            num += w * (a[i * n + j] - llt).powi(2);
            den += w * a[i * n + j].powi(2);
        }
    }
    (num / den).sqrt()
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{run_simnet, RunConfig};

    #[test]
    fn four_by_four_loop_nest_has_twenty_tasks() {
        let stmts = level0_statements(4);
        let count = |k: &str| stmts.iter().filter(|s| s.kind == k).count();
        assert_eq!(stmts.len(), 20);
        assert_eq!(
            (count("potrf"), count("trsm"), count("syrk"), count("gemm")),
            (4, 6, 6, 4)
        );
    }

    #[test]
    fn block_potrf_with_three_tiles_has_ten_children() {
        let stmts = level0_statements(2);
        let kids = children_of(&stmts[0], 3);
        let count = |k: &str| kids.iter().filter(|c| c.kind == k).count();
        assert_eq!(
            (count("potrf"), count("trsm"), count("syrk"), count("gemm")),
            (3, 3, 3, 1)
        );
    }

    #[test]
    fn single_tile_two_by_two() {
        let cfg = CholeskyConfig::new(2, 1, 1, ProcessGrid::single()).unwrap();
        let prog = CholeskyProgram::new(cfg, Arc::new(vec![4.0, 2.0, 2.0, 5.0])).unwrap();
        let out = run_simnet(Arc::new(prog), 1, &RunConfig::default()).unwrap();
        assert_eq!(gather_factor(&out, &cfg).unwrap(), vec![2.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn indefinite_input_names_the_block() {
        let cfg = CholeskyConfig::new(4, 2, 1, ProcessGrid::single()).unwrap();
        let mut a = spd_matrix(4, 1);
        a[3 * 4 + 3] = -100.0;
        let prog = CholeskyProgram::new(cfg, Arc::new(a)).unwrap();
        let err = run_simnet(Arc::new(prog), 1, &RunConfig::default()).unwrap_err();
        assert!(err.to_string().contains("block (1,1)"), "{err}");
    }

    #[test]
    fn small_blocked_run_matches_serial() {
        let cfg = CholeskyConfig::new(24, 3, 2, ProcessGrid::new(2, 1).unwrap()).unwrap();
        let a = spd_matrix(24, 9);
        let prog = CholeskyProgram::new(cfg, Arc::new(a.clone())).unwrap();
        let out = run_simnet(Arc::new(prog), 2, &RunConfig::default()).unwrap();
        let l = gather_factor(&out, &cfg).unwrap();
        assert!(relative_residual(&a, &l, 24) < 1e-13);
        assert!(max_abs_diff(&l, &serial_cholesky(&a, 24).unwrap()) < 1e-12);
    }
}
