//! Classical RK4 time stepping of `H' = D·H` for a sparse `D`.
//!
//! Every step is the statement sequence
//!
//! ```text
//! f(F1, H);  add(H1, H, dt/2, F1);
//! f(F2, H1); add(H2, H, dt/2, F2);
//! f(F3, H2); add(H3, H, dt, F3);
//! f(F4, H3); step(H, F1, F2, F3, F4);
//! ```
//!
//! issued once per block row. Vectors and the rows of `D` are distributed
//! by block rows. An `f` task reads only the vector blocks its nonzero
//! column blocks touch.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datahier::{DataDescriptor, DataId, ProcessGrid};
use crate::error::{Error, Result};
use crate::runtime::{Child, Program, RunOutcome, Statement, Tiles};
use crate::versioning::AccessType::{Modify, Read};

pub const H: DataId = DataId(0);
pub const F1: DataId = DataId(1);
pub const F2: DataId = DataId(2);
pub const F3: DataId = DataId(3);
pub const F4: DataId = DataId(4);
pub const H1: DataId = DataId(5);
pub const H2: DataId = DataId(6);
pub const H3: DataId = DataId(7);

const STAGES: [(DataId, DataId); 4] = [(F1, H), (F2, H1), (F3, H2), (F4, H3)];

/// Most tile accesses one leaf may carry.
const MAX_TILE_ACCESSES: usize = 64;

/// Square sparse matrix in compressed row storage.
#[derive(Debug, Clone, PartialEq)]
pub struct CrsMatrix {
    n: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CrsMatrix {
    pub fn new(n: usize, offsets: Vec<usize>, cols: Vec<usize>, vals: Vec<f64>) -> Result<Self> {
        if offsets.len() != n + 1 || offsets[0] != 0 || offsets[n] != cols.len() || cols.len() != vals.len() {
            return Err(Error::Shape("row offsets do not match the stored entries".into()));
        }
        for r in 0..n {
            if offsets[r] > offsets[r + 1] {
                return Err(Error::Shape(format!("row offsets decrease at row {r}")));
            }
            let row = &cols[offsets[r]..offsets[r + 1]];
            if row.iter().any(|&c| c >= n) {
                return Err(Error::OutOfBounds(format!("row {r} has a column index outside 0..{n}")));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Shape(format!(
                    "column indices of row {r} are not strictly increasing"
                )));
            }
        }
        Ok(CrsMatrix { n, offsets, cols, vals })
    }

    /// Builds from `(row, col, value)` entries; duplicates are summed.
    pub fn from_triplets(n: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = entries.iter().find(|&&(r, c, _)| r >= n || c >= n) {
            return Err(Error::OutOfBounds(format!("entry ({r},{c}) outside a {n}x{n} matrix")));
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut offsets = vec![0; n + 1];
        let mut cols: Vec<usize> = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *vals.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((r, c));
            cols.push(c);
            vals.push(v);
            offsets[r + 1] += 1;
        }
        for r in 0..n {
            offsets[r + 1] += offsets[r];
        }
        Self::new(n, offsets, cols, vals)
    }

    /// Parses the Matrix Market coordinate format (`real`, `integer` or
    /// `pattern`; `general` or `symmetric`).
    pub fn parse_matrix_market(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let banner = lines
            .next()
            .ok_or_else(|| Error::Parse("empty Matrix Market input".into()))?;
        let words: Vec<String> = banner.split_whitespace().map(str::to_ascii_lowercase).collect();
        if words.len() != 5 || words[0] != "%%matrixmarket" || words[1] != "matrix" || words[2] != "coordinate" {
            return Err(Error::Parse(format!("unsupported Matrix Market banner `{banner}`")));
        }
        let pattern = match words[3].as_str() {
            "real" | "integer" | "double" => false,
            "pattern" => true,
            other => return Err(Error::Parse(format!("unsupported field type `{other}`"))),
        };
        let symmetric = match words[4].as_str() {
            "general" => false,
            "symmetric" => true,
            other => return Err(Error::Parse(format!("unsupported symmetry `{other}`"))),
        };
        let mut body = lines
            .map(str::trim)
            .enumerate()
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('%'));
        let (_, size) = body.next().ok_or_else(|| Error::Parse("missing size line".into()))?;
        let dims: Vec<usize> = size
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| Error::Parse(format!("size line `{size}`: {e}"))))
            .collect::<Result<_>>()?;
        let [rows, cols, nnz] = dims[..] else {
            return Err(Error::Parse(format!("size line `{size}` needs three numbers")));
        };
        if rows != cols {
            return Err(Error::Shape(format!("matrix is {rows}x{cols}, not square")));
        }
        let mut entries = Vec::with_capacity(if symmetric { 2 * nnz } else { nnz });
        for (ln, line) in body {
            let t: Vec<&str> = line.split_whitespace().collect();
            let want = if pattern { 2 } else { 3 };
            if t.len() < want {
                return Err(Error::Parse(format!("line {}: expected {want} fields", ln + 2)));
            }
            let idx = |s: &str| -> Result<usize> {
                let v: usize = s
                    .parse()
                    .map_err(|e| Error::Parse(format!("line {}: `{s}`: {e}", ln + 2)))?;
                v.checked_sub(1)
                    .ok_or_else(|| Error::Parse(format!("line {}: indices are 1-based", ln + 2)))
            };
            let (r, c) = (idx(t[0])?, idx(t[1])?);
            let v = if pattern {
                1.0
            } else {
                t[2].parse()
                    .map_err(|e| Error::Parse(format!("line {}: `{}`: {e}", ln + 2, t[2])))?
            };
            entries.push((r, c, v));
            if symmetric && r != c {
                entries.push((c, r, v));
            }
        }
        let stored = if symmetric {
            entries.iter().filter(|(r, c, _)| r >= c).count()
        } else {
            entries.len()
        };
        if stored != nnz {
            return Err(Error::Parse(format!("header promises {nnz} entries, found {stored}")));
        }
        Self::from_triplets(rows, entries)
    }

    pub fn read_matrix_market(path: &Path) -> Result<Self> {
        Self::parse_matrix_market(&fs::read_to_string(path)?)
    }

    /// Seeded random matrix with `per_row` entries per row (the diagonal
    /// included), scaled so that every row sum of magnitudes is at most 1.
    pub fn random(n: usize, per_row: usize, seed: u64) -> Result<Self> {
        if per_row == 0 || per_row > n {
            return Err(Error::Config(format!("{per_row} entries per row in a {n}x{n} matrix")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::with_capacity(n * per_row);
        for r in 0..n {
            entries.push((r, r, rng.gen_range(-1.0..1.0) / per_row as f64));
            let mut placed = 1;
            while placed < per_row {
                for c in sample(&mut rng, n, per_row - placed) {
                    if c != r && !entries[entries.len() - placed..].iter().any(|e| e.1 == c) {
                        entries.push((r, c, rng.gen_range(-1.0..1.0) / per_row as f64));
                        placed += 1;
                    }
                }
            }
        }
        Self::from_triplets(n, entries)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let s = self.offsets[r]..self.offsets[r + 1];
        (&self.cols[s.clone()], &self.vals[s])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rk4Config {
    pub dt: f64,
    pub steps: usize,
    /// Block rows (level 1).
    pub blocks: usize,
    /// Sub-rows per block row (level 2).
    pub tiles: usize,
}

pub struct Rk4Program {
    cfg: Rk4Config,
    d: Arc<CrsMatrix>,
    h0: Arc<Vec<f64>>,
    data: Vec<DataDescriptor>,
    tile_rows: usize,
    /// Nonzero column blocks of each block row.
    col_blocks: Vec<Vec<usize>>,
    /// Global vector tiles read by each global sub-row.
    row_tiles: Vec<Vec<usize>>,
}

impl Rk4Program {
    /// Vectors are spread over a `ranks × 1` grid.
    pub fn new(cfg: Rk4Config, d: Arc<CrsMatrix>, h0: Arc<Vec<f64>>, ranks: usize) -> Result<Self> {
        let n = d.dim();
        if h0.len() != n {
            return Err(Error::Shape(format!(
                "initial vector has {} entries, matrix is {n}x{n}",
                h0.len()
            )));
        }
        let grid = ProcessGrid::column(ranks)?;
        let data = (0..8)
            .map(|k| DataDescriptor::vector(DataId(k), n, cfg.blocks, cfg.tiles, grid))
            .collect::<Result<Vec<_>>>()?;
        let tile_rows = n / (cfg.blocks * cfg.tiles);
        let mut row_tiles = Vec::with_capacity(cfg.blocks * cfg.tiles);
        for g in 0..cfg.blocks * cfg.tiles {
            let mut touched: Vec<usize> = (g * tile_rows..(g + 1) * tile_rows)
                .flat_map(|r| d.row(r).0.iter().map(|&c| c / tile_rows))
                .collect();
            touched.sort_unstable();
            touched.dedup();
            if touched.len() + 1 > MAX_TILE_ACCESSES {
                return Err(Error::Config(format!(
                    "sub-row {g} reads {} vector tiles; at most {} fit one leaf, use fewer sub-rows",
                    touched.len(),
                    MAX_TILE_ACCESSES - 1
                )));
            }
            row_tiles.push(touched);
        }
        let col_blocks = (0..cfg.blocks)
            .map(|i| {
                let mut js: Vec<usize> = row_tiles[i * cfg.tiles..(i + 1) * cfg.tiles]
                    .iter()
                    .flatten()
                    .map(|t| t / cfg.tiles)
                    .collect();
                js.sort_unstable();
                js.dedup();
                js
            })
            .collect();
        Ok(Rk4Program {
            cfg,
            d,
            h0,
            data,
            tile_rows,
            col_blocks,
            row_tiles,
        })
    }

    pub fn config(&self) -> &Rk4Config {
        &self.cfg
    }

    /// Level-0 statements of one step; every stage runs over all block rows
    /// before the next stage starts.
    fn statements(&self, out: &mut Vec<Statement>) {
        let blocks = self.cfg.blocks;
        for (s, &(f, x)) in STAGES.iter().enumerate() {
            for i in 0..blocks {
                let mut st = Statement::new("f", [i, f.0 as usize, x.0 as usize, 0]).access(f, i, 0, Modify);
                for &j in &self.col_blocks[i] {
                    st = st.access(x, j, 0, Read);
                }
                out.push(st);
            }
            if s < 3 {
                let target = [H1, H2, H3][s];
                for i in 0..blocks {
                    out.push(
                        Statement::new("add", [i, target.0 as usize, s, 0])
                            .access(target, i, 0, Modify)
                            .access(H, i, 0, Read)
                            .access(f, i, 0, Read),
                    );
                }
            }
        }
        for i in 0..blocks {
            let mut st = Statement::new("step", [i, 0, 0, 0]).access(H, i, 0, Modify);
            for f in [F1, F2, F3, F4] {
                st = st.access(f, i, 0, Read);
            }
            out.push(st);
        }
    }
}

impl Program for Rk4Program {
    fn data(&self) -> &[DataDescriptor] {
        &self.data
    }

    fn steps(&self) -> usize {
        self.cfg.steps
    }

    fn step(&self, _: usize, out: &mut Vec<Statement>) {
        self.statements(out);
    }

    fn expand(&self, stmt: &Statement, out: &mut Vec<Child>) {
        let i = stmt.args[0];
        let b = self.cfg.tiles;
        for s in 0..b {
            let mut ch = Child::new(stmt.kind, [i, s, stmt.args[1], stmt.args[2]]).with(0, s, 0, Modify);
            match stmt.kind {
                "f" => {
                    for &t in &self.row_tiles[i * b + s] {
                        let arg = 1 + self.col_blocks[i].binary_search(&(t / b)).expect("column block");
                        ch.tile(arg, t % b, 0, Read);
                    }
                }
                "add" => {
                    ch.tile(1, s, 0, Read);
                    ch.tile(2, s, 0, Read);
                }
                "step" => {
                    for arg in 1..=4 {
                        ch.tile(arg, s, 0, Read);
                    }
                }
                other => unreachable!("unknown rk4 statement {other}"),
            }
            out.push(ch);
        }
    }

    fn init_block(&self, data: DataId, i: usize, _: usize, content: &mut [f64]) {
        if data == H {
            let len = content.len();
            content.copy_from_slice(&self.h0[i * len..(i + 1) * len]);
        }
    }

    fn run_leaf(&self, child: &Child, tiles: &Tiles<'_>) -> std::result::Result<(), String> {
        let [i, s, _, stage] = child.args;
        let tr = self.tile_rows;
        let dt = self.cfg.dt;
        let out = tiles.write(0);
        match child.kind {
            "f" => {
                let g = i * self.cfg.tiles + s;
                let touched = &self.row_tiles[g];
                let xs: Vec<&[f64]> = (1..tiles.len()).map(|k| tiles.read(k)).collect();
                for (e, o) in out.iter_mut().enumerate() {
                    let (cols, vals) = self.d.row(g * tr + e);
                    let mut sum = 0.0;
                    for (&c, &v) in cols.iter().zip(vals) {
                        let k = touched.binary_search(&(c / tr)).expect("touched tile");
                        sum += v * xs[k][c % tr];
                    }
                    *o = sum;
                }
            }
            "add" => {
                let alpha = if stage == 2 { dt } else { 0.5 * dt };
                let (h, f) = (tiles.read(1), tiles.read(2));
                for e in 0..out.len() {
                    out[e] = h[e] + alpha * f[e];
                }
            }
            "step" => {
                let (f1, f2, f3, f4) = (tiles.read(1), tiles.read(2), tiles.read(3), tiles.read(4));
                for e in 0..out.len() {
                    out[e] += dt / 6.0 * (f1[e] + 2.0 * f2[e] + 2.0 * f3[e] + f4[e]);
                }
            }
            other => return Err(format!("unknown kernel {other}")),
        }
        Ok(())
    }

    fn leaf_work(&self) -> u64 {
        self.tile_rows as u64
    }
}

/// Serial RK4 with the same stage formulas.
pub fn serial_rk4(d: &CrsMatrix, h0: &[f64], dt: f64, steps: usize) -> Vec<f64> {
    let n = d.dim();
    let matvec = |x: &[f64], y: &mut [f64]| {
        for (r, yr) in y.iter_mut().enumerate() {
            let (cols, vals) = d.row(r);
            *yr = cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).fold(0.0, |a, t| a + t);
        }
    };
    let mut h = h0.to_vec();
    let (mut f1, mut f2, mut f3, mut f4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for _ in 0..steps {
        matvec(&h, &mut f1);
        for r in 0..n {
            tmp[r] = h[r] + 0.5 * dt * f1[r];
        }
        matvec(&tmp, &mut f2);
        for r in 0..n {
            tmp[r] = h[r] + 0.5 * dt * f2[r];
        }
        matvec(&tmp, &mut f3);
        for r in 0..n {
            tmp[r] = h[r] + dt * f3[r];
        }
        matvec(&tmp, &mut f4);
        for r in 0..n {
            h[r] += dt / 6.0 * (f1[r] + 2.0 * f2[r] + 2.0 * f3[r] + f4[r]);
        }
    }
    h
}

/// Final `H` gathered from the owned blocks of a run.
pub fn gather_state(outcome: &RunOutcome, program: &Rk4Program) -> Result<Vec<f64>> {
    let mut h = Vec::with_capacity(program.d.dim());
    for i in 0..program.cfg.blocks {
        let block = outcome
            .block(H, i, 0)
            .ok_or_else(|| Error::Shape(format!("block row {i} missing from the run output")))?;
        h.extend_from_slice(block);
    }
    Ok(h)
}

/// Largest relative deviation of the `H` blocks present in `outcome` from
/// `reference`, with the number of blocks compared.
pub fn max_block_deviation(outcome: &RunOutcome, program: &Rk4Program, reference: &[f64]) -> (usize, f64) {
    let mut present = 0;
    let mut worst = 0.0f64;
    for i in 0..program.cfg.blocks {
        if let Some(block) = outcome.block(H, i, 0) {
            present += 1;
            let base = i * block.len();
            worst = worst.max(max_relative_deviation(block, &reference[base..base + block.len()]));
        }
    }
    (present, worst)
}

/// Largest `|x − y| / max(|y|, tiny)` over all entries.
pub fn max_relative_deviation(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{run_simnet, RunConfig};

    #[test]
    fn matrix_market_general_and_symmetric() {
        let m = CrsMatrix::parse_matrix_market(
            "%%MatrixMarket matrix coordinate real general\n% c\n3 3 3\n1 1 2.0\n3 1 -1\n2 3 4.5\n",
        )
        .unwrap();
        assert_eq!(m.row(2), (&[0usize][..], &[-1.0][..]));
        let s =
            CrsMatrix::parse_matrix_market("%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n1 1 1\n2 1 3\n")
                .unwrap();
        assert_eq!(s.row(0), (&[0usize, 1][..], &[1.0, 3.0][..]));
        assert!(
            CrsMatrix::parse_matrix_market("%%MatrixMarket matrix coordinate real general\n2 2 5\n1 1 1\n").is_err()
        );
    }

    #[test]
    fn crs_rejects_unsorted_rows() {
        assert!(CrsMatrix::new(2, vec![0, 2, 2], vec![1, 0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn random_rows_have_requested_count() {
        let m = CrsMatrix::random(50, 7, 3).unwrap();
        assert!((0..50).all(|r| m.row(r).0.len() == 7 && m.row(r).0.contains(&r)));
    }

    #[test]
    fn scalar_step_matches_amplification_factor() {
        let (lambda, dt) = (-0.7, 0.1);
        let d = Arc::new(CrsMatrix::from_triplets(1, vec![(0, 0, lambda)]).unwrap());
        let cfg = Rk4Config {
            dt,
            steps: 1,
            blocks: 1,
            tiles: 1,
        };
        let prog = Arc::new(Rk4Program::new(cfg, d, Arc::new(vec![1.0]), 1).unwrap());
        let out = run_simnet(prog.clone(), 1, &RunConfig::default()).unwrap();
        let x: f64 = lambda * dt;
        let expect = 1.0 + x + x * x / 2.0 + x.powi(3) / 6.0 + x.powi(4) / 24.0;
        assert!((gather_state(&out, &prog).unwrap()[0] - expect).abs() <= 1e-15);
    }

    #[test]
    fn block_diagonal_operator_sends_nothing() {
        let n = 16;
        let entries = (0..n).flat_map(|r| {
            let base = r / 4 * 4;
            (base..base + 4).map(move |c| (r, c, 0.1 * (r + c) as f64))
        });
        let d = Arc::new(CrsMatrix::from_triplets(n, entries.collect()).unwrap());
        let cfg = Rk4Config {
            dt: 0.01,
            steps: 3,
            blocks: 4,
            tiles: 2,
        };
        let h0: Vec<f64> = (0..n).map(|r| r as f64).collect();
        let prog = Arc::new(Rk4Program::new(cfg, d.clone(), Arc::new(h0.clone()), 4).unwrap());
        let out = run_simnet(prog.clone(), 4, &RunConfig::default()).unwrap();
        assert_eq!(out.stats().total_messages(), 0);
        let h = gather_state(&out, &prog).unwrap();
        assert!(max_relative_deviation(&h, &serial_rk4(&d, &h0, 0.01, 3)) <= 1e-12);
    }
}
