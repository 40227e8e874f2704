//! Hierarchical decomposition of distributed arrays.
//!
//! A distributed array is cut into a `B_r × B_c` grid of level-1 blocks, the
//! unit of ownership and communication. Each block is cut again into a
//! `b_r × b_c` grid of leaf tiles for node-local computation. A block's tiles
//! are stored back to back, row-major by tile index, and each tile is stored
//! row-major internally, so a block is one contiguous byte range and any
//! tile is a sub-range of it.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::versioning::HandleId;

pub type Rank = u32;

pub const ELEMENT_SIZE: usize = std::mem::size_of::<f64>();

/// `p × q` arrangement of ranks, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProcessGrid {
    p: usize,
    q: usize,
}

impl ProcessGrid {
    pub fn new(p: usize, q: usize) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(Error::Config(format!("process grid {p}x{q} has an empty dimension")));
        }
        Ok(ProcessGrid { p, q })
    }

    pub fn single() -> Self {
        ProcessGrid { p: 1, q: 1 }
    }

    /// A `ranks × 1` column of ranks, used for block-row distributions.
    pub fn column(ranks: usize) -> Result<Self> {
        Self::new(ranks, 1)
    }

    pub fn rows(&self) -> usize {
        self.p
    }

    pub fn cols(&self) -> usize {
        self.q
    }

    pub fn ranks(&self) -> usize {
        self.p * self.q
    }

    pub fn rank_at(&self, i: usize, j: usize) -> Rank {
        (i * self.q + j) as Rank
    }
}

impl fmt::Display for ProcessGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.p, self.q)
    }
}

impl std::str::FromStr for ProcessGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (p, q) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Parse(format!("grid `{s}` is not of the form PxQ")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("grid `{s}`: {e}")))
        };
        ProcessGrid::new(parse(p)?, parse(q)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symmetry {
    Full,
    /// Only level-1 blocks with `i >= j` exist.
    Lower,
}

impl fmt::Display for Symmetry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Symmetry::Full => "full",
            Symmetry::Lower => "lower",
        })
    }
}

impl std::str::FromStr for Symmetry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Symmetry::Full),
            "lower" => Ok(Symmetry::Lower),
            other => Err(Error::Parse(format!("unknown symmetry `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DataId(pub u32);

/// A partition at one level of the hierarchy. Tile indices are relative to
/// their level-1 block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PartitionId {
    Whole(DataId),
    Block {
        data: DataId,
        i: usize,
        j: usize,
    },
    Tile {
        data: DataId,
        i: usize,
        j: usize,
        ti: usize,
        tj: usize,
    },
}

impl PartitionId {
    pub fn level(&self) -> u8 {
        match self {
            PartitionId::Whole(_) => 0,
            PartitionId::Block { .. } => 1,
            PartitionId::Tile { .. } => 2,
        }
    }

    pub fn data(&self) -> DataId {
        match *self {
            PartitionId::Whole(d) => d,
            PartitionId::Block { data, .. } | PartitionId::Tile { data, .. } => data,
        }
    }
}

/// Describes one distributed array and how it is cut and placed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataDescriptor {
    id: DataId,
    blocks: (usize, usize),
    tiles: (usize, usize),
    tile: (usize, usize),
    symmetry: Symmetry,
    grid: ProcessGrid,
}

impl DataDescriptor {
    /// Square `n × n` matrix with `B × B` blocks of `b × b` tiles.
    pub fn square(
        id: DataId,
        n: usize,
        blocks: usize,
        tiles: usize,
        symmetry: Symmetry,
        grid: ProcessGrid,
    ) -> Result<Self> {
        if blocks == 0 || tiles == 0 || n == 0 {
            return Err(Error::Config("matrix, block and tile counts must be positive".into()));
        }
        if !n.is_multiple_of(blocks * tiles) {
            return Err(Error::Config(format!(
                "matrix edge {n} is not divisible by B*b = {}",
                blocks * tiles
            )));
        }
        let edge = n / (blocks * tiles);
        Ok(DataDescriptor {
            id,
            blocks: (blocks, blocks),
            tiles: (tiles, tiles),
            tile: (edge, edge),
            symmetry,
            grid,
        })
    }

    /// Length-`n` vector cut into `B` block rows of `b` sub-rows.
    pub fn vector(id: DataId, n: usize, blocks: usize, tiles: usize, grid: ProcessGrid) -> Result<Self> {
        if blocks == 0 || tiles == 0 || n == 0 {
            return Err(Error::Config("vector, block and tile counts must be positive".into()));
        }
        if !n.is_multiple_of(blocks * tiles) {
            return Err(Error::Config(format!(
                "vector length {n} is not divisible by B*b = {}",
                blocks * tiles
            )));
        }
        Ok(DataDescriptor {
            id,
            blocks: (blocks, 1),
            tiles: (tiles, 1),
            tile: (n / (blocks * tiles), 1),
            symmetry: Symmetry::Full,
            grid,
        })
    }

    pub fn id(&self) -> DataId {
        self.id
    }

    pub fn grid(&self) -> ProcessGrid {
        self.grid
    }

    pub fn symmetry(&self) -> Symmetry {
        self.symmetry
    }

    /// Level-1 grid dimensions.
    pub fn block_grid(&self) -> (usize, usize) {
        self.blocks
    }

    /// Leaf tiles per level-1 block along each dimension.
    pub fn tile_grid(&self) -> (usize, usize) {
        self.tiles
    }

    /// Elements per leaf tile along each dimension.
    pub fn tile_shape(&self) -> (usize, usize) {
        self.tile
    }

    pub fn rows(&self) -> usize {
        self.blocks.0 * self.tiles.0 * self.tile.0
    }

    pub fn cols(&self) -> usize {
        self.blocks.1 * self.tiles.1 * self.tile.1
    }

    pub fn block_shape(&self) -> (usize, usize) {
        (self.tiles.0 * self.tile.0, self.tiles.1 * self.tile.1)
    }

    pub fn has_block(&self, i: usize, j: usize) -> bool {
        i < self.blocks.0 && j < self.blocks.1 && (self.symmetry == Symmetry::Full || i >= j)
    }

    fn check_block(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.blocks.0 || j >= self.blocks.1 {
            return Err(Error::OutOfBounds(format!(
                "block ({i},{j}) outside {}x{} grid",
                self.blocks.0, self.blocks.1
            )));
        }
        if self.symmetry == Symmetry::Lower && i < j {
            return Err(Error::OutOfBounds(format!(
                "block ({i},{j}) is in the unstored upper triangle"
            )));
        }
        Ok(())
    }

    /// Block-cyclic owner of level-1 block `(i, j)`.
    pub fn owner_of(&self, i: usize, j: usize) -> Result<Rank> {
        self.check_block(i, j)?;
        Ok(self.grid.rank_at(i % self.grid.p, j % self.grid.q))
    }

    /// All stored level-1 blocks in row-major order.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (br, bc) = self.blocks;
        (0..br)
            .flat_map(move |i| (0..bc).map(move |j| (i, j)))
            .filter(move |&(i, j)| self.has_block(i, j))
    }

    pub fn block_count(&self) -> usize {
        self.blocks().count()
    }

    /// Child partitions of `parent`, row-major. Diagonal blocks of a lower
    /// triangular array yield only their lower tiles.
    pub fn split(&self, parent: PartitionId) -> Result<Vec<PartitionId>> {
        if parent.data() != self.id {
            return Err(Error::OutOfBounds(format!(
                "partition {parent:?} belongs to another array"
            )));
        }
        match parent {
            PartitionId::Whole(data) => Ok(self.blocks().map(|(i, j)| PartitionId::Block { data, i, j }).collect()),
            PartitionId::Block { data, i, j } => {
                self.check_block(i, j)?;
                Ok(self
                    .stored_tiles(i, j)
                    .map(|(ti, tj)| PartitionId::Tile { data, i, j, ti, tj })
                    .collect())
            }
            PartitionId::Tile { .. } => Err(Error::OutOfBounds("cannot split a leaf tile".into())),
        }
    }

    /// Tiles of block `(i, j)` that carry data, row-major.
    pub fn stored_tiles(&self, i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tr, tc) = self.tiles;
        let lower_diag = self.symmetry == Symmetry::Lower && i == j;
        (0..tr)
            .flat_map(move |ti| (0..tc).map(move |tj| (ti, tj)))
            .filter(move |&(ti, tj)| !lower_diag || ti >= tj)
    }

    pub fn handle_id(&self, i: usize, j: usize) -> HandleId {
        HandleId(((self.id.0 as u64) << 32) | (i * self.blocks.1 + j) as u64)
    }

    /// Inverse of [`handle_id`](Self::handle_id) for handles of this array.
    pub fn block_of_handle(&self, h: HandleId) -> Option<(usize, usize)> {
        if (h.0 >> 32) as u32 != self.id.0 {
            return None;
        }
        let lin = (h.0 & 0xffff_ffff) as usize;
        let (i, j) = (lin / self.blocks.1, lin % self.blocks.1);
        self.has_block(i, j).then_some((i, j))
    }

    pub fn layout(&self) -> TileLayout {
        TileLayout {
            tiles: self.tiles,
            tile: self.tile,
        }
    }

    /// Byte length of one level-1 block's content.
    pub fn block_bytes(&self) -> usize {
        self.layout().content_bytes()
    }

    /// Block and in-block byte offset holding global element `(r, c)`.
    pub fn element_offset(&self, r: usize, c: usize) -> Option<((usize, usize), usize)> {
        if r >= self.rows() || c >= self.cols() {
            return None;
        }
        let (bh, bw) = self.block_shape();
        let (i, j) = (r / bh, c / bw);
        if !self.has_block(i, j) {
            return None;
        }
        let (lr, lc) = (r % bh, c % bw);
        let (ti, tj) = (lr / self.tile.0, lc / self.tile.1);
        let (er, ec) = (lr % self.tile.0, lc % self.tile.1);
        let tile_start = self.layout().tile_offset(ti, tj);
        Some(((i, j), tile_start + (er * self.tile.1 + ec) * ELEMENT_SIZE))
    }
}

/// Byte layout of the leaf tiles inside one level-1 block's content region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileLayout {
    tiles: (usize, usize),
    tile: (usize, usize),
}

impl TileLayout {
    pub fn tile_elements(&self) -> usize {
        self.tile.0 * self.tile.1
    }

    pub fn tile_bytes(&self) -> usize {
        self.tile_elements() * ELEMENT_SIZE
    }

    pub fn tile_grid(&self) -> (usize, usize) {
        self.tiles
    }

    pub fn tile_shape(&self) -> (usize, usize) {
        self.tile
    }

    pub fn content_bytes(&self) -> usize {
        self.tiles.0 * self.tiles.1 * self.tile_bytes()
    }

    pub fn tile_index(&self, ti: usize, tj: usize) -> usize {
        ti * self.tiles.1 + tj
    }

    pub fn tile_offset(&self, ti: usize, tj: usize) -> usize {
        self.tile_index(ti, tj) * self.tile_bytes()
    }

    /// Byte range of a leaf tile relative to the block's content start.
    pub fn leaf_view(&self, child: PartitionId) -> Result<Range<usize>> {
        let PartitionId::Tile { ti, tj, .. } = child else {
            return Err(Error::OutOfBounds(format!("{child:?} is not a leaf tile")));
        };
        if ti >= self.tiles.0 || tj >= self.tiles.1 {
            return Err(Error::OutOfBounds(format!(
                "tile ({ti},{tj}) outside {}x{} tile grid",
                self.tiles.0, self.tiles.1
            )));
        }
        let start = self.tile_offset(ti, tj);
        Ok(start..start + self.tile_bytes())
    }
}

/// A packed distributed array: one contiguous content buffer per stored
/// level-1 block, in [`DataDescriptor::blocks`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct TiledMatrix {
    pub desc: DataDescriptor,
    pub blocks: Vec<Vec<f64>>,
}

impl TiledMatrix {
    pub fn block(&self, i: usize, j: usize) -> Option<&[f64]> {
        let idx = self.desc.blocks().position(|b| b == (i, j))?;
        Some(&self.blocks[idx])
    }
}

/// Reorders a conventional row-major matrix into tiled block storage.
pub fn pack_from_rowmajor(data: &[f64], desc: &DataDescriptor) -> Result<TiledMatrix> {
    let (rows, cols) = (desc.rows(), desc.cols());
    if data.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} elements given for a {rows}x{cols} array",
            data.len()
        )));
    }
    let words = desc.block_bytes() / ELEMENT_SIZE;
    let blocks = desc
        .blocks()
        .map(|(i, j)| {
            let mut out = vec![0.0; words];
            walk_block(desc, i, j, |global, local| out[local] = data[global]);
            out
        })
        .collect();
    Ok(TiledMatrix {
        desc: desc.clone(),
        blocks,
    })
}

/// Inverse of [`pack_from_rowmajor`]. Elements of absent blocks are zero.
pub fn unpack_to_rowmajor(tiled: &TiledMatrix) -> Result<Vec<f64>> {
    let desc = &tiled.desc;
    let words = desc.block_bytes() / ELEMENT_SIZE;
    if tiled.blocks.len() != desc.block_count() || tiled.blocks.iter().any(|b| b.len() != words) {
        return Err(Error::Shape("tiled storage does not match its descriptor".into()));
    }
    let mut out = vec![0.0; desc.rows() * desc.cols()];
    for ((i, j), block) in desc.blocks().zip(&tiled.blocks) {
        walk_block(desc, i, j, |global, local| out[global] = block[local]);
    }
    Ok(out)
}

/// Visits every element of block `(i, j)` as (row-major global index,
/// tiled local index).
fn walk_block(desc: &DataDescriptor, i: usize, j: usize, mut f: impl FnMut(usize, usize)) {
    let (bh, bw) = desc.block_shape();
    let (tr, tc) = desc.tile_grid();
    let (nh, nw) = desc.tile_shape();
    let cols = desc.cols();
    let mut local = 0;
    for ti in 0..tr {
        for tj in 0..tc {
            for er in 0..nh {
                let row = i * bh + ti * nh + er;
                for ec in 0..nw {
                    let col = j * bw + tj * nw + ec;
                    f(row * cols + col, local);
                    local += 1;
                }
            }
        }
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

/// Header of a dense matrix file: shape and symmetry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixMeta {
    pub rows: usize,
    pub cols: usize,
    pub symmetry: Symmetry,
}

/// Writes row-major little-endian `f64` data to `path` and its shape to
/// `path.meta`.
pub fn write_matrix(path: &Path, meta: MatrixMeta, data: &[f64]) -> Result<()> {
    if data.len() != meta.rows * meta.cols {
        return Err(Error::Shape(format!(
            "{} elements for a {}x{} matrix",
            data.len(),
            meta.rows,
            meta.cols
        )));
    }
    let mut bytes = Vec::with_capacity(data.len() * ELEMENT_SIZE);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    fs::write(
        meta_path(path),
        format!("rows {}\ncols {}\nsymmetry {}\n", meta.rows, meta.cols, meta.symmetry),
    )?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<(MatrixMeta, Vec<f64>)> {
    let text = fs::read_to_string(meta_path(path))?;
    let (mut rows, mut cols, mut symmetry) = (None, None, Symmetry::Full);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::Parse(format!("bad meta line `{line}`")))?;
        let value = value.trim();
        let num = || {
            value
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("`{line}`: {e}")))
        };
        match key {
            "rows" => rows = Some(num()?),
            "cols" => cols = Some(num()?),
            "symmetry" => symmetry = value.parse()?,
            other => return Err(Error::Parse(format!("unknown meta key `{other}`"))),
        }
    }
    let meta = MatrixMeta {
        rows: rows.ok_or_else(|| Error::Parse("meta lacks rows".into()))?,
        cols: cols.ok_or_else(|| Error::Parse("meta lacks cols".into()))?,
        symmetry,
    };
    let bytes = fs::read(path)?;
    if bytes.len() != meta.rows * meta.cols * ELEMENT_SIZE {
        return Err(Error::Shape(format!(
            "{} bytes on disk for a {}x{} matrix",
            bytes.len(),
            meta.rows,
            meta.cols
        )));
    }
    let data = bytes
        .chunks_exact(ELEMENT_SIZE)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((meta, data))
}
