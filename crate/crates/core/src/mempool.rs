//! Per-rank memory pool.
//!
//! Every partition that lives on a rank, owned or received, sits in one
//! contiguous block made of a fixed 64-byte header followed by its content.
//! Sending a block means sending that whole range. Several versions of the
//! same handle may be resident at once. When a task starts using a newer
//! version, the older ones become obsolete and are released as soon as no
//! task holds them.
//!
//! Header layout (little-endian): handle id `u64 @0`, version `u64 @8`,
//! content length `u64 @16`, owner `u32 @24`, flags `u32 @28`, zero to 64.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::ops::Range;
use std::ptr::NonNull;

use crate::datahier::{PartitionId, Rank, TileLayout};
use crate::error::{Error, Result};
use crate::versioning::{HandleId, Version};

pub const HEADER_SIZE: usize = 64;
const WORD: usize = 8;
const HEADER_WORDS: usize = HEADER_SIZE / WORD;

pub const FLAG_RESIDENT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHeader {
    pub handle: HandleId,
    pub version: Version,
    pub content_length: u64,
    pub owner: Rank,
    pub flags: u32,
}

impl BlockHeader {
    pub fn encode(&self) -> [u8; HEADER_SIZE] {
        let mut out = [0u8; HEADER_SIZE];
        out[0..8].copy_from_slice(&self.handle.0.to_le_bytes());
        out[8..16].copy_from_slice(&self.version.0.to_le_bytes());
        out[16..24].copy_from_slice(&self.content_length.to_le_bytes());
        out[24..28].copy_from_slice(&self.owner.to_le_bytes());
        out[28..32].copy_from_slice(&self.flags.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Wire(format!(
                "block header needs {HEADER_SIZE} bytes, got {}",
                bytes.len()
            )));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        Ok(BlockHeader {
            handle: HandleId(u64_at(0)),
            version: Version(u64_at(8)),
            content_length: u64_at(16),
            owner: u32_at(24),
            flags: u32_at(28),
        })
    }
}

/// Identifies one allocation for its lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(u64);

/// Raw view of a block's content handed to kernels. Exclusive or shared use
/// is governed by the versioning discipline, not by this type.
#[derive(Debug, Clone, Copy)]
pub struct ContentPtr {
    ptr: NonNull<f64>,
    len: usize,
}

// Safety: the pointee is pool memory that outlives every dispatched task, and
// concurrent access is ordered by handle versions.
unsafe impl Send for ContentPtr {}
unsafe impl Sync for ContentPtr {}

impl ContentPtr {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Sub-range in elements.
    pub fn slice(&self, range: Range<usize>) -> ContentPtr {
        assert!(
            range.start <= range.end && range.end <= self.len,
            "view {range:?} outside {}",
            self.len
        );
        ContentPtr {
            // Safety: in bounds, checked above.
            ptr: unsafe { NonNull::new_unchecked(self.ptr.as_ptr().add(range.start)) },
            len: range.end - range.start,
        }
    }

    /// # Safety
    /// No other thread may write this range for the lifetime of the slice.
    pub unsafe fn as_slice<'a>(&self) -> &'a [f64] {
        std::slice::from_raw_parts(self.ptr.as_ptr(), self.len)
    }

    /// # Safety
    /// No other thread may read or write this range for the lifetime of the
    /// slice.
    #[allow(clippy::mut_from_ref)]
    pub unsafe fn as_mut_slice<'a>(&self) -> &'a mut [f64] {
        std::slice::from_raw_parts_mut(self.ptr.as_ptr(), self.len)
    }
}

struct Arena {
    base: NonNull<u64>,
    words: usize,
    /// offset -> length, both in words, coalesced.
    free: BTreeMap<usize, usize>,
}

impl Arena {
    fn new(words: usize) -> Result<Self> {
        let mut storage = Vec::new();
        storage
            .try_reserve_exact(words)
            .map_err(|e| Error::Pool(format!("cannot reserve {} bytes: {e}", words * WORD)))?;
        storage.resize(words, 0u64);
        let raw = Box::into_raw(storage.into_boxed_slice());
        let base = NonNull::new(raw as *mut u64).expect("box pointer is non-null");
        Ok(Arena {
            base,
            words,
            free: BTreeMap::from([(0, words)]),
        })
    }

    fn alloc(&mut self, words: usize) -> Option<usize> {
        let (&off, &len) = self.free.iter().find(|(_, &len)| len >= words)?;
        self.free.remove(&off);
        if len > words {
            self.free.insert(off + words, len - words);
        }
        Some(off)
    }

    fn dealloc(&mut self, off: usize, words: usize) {
        let mut start = off;
        let mut len = words;
        if let Some((&prev, &plen)) = self.free.range(..off).next_back() {
            debug_assert!(prev + plen <= off, "double free in arena");
            if prev + plen == off {
                self.free.remove(&prev);
                start = prev;
                len += plen;
            }
        }
        if let Some(&nlen) = self.free.get(&(off + words)) {
            self.free.remove(&(off + words));
            len += nlen;
        }
        self.free.insert(start, len);
    }

    fn free_words(&self) -> usize {
        self.free.values().sum()
    }
}

impl Drop for Arena {
    fn drop(&mut self) {
        // Safety: reconstructs the boxed slice leaked in `Arena::new`.
        unsafe {
            drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(
                self.base.as_ptr(),
                self.words,
            )));
        }
    }
}

enum Placement {
    Arena {
        arena: usize,
        offset: usize,
    },
    /// Pooling disabled for this handle; storage held outside the arenas.
    Standalone(Box<[u64]>),
}

struct BlockRecord {
    handle: HandleId,
    version: Version,
    words: usize,
    placement: Placement,
    pins: usize,
    obsolete: bool,
}

/// The pool proper. Owned by one rank's coordinator.
pub struct Pool {
    arenas: Vec<Arena>,
    max_bytes: Option<usize>,
    blocks: HashMap<BlockId, BlockRecord>,
    by_handle: BTreeMap<HandleId, BTreeMap<Version, BlockId>>,
    bypass: HashSet<HandleId>,
    next_id: u64,
    live_words: usize,
    released: u64,
}

// Safety: arenas are only reached through `&self`/`&mut self` or through
// `ContentPtr`s whose use is ordered by the runtime.
unsafe impl Send for Pool {}

impl Pool {
    /// Creates a pool with one arena of `capacity_bytes`.
    pub fn init(capacity_bytes: usize) -> Result<Self> {
        if capacity_bytes == 0 {
            return Err(Error::Pool("capacity must be positive".into()));
        }
        let words = capacity_bytes.div_ceil(WORD);
        Ok(Pool {
            arenas: vec![Arena::new(words)?],
            max_bytes: None,
            blocks: HashMap::new(),
            by_handle: BTreeMap::new(),
            bypass: HashSet::new(),
            next_id: 0,
            live_words: 0,
            released: 0,
        })
    }

    /// Caps total arena bytes; growth beyond this fails.
    pub fn with_limit(mut self, max_bytes: usize) -> Self {
        self.max_bytes = Some(max_bytes);
        self
    }

    pub fn capacity_bytes(&self) -> usize {
        self.arenas.iter().map(|a| a.words).sum::<usize>() * WORD
    }

    pub fn free_bytes(&self) -> usize {
        self.arenas.iter().map(Arena::free_words).sum::<usize>() * WORD
    }

    /// Bytes held by live pooled blocks (standalone blocks excluded).
    pub fn live_bytes(&self) -> usize {
        self.live_words * WORD
    }

    pub fn arena_count(&self) -> usize {
        self.arenas.len()
    }

    pub fn live_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Number of blocks released since creation.
    pub fn released_count(&self) -> u64 {
        self.released
    }

    /// Allocates a header+content block for `(handle, version)`. The header
    /// is filled in; the content is zeroed only on first use of the arena.
    pub fn acquire(
        &mut self,
        handle: HandleId,
        version: Version,
        content_length: usize,
        owner: Rank,
    ) -> Result<BlockId> {
        if self.by_handle.get(&handle).is_some_and(|v| v.contains_key(&version)) {
            return Err(Error::Pool(format!("{handle} {version} is already resident")));
        }
        if let Some(&newest) = self.by_handle.get(&handle).and_then(|v| v.keys().next_back()) {
            if newest > version {
                return Err(Error::Pool(format!("{handle} {version} arrives after newer {newest}")));
            }
        }
        let words = HEADER_WORDS + content_length.div_ceil(WORD);
        let placement = if self.bypass.contains(&handle) {
            Placement::Standalone(vec![0u64; words].into_boxed_slice())
        } else {
            let (arena, offset) = self.allocate(words)?;
            self.live_words += words;
            Placement::Arena { arena, offset }
        };
        let id = BlockId(self.next_id);
        self.next_id += 1;
        self.blocks.insert(
            id,
            BlockRecord {
                handle,
                version,
                words,
                placement,
                pins: 0,
                obsolete: false,
            },
        );
        self.by_handle.entry(handle).or_default().insert(version, id);
        let header = BlockHeader {
            handle,
            version,
            content_length: content_length as u64,
            owner,
            flags: FLAG_RESIDENT,
        };
        self.write_header(id, &header);
        Ok(id)
    }

    fn allocate(&mut self, words: usize) -> Result<(usize, usize)> {
        for (idx, arena) in self.arenas.iter_mut().enumerate() {
            if let Some(off) = arena.alloc(words) {
                return Ok((idx, off));
            }
        }
        // Grow geometrically; existing arenas never move.
        let last = self.arenas.last().map_or(words, |a| a.words);
        let grow = (2 * last).max(words);
        if let Some(max) = self.max_bytes {
            if self.capacity_bytes() + grow * WORD > max {
                return Err(Error::Pool(format!(
                    "pool exhausted: {} bytes requested, {} of {} bytes in use",
                    words * WORD,
                    self.live_bytes(),
                    max
                )));
            }
        }
        let mut arena = Arena::new(grow)?;
        let off = arena.alloc(words).expect("fresh arena fits the request");
        self.arenas.push(arena);
        Ok((self.arenas.len() - 1, off))
    }

    fn record(&self, id: BlockId) -> Result<&BlockRecord> {
        self.blocks
            .get(&id)
            .ok_or_else(|| Error::Pool(format!("block {id:?} is not resident")))
    }

    fn base_ptr(&self, rec: &BlockRecord) -> NonNull<u64> {
        match &rec.placement {
            // Safety: offset is inside the arena by construction.
            Placement::Arena { arena, offset } => unsafe {
                NonNull::new_unchecked(self.arenas[*arena].base.as_ptr().add(*offset))
            },
            Placement::Standalone(buf) => NonNull::new(buf.as_ptr() as *mut u64).expect("non-null"),
        }
    }

    fn write_header(&mut self, id: BlockId, header: &BlockHeader) {
        let rec = &self.blocks[&id];
        let base = self.base_ptr(rec).as_ptr() as *mut u8;
        let bytes = header.encode();
        // Safety: every block starts with HEADER_SIZE bytes it owns.
        unsafe { std::ptr::copy_nonoverlapping(bytes.as_ptr(), base, HEADER_SIZE) };
    }

    pub fn header(&self, id: BlockId) -> Result<BlockHeader> {
        let rec = self.record(id)?;
        let base = self.base_ptr(rec).as_ptr() as *const u8;
        // Safety: header bytes belong to this block.
        let bytes = unsafe { std::slice::from_raw_parts(base, HEADER_SIZE) };
        BlockHeader::decode(bytes)
    }

    /// Re-stamps the version of an owned block that is updated in place.
    pub fn restamp(&mut self, id: BlockId, version: Version) -> Result<()> {
        let rec = self.record(id)?;
        let (handle, old) = (rec.handle, rec.version);
        if old == version {
            return Ok(());
        }
        let versions = self.by_handle.get_mut(&handle).expect("indexed handle");
        if versions.keys().any(|&v| v != old && v >= version) || version < old {
            return Err(Error::Pool(format!("cannot restamp {handle} from {old} to {version}")));
        }
        versions.remove(&old);
        versions.insert(version, id);
        self.blocks.get_mut(&id).expect("checked").version = version;
        let mut header = self.header(id)?;
        header.version = version;
        self.write_header(id, &header);
        Ok(())
    }

    pub fn content(&self, id: BlockId) -> Result<ContentPtr> {
        let rec = self.record(id)?;
        let base = self.base_ptr(rec);
        Ok(ContentPtr {
            // Safety: the content follows the header inside the block.
            ptr: unsafe { NonNull::new_unchecked(base.as_ptr().add(HEADER_WORDS) as *mut f64) },
            len: rec.words - HEADER_WORDS,
        })
    }

    /// Absolute content byte range of `(handle, version)`'s block, used by
    /// overlap audits.
    pub fn address_range(&self, id: BlockId) -> Result<Range<usize>> {
        let rec = self.record(id)?;
        let start = self.base_ptr(rec).as_ptr() as usize;
        Ok(start..start + rec.words * WORD)
    }

    /// Byte range of leaf `child` within the resident block `id`, relative
    /// to the block start (header included).
    pub fn leaf_view(&self, id: BlockId, layout: &TileLayout, child: PartitionId) -> Result<Range<usize>> {
        let rec = self.record(id)?;
        let within = layout.leaf_view(child)?;
        if HEADER_SIZE + within.end > rec.words * WORD {
            return Err(Error::Pool(format!("tile {child:?} exceeds block {id:?}")));
        }
        Ok(HEADER_SIZE + within.start..HEADER_SIZE + within.end)
    }

    /// Copy of the whole header+content range, as sent on the wire.
    pub fn block_bytes(&self, id: BlockId) -> Result<Vec<u8>> {
        let rec = self.record(id)?;
        let base = self.base_ptr(rec).as_ptr() as *const u8;
        // Safety: block range is owned; readers are ordered by versioning.
        Ok(unsafe { std::slice::from_raw_parts(base, rec.words * WORD) }.to_vec())
    }

    /// Fills the content region from `bytes` (content only, no header).
    pub fn write_content_bytes(&mut self, id: BlockId, bytes: &[u8]) -> Result<()> {
        let rec = self.record(id)?;
        let capacity = (rec.words - HEADER_WORDS) * WORD;
        if bytes.len() > capacity {
            return Err(Error::Pool(format!(
                "{} content bytes do not fit block of {capacity}",
                bytes.len()
            )));
        }
        let base = self.base_ptr(rec).as_ptr() as *mut u8;
        // Safety: destination is this block's content; nobody else sees it yet.
        unsafe { std::ptr::copy_nonoverlapping(bytes.as_ptr(), base.add(HEADER_SIZE), bytes.len()) };
        Ok(())
    }

    pub fn lookup(&self, handle: HandleId, version: Version) -> Option<BlockId> {
        self.by_handle.get(&handle)?.get(&version).copied()
    }

    pub fn resident_versions(&self, handle: HandleId) -> Vec<Version> {
        self.by_handle
            .get(&handle)
            .map(|v| v.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Registers one more task holding `id`.
    pub fn pin(&mut self, id: BlockId) -> Result<()> {
        self.blocks
            .get_mut(&id)
            .ok_or_else(|| Error::Pool(format!("pin of non-resident block {id:?}")))?
            .pins += 1;
        Ok(())
    }

    /// Drops one holder. Returns true if the block was obsolete and is now
    /// released.
    pub fn unpin(&mut self, id: BlockId) -> Result<bool> {
        let rec = self
            .blocks
            .get_mut(&id)
            .ok_or_else(|| Error::Pool(format!("unpin of non-resident block {id:?}")))?;
        if rec.pins == 0 {
            return Err(Error::Pool(format!("unbalanced unpin of block {id:?}")));
        }
        rec.pins -= 1;
        if rec.pins == 0 && rec.obsolete {
            self.free_block(id);
            return Ok(true);
        }
        Ok(false)
    }

    pub fn pins(&self, id: BlockId) -> usize {
        self.blocks.get(&id).map_or(0, |r| r.pins)
    }

    /// Marks every version of `handle` older than `accessed` obsolete and
    /// releases those nobody holds. Pinned ones go when their last holder
    /// unpins.
    pub fn evict_older(&mut self, handle: HandleId, accessed: Version) -> usize {
        let older: Vec<BlockId> = match self.by_handle.get(&handle) {
            Some(v) => v.range(..accessed).map(|(_, &id)| id).collect(),
            None => return 0,
        };
        let mut released = 0;
        for id in older {
            let rec = self.blocks.get_mut(&id).expect("indexed block");
            rec.obsolete = true;
            if rec.pins == 0 {
                self.free_block(id);
                released += 1;
            }
        }
        released
    }

    /// Releases an unpinned block explicitly.
    pub fn release(&mut self, id: BlockId) -> Result<()> {
        let rec = self.record(id)?;
        if rec.pins > 0 {
            return Err(Error::Pool(format!(
                "release of {} {} while {} task(s) hold it",
                rec.handle, rec.version, rec.pins
            )));
        }
        self.free_block(id);
        Ok(())
    }

    fn free_block(&mut self, id: BlockId) {
        let rec = self.blocks.remove(&id).expect("resident block");
        if let Some(versions) = self.by_handle.get_mut(&rec.handle) {
            versions.remove(&rec.version);
            if versions.is_empty() {
                self.by_handle.remove(&rec.handle);
            }
        }
        if let Placement::Arena { arena, offset } = rec.placement {
            self.arenas[arena].dealloc(offset, rec.words);
            self.live_words -= rec.words;
        }
        self.released += 1;
    }

    /// Opts `handle` out of pooling: its later blocks are allocated
    /// individually and never touch the arenas.
    pub fn disable_pooling(&mut self, handle: HandleId) -> Result<()> {
        if self.by_handle.contains_key(&handle) {
            return Err(Error::Pool(format!(
                "cannot change pooling of {handle} while versions are resident"
            )));
        }
        self.bypass.insert(handle);
        Ok(())
    }

    pub fn enable_pooling(&mut self, handle: HandleId) -> Result<()> {
        if self.by_handle.contains_key(&handle) {
            return Err(Error::Pool(format!(
                "cannot change pooling of {handle} while versions are resident"
            )));
        }
        self.bypass.remove(&handle);
        Ok(())
    }

    pub fn pooling_disabled(&self, handle: HandleId) -> bool {
        self.bypass.contains(&handle)
    }
}
