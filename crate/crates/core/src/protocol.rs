//! Listener-based point-to-point data delivery.
//!
//! Every rank traverses every top-level task statement. When a statement
//! needs data owned by this rank on behalf of a task owned elsewhere, the
//! owner records a *listener*: "send version `v` of `h` to rank `r`". When
//! the owner's runtime version of `h` reaches `v`, the listener fires and
//! the block is sent once per destination, however many tasks there wanted
//! it. Each remote read folded into a listener counts as one completed read
//! access on the owner, so version arithmetic is the same as if the reader
//! were local.
//!
//! Because the traversal is global, each rank knows exactly how many
//! messages it will send and receive. That count is the [`TrafficLedger`],
//! and a rank is done when its ledger is settled and its own tasks are
//! finished.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::datahier::Rank;
use crate::error::{Error, Result};
use crate::versioning::{AccessType, HandleId, Version};

pub const MESSAGE_HEADER_SIZE: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Data = 1,
    /// Simulation-mode stand-in for `Data`: one payload byte.
    SimData = 2,
    Shutdown = 3,
}

impl TryFrom<u8> for MessageType {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(MessageType::Data),
            2 => Ok(MessageType::SimData),
            3 => Ok(MessageType::Shutdown),
            other => Err(Error::Wire(format!("unknown message type {other}"))),
        }
    }
}

/// Fixed 40-byte little-endian message header.
///
/// | offset | field          |
/// |--------|----------------|
/// | 0      | type `u8`      |
/// | 1..4   | zero padding   |
/// | 4      | source `u32`   |
/// | 8      | dest `u32`     |
/// | 12     | handle `u64`   |
/// | 20     | version `u64`  |
/// | 28     | payload length `u64` |
/// | 36     | CRC-32 of payload `u32` |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MessageHeader {
    pub msg_type: MessageType,
    pub source: Rank,
    pub dest: Rank,
    pub handle: HandleId,
    pub version: Version,
    pub payload_length: u64,
    pub checksum: u32,
}

impl MessageHeader {
    pub fn encode(&self) -> [u8; MESSAGE_HEADER_SIZE] {
        let mut out = [0u8; MESSAGE_HEADER_SIZE];
        out[0] = self.msg_type as u8;
        out[4..8].copy_from_slice(&self.source.to_le_bytes());
        out[8..12].copy_from_slice(&self.dest.to_le_bytes());
        out[12..20].copy_from_slice(&self.handle.0.to_le_bytes());
        out[20..28].copy_from_slice(&self.version.0.to_le_bytes());
        out[28..36].copy_from_slice(&self.payload_length.to_le_bytes());
        out[36..40].copy_from_slice(&self.checksum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MESSAGE_HEADER_SIZE {
            return Err(Error::Wire(format!(
                "header needs {MESSAGE_HEADER_SIZE} bytes, got {}",
                bytes.len()
            )));
        }
        if bytes[1..4] != [0, 0, 0] {
            return Err(Error::Wire("non-zero header padding".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        Ok(MessageHeader {
            msg_type: MessageType::try_from(bytes[0])?,
            source: u32_at(4),
            dest: u32_at(8),
            handle: HandleId(u64_at(12)),
            version: Version(u64_at(20)),
            payload_length: u64_at(28),
            checksum: u32_at(36),
        })
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Message {
    pub header: MessageHeader,
    pub payload: Vec<u8>,
}

impl fmt::Debug for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Message")
            .field("header", &self.header)
            .field("payload_len", &self.payload.len())
            .finish()
    }
}

impl Message {
    fn build(
        msg_type: MessageType,
        source: Rank,
        dest: Rank,
        handle: HandleId,
        version: Version,
        payload: Vec<u8>,
    ) -> Self {
        Message {
            header: MessageHeader {
                msg_type,
                source,
                dest,
                handle,
                version,
                payload_length: payload.len() as u64,
                checksum: crc32fast::hash(&payload),
            },
            payload,
        }
    }

    /// A data message whose payload is a whole pool block (header + content).
    pub fn data(source: Rank, dest: Rank, handle: HandleId, version: Version, block: Vec<u8>) -> Self {
        Self::build(MessageType::Data, source, dest, handle, version, block)
    }

    pub fn sim_data(source: Rank, dest: Rank, handle: HandleId, version: Version) -> Self {
        Self::build(MessageType::SimData, source, dest, handle, version, vec![0])
    }

    pub fn shutdown(source: Rank, dest: Rank) -> Self {
        Self::build(
            MessageType::Shutdown,
            source,
            dest,
            HandleId(0),
            Version::ZERO,
            Vec::new(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MESSAGE_HEADER_SIZE + self.payload.len());
        out.extend_from_slice(&self.header.encode());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses one complete message. Checksum is not verified here; see
    /// [`verify`](Self::verify).
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = MessageHeader::decode(bytes)?;
        let body = &bytes[MESSAGE_HEADER_SIZE..];
        if body.len() as u64 != header.payload_length {
            return Err(Error::Wire(format!(
                "payload length {} does not match header {}",
                body.len(),
                header.payload_length
            )));
        }
        Ok(Message {
            header,
            payload: body.to_vec(),
        })
    }

    pub fn verify(&self) -> Result<()> {
        if self.payload.len() as u64 != self.header.payload_length {
            return Err(Error::Wire("payload length mismatch".into()));
        }
        if crc32fast::hash(&self.payload) != self.header.checksum {
            return Err(Error::Checksum {
                handle: self.header.handle,
                version: self.header.version,
                source_rank: self.header.source,
            });
        }
        Ok(())
    }
}

/// Owner-side deferred send: ship version `version` of `handle` to `dest`.
/// `reads` counts the remote read accesses merged into it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Listener {
    pub handle: HandleId,
    pub version: Version,
    pub dest: Rank,
    pub reads: u64,
}

/// All listeners held by one owner rank.
#[derive(Debug, Default)]
pub struct ListenerTable {
    by_handle: HashMap<HandleId, BTreeMap<(Version, Rank), u64>>,
    live: usize,
}

impl ListenerTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a remote read. Returns true if this created a new listener,
    /// false if it merged into an existing one.
    pub fn add(&mut self, handle: HandleId, version: Version, dest: Rank) -> bool {
        let reads = self
            .by_handle
            .entry(handle)
            .or_default()
            .entry((version, dest))
            .or_insert(0);
        *reads += 1;
        if *reads == 1 {
            self.live += 1;
            true
        } else {
            false
        }
    }

    /// Removes and returns the listeners of `handle` whose version is at or
    /// below `reached`, ordered by (version, destination).
    pub fn take_ready(&mut self, handle: HandleId, reached: Version) -> Vec<Listener> {
        let Some(queue) = self.by_handle.get_mut(&handle) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        while let Some(entry) = queue.first_entry() {
            let (version, dest) = *entry.key();
            if version > reached {
                break;
            }
            let reads = entry.remove();
            out.push(Listener {
                handle,
                version,
                dest,
                reads,
            });
        }
        if queue.is_empty() {
            self.by_handle.remove(&handle);
        }
        self.live -= out.len();
        out
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn pending_for(&self, handle: HandleId) -> usize {
        self.by_handle.get(&handle).map_or(0, BTreeMap::len)
    }
}

/// One access of a top-level statement as seen during traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScannedAccess {
    pub handle: HandleId,
    pub ty: AccessType,
    pub required: Version,
    pub data_owner: Rank,
}

/// What one rank must do about one statement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scan {
    pub task_owner: Rank,
    /// Listeners to record here (this rank owns the data, not the task).
    pub listeners: Vec<(HandleId, Version, Rank)>,
    /// Remote inputs this rank will receive (this rank owns the task).
    pub receives: Vec<(HandleId, Version)>,
}

impl Scan {
    pub fn is_local(&self, me: Rank) -> bool {
        self.task_owner == me
    }
}

/// Decides task ownership (first output) and the listener / receive
/// obligations of rank `me` for one statement.
pub fn scan_submission(accesses: &[ScannedAccess], me: Rank) -> Result<Scan> {
    let first_output = accesses
        .iter()
        .find(|a| a.ty.is_output())
        .ok_or_else(|| Error::Submission("task has no output access, ownership is undefined".into()))?;
    let task_owner = first_output.data_owner;
    if let Some(remote) = accesses.iter().find(|a| a.ty.is_output() && a.data_owner != task_owner) {
        return Err(Error::Submission(format!(
            "output {} on rank {} is remote to task owner {task_owner}",
            remote.handle, remote.data_owner
        )));
    }
    let mut scan = Scan {
        task_owner,
        listeners: Vec::new(),
        receives: Vec::new(),
    };
    for a in accesses
        .iter()
        .filter(|a| a.ty == AccessType::Read && a.data_owner != task_owner)
    {
        if a.data_owner == me {
            scan.listeners.push((a.handle, a.required, task_owner));
        } else if task_owner == me {
            scan.receives.push((a.handle, a.required));
        }
    }
    Ok(scan)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct ReceiveRecord {
    accesses: u32,
    received: bool,
}

/// Statically derived message counts for one rank.
#[derive(Debug, Default)]
pub struct TrafficLedger {
    expected_sends: u64,
    sent: u64,
    bytes_expected: u64,
    receives: HashMap<(HandleId, Version), ReceiveRecord>,
    received: u64,
}

impl TrafficLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn expect_send(&mut self, content_bytes: u64) {
        self.expected_sends += 1;
        self.bytes_expected += content_bytes;
    }

    /// Records a remote input. Returns true for the first access of a
    /// given `(handle, version)`, i.e. when a new message is expected.
    pub fn expect_receive(&mut self, handle: HandleId, version: Version) -> bool {
        let rec = self.receives.entry((handle, version)).or_default();
        rec.accesses += 1;
        rec.accesses == 1
    }

    pub fn record_send(&mut self) -> Result<()> {
        if self.sent >= self.expected_sends {
            return Err(Error::Protocol(format!(
                "send #{} exceeds the {} expected",
                self.sent + 1,
                self.expected_sends
            )));
        }
        self.sent += 1;
        Ok(())
    }

    /// Marks `(handle, version)` delivered; returns how many local accesses
    /// will use it.
    pub fn record_receive(&mut self, handle: HandleId, version: Version) -> Result<u32> {
        let rec = self
            .receives
            .get_mut(&(handle, version))
            .ok_or_else(|| Error::Protocol(format!("unexpected message for {handle} {version}")))?;
        if rec.received {
            return Err(Error::Protocol(format!("duplicate message for {handle} {version}")));
        }
        rec.received = true;
        self.received += 1;
        Ok(rec.accesses)
    }

    pub fn is_expected(&self, handle: HandleId, version: Version) -> bool {
        self.receives.contains_key(&(handle, version))
    }

    pub fn expected_sends(&self) -> u64 {
        self.expected_sends
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn expected_receives(&self) -> u64 {
        self.receives.len() as u64
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    pub fn bytes_expected(&self) -> u64 {
        self.bytes_expected
    }

    pub fn pending_sends(&self) -> u64 {
        self.expected_sends - self.sent
    }

    pub fn pending_receives(&self) -> u64 {
        self.expected_receives() - self.received
    }
}

/// Local facts needed for the quiescence decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalProgress {
    pub traversal_done: bool,
    pub live_tasks: usize,
    pub queued_listeners: usize,
    pub transport_in_flight: usize,
}

/// True once this rank has nothing left to run, send or receive.
pub fn quiescent(ledger: &TrafficLedger, local: &LocalProgress) -> bool {
    local.traversal_done
        && local.live_tasks == 0
        && local.queued_listeners == 0
        && local.transport_in_flight == 0
        && ledger.pending_sends() == 0
        && ledger.pending_receives() == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn access(h: u64, ty: AccessType, v: u64, owner: Rank) -> ScannedAccess {
        ScannedAccess {
            handle: HandleId(h),
            ty,
            required: Version(v),
            data_owner: owner,
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let m = Message::data(3, 7, HandleId(0x1122), Version(5), vec![1, 2, 3]);
        let bytes = m.encode();
        assert_eq!(bytes.len(), MESSAGE_HEADER_SIZE + 3);
        assert_eq!(bytes[0], 1);
        assert_eq!(&bytes[1..4], &[0, 0, 0]);
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &7u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &0x1122u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &5u64.to_le_bytes());
        assert_eq!(&bytes[28..36], &3u64.to_le_bytes());
        assert_eq!(&bytes[36..40], &crc32fast::hash(&[1, 2, 3]).to_le_bytes());
    }

    #[test]
    fn sim_and_shutdown_payloads() {
        assert_eq!(Message::sim_data(0, 1, HandleId(1), Version(2)).payload.len(), 1);
        let s = Message::shutdown(0, 1);
        assert!(s.payload.is_empty());
        assert_eq!(s.header.msg_type, MessageType::Shutdown);
    }

    #[test]
    fn corrupted_payload_fails_verification() {
        let mut m = Message::data(1, 2, HandleId(9), Version(1), vec![5; 100]);
        m.verify().unwrap();
        m.payload[17] ^= 0xff;
        assert!(matches!(m.verify(), Err(Error::Checksum { .. })));
    }

    #[test]
    fn decode_rejects_length_mismatch() {
        let mut bytes = Message::data(1, 2, HandleId(9), Version(1), vec![5; 10]).encode();
        bytes.pop();
        assert!(Message::decode(&bytes).is_err());
        assert!(MessageHeader::decode(&bytes[..20]).is_err());
    }

    proptest! {
        #[test]
        fn message_round_trip(src in any::<u32>(), dst in any::<u32>(), h in any::<u64>(), v in any::<u64>(),
                              payload in proptest::collection::vec(any::<u8>(), 0..256)) {
            let m = Message::data(src, dst, HandleId(h), Version(v), payload);
            let back = Message::decode(&m.encode()).unwrap();
            back.verify().unwrap();
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn remote_read_creates_listener_at_owner_and_receive_at_task_owner() {
        // task owned by P1 (output on P1) reads d2 owned by P2
        let accesses = [access(1, AccessType::Modify, 0, 1), access(2, AccessType::Read, 4, 2)];
        let at_p2 = scan_submission(&accesses, 2).unwrap();
        assert_eq!(at_p2.listeners, vec![(HandleId(2), Version(4), 1)]);
        assert!(at_p2.receives.is_empty());
        let at_p1 = scan_submission(&accesses, 1).unwrap();
        assert!(at_p1.is_local(1));
        assert_eq!(at_p1.receives, vec![(HandleId(2), Version(4))]);
        assert!(at_p1.listeners.is_empty());
        let at_p0 = scan_submission(&accesses, 0).unwrap();
        assert!(at_p0.listeners.is_empty() && at_p0.receives.is_empty());
    }

    #[test]
    fn duplicate_remote_reads_merge() {
        let mut table = ListenerTable::new();
        assert!(table.add(HandleId(2), Version(4), 1));
        assert!(!table.add(HandleId(2), Version(4), 1));
        assert_eq!(table.len(), 1);
        let fired = table.take_ready(HandleId(2), Version(4));
        assert_eq!(fired.len(), 1);
        assert_eq!(fired[0].reads, 2);
        assert!(table.is_empty());
    }

    #[test]
    fn local_inputs_need_no_listeners() {
        let accesses = [access(1, AccessType::Add, 0, 0), access(2, AccessType::Read, 0, 0)];
        for me in 0..3 {
            let s = scan_submission(&accesses, me).unwrap();
            assert!(s.listeners.is_empty() && s.receives.is_empty());
        }
    }

    #[test]
    fn task_without_output_is_rejected() {
        let accesses = [access(2, AccessType::Read, 0, 0)];
        assert!(matches!(scan_submission(&accesses, 0), Err(Error::Submission(_))));
    }

    #[test]
    fn remote_second_output_is_rejected() {
        let accesses = [access(1, AccessType::Modify, 0, 0), access(2, AccessType::Add, 0, 1)];
        assert!(matches!(scan_submission(&accesses, 0), Err(Error::Submission(_))));
    }

    #[test]
    fn listeners_fire_in_version_then_rank_order() {
        let mut table = ListenerTable::new();
        table.add(HandleId(1), Version(3), 2);
        table.add(HandleId(1), Version(3), 1);
        table.add(HandleId(1), Version(7), 0);
        assert!(table.take_ready(HandleId(1), Version(2)).is_empty());
        let fired: Vec<_> = table
            .take_ready(HandleId(1), Version(3))
            .into_iter()
            .map(|l| l.dest)
            .collect();
        assert_eq!(fired, vec![1, 2]);
        assert_eq!(table.pending_for(HandleId(1)), 1);
    }

    #[test]
    fn ledger_rejects_unexpected_and_duplicate_messages() {
        let mut ledger = TrafficLedger::new();
        assert!(ledger.expect_receive(HandleId(1), Version(2)));
        assert!(!ledger.expect_receive(HandleId(1), Version(2)));
        assert!(ledger.record_receive(HandleId(1), Version(3)).is_err());
        assert_eq!(ledger.record_receive(HandleId(1), Version(2)).unwrap(), 2);
        assert!(ledger.record_receive(HandleId(1), Version(2)).is_err());
        assert!(ledger.record_send().is_err());
    }

    #[test]
    fn quiescence_requires_settled_ledger() {
        let mut ledger = TrafficLedger::new();
        let idle = LocalProgress {
            traversal_done: true,
            live_tasks: 0,
            queued_listeners: 0,
            transport_in_flight: 0,
        };
        assert!(quiescent(&ledger, &idle));
        ledger.expect_send(64);
        assert!(!quiescent(
            &ledger,
            &LocalProgress {
                queued_listeners: 1,
                ..idle
            }
        ));
        assert!(!quiescent(&ledger, &idle));
        ledger.record_send().unwrap();
        assert!(quiescent(&ledger, &idle));
        assert!(!quiescent(
            &ledger,
            &LocalProgress {
                transport_in_flight: 1,
                ..idle
            }
        ));
    }
}
