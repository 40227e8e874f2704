//! Data-versioning dependency tracking.
//!
//! Every shared partition is guarded by a handle carrying two counters. At
//! submission time the accesses are counted and each access receives the
//! version it must observe before it may run. At execution time the handle's
//! runtime version is bumped once per completed access. A task is ready when
//! every handle it touches has reached the version recorded for it.
//!
//! Reads that follow reads, and adds that follow adds, share one required
//! version and may run in any order. Adds additionally take a per-handle
//! exclusive token, so they commute but never overlap. A modify is never
//! grouped with anything.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

/// Kind of access a task performs on a handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AccessType {
    Read,
    /// Commutative update: any order, one at a time.
    Add,
    /// Exclusive read-write.
    Modify,
}

impl AccessType {
    /// Whether two consecutive accesses of this type may be reordered.
    pub fn self_reorderable(self) -> bool {
        matches!(self, AccessType::Read | AccessType::Add)
    }

    pub fn is_output(self) -> bool {
        !matches!(self, AccessType::Read)
    }

    pub fn needs_token(self) -> bool {
        self.is_output()
    }
}

impl fmt::Display for AccessType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessType::Read => "read",
            AccessType::Add => "add",
            AccessType::Modify => "modify",
        })
    }
}

/// Monotone per-handle version counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Version(pub u64);

impl Version {
    pub const ZERO: Version = Version(0);

    pub fn next(self) -> Version {
        Version(self.0 + 1)
    }

    pub fn advanced(self, by: u64) -> Version {
        Version(self.0 + by)
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// Globally unique handle identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HandleId(pub u64);

impl fmt::Display for HandleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{:#x}", self.0)
    }
}

/// Submission-side bookkeeping: the current access group and its base.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubmissionCounter {
    base: Version,
    accumulated: u64,
    last: Option<AccessType>,
}

impl SubmissionCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one more access and returns the version it requires.
    pub fn register(&mut self, ty: AccessType) -> Version {
        if self.last == Some(ty) && ty.self_reorderable() {
            self.accumulated += 1;
        } else {
            self.base = self.base.advanced(self.accumulated);
            self.accumulated = 1;
            self.last = Some(ty);
        }
        self.base
    }

    /// Total number of accesses registered so far.
    pub fn registered(&self) -> u64 {
        self.base.0 + self.accumulated
    }

    pub fn base(&self) -> Version {
        self.base
    }
}

/// One access of one task, with the version assigned at submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessRequest {
    pub handle: HandleId,
    pub ty: AccessType,
    pub required: Version,
}

/// Outcome of a readiness check for a single access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readiness {
    Ready,
    /// The runtime version has not reached the required one yet.
    VersionPending,
    /// Version reached but another add/modify holds the token.
    TokenBusy,
}

/// Full per-handle state: submission counter, runtime version, exclusive
/// token and version-keyed waiter queues.
///
/// `W` is whatever the caller uses to refer to a waiting task.
#[derive(Debug, Clone)]
pub struct HandleState<W> {
    id: HandleId,
    submission: SubmissionCounter,
    runtime: Version,
    token_held: bool,
    waiters: BTreeMap<Version, VecDeque<W>>,
    completed: u64,
}

impl<W> HandleState<W> {
    pub fn new(id: HandleId) -> Self {
        HandleState {
            id,
            submission: SubmissionCounter::new(),
            runtime: Version::ZERO,
            token_held: false,
            waiters: BTreeMap::new(),
            completed: 0,
        }
    }

    pub fn id(&self) -> HandleId {
        self.id
    }

    pub fn runtime_version(&self) -> Version {
        self.runtime
    }

    pub fn submission(&self) -> &SubmissionCounter {
        &self.submission
    }

    pub fn token_held(&self) -> bool {
        self.token_held
    }

    pub fn waiter_count(&self) -> usize {
        self.waiters.values().map(VecDeque::len).sum()
    }

    pub fn register_access(&mut self, ty: AccessType) -> AccessRequest {
        let required = self.submission.register(ty);
        AccessRequest {
            handle: self.id,
            ty,
            required,
        }
    }

    /// Non-mutating readiness probe.
    pub fn readiness(&self, req: &AccessRequest) -> Readiness {
        if self.runtime < req.required {
            Readiness::VersionPending
        } else if req.ty.needs_token() && self.token_held {
            Readiness::TokenBusy
        } else {
            Readiness::Ready
        }
    }

    /// True iff the access may start now. For add/modify a true return takes
    /// the exclusive token.
    pub fn is_satisfied(&mut self, req: &AccessRequest) -> bool {
        debug_assert_eq!(req.handle, self.id);
        match self.readiness(req) {
            Readiness::Ready => {
                if req.ty.needs_token() {
                    self.token_held = true;
                }
                true
            }
            _ => false,
        }
    }

    /// Gives the token back without completing an access (used when a task
    /// fails to collect all of its tokens). Returns waiters to re-evaluate.
    pub fn release_token(&mut self) -> Vec<W> {
        assert!(self.token_held, "release of a token that is not held on {}", self.id);
        self.token_held = false;
        self.drain_reached()
    }

    pub fn enqueue_waiter(&mut self, version: Version, waiter: W) {
        self.waiters.entry(version).or_default().push_back(waiter);
    }

    /// Marks `req` finished: bumps the runtime version, frees the token for
    /// outputs and returns every waiter whose version is now reached, FIFO
    /// within each version and ascending across versions.
    pub fn complete_access(&mut self, req: &AccessRequest) -> (Version, Vec<W>) {
        assert!(
            self.runtime >= req.required,
            "completing {} on {} before its version {} was reached (runtime {})",
            req.ty,
            self.id,
            req.required,
            self.runtime
        );
        assert!(
            self.submission.registered() > self.completed,
            "completing an access that was never registered on {}",
            self.id
        );
        if req.ty.needs_token() {
            assert!(
                self.token_held,
                "{} completed without holding the token on {}",
                req.ty, self.id
            );
            self.token_held = false;
        }
        self.runtime = self.runtime.next();
        self.completed += 1;
        (self.runtime, self.drain_reached())
    }

    fn drain_reached(&mut self) -> Vec<W> {
        let mut woken = Vec::new();
        while let Some(entry) = self.waiters.first_entry() {
            if *entry.key() > self.runtime {
                break;
            }
            woken.extend(entry.remove());
        }
        woken
    }
}

/// Required versions for a whole access sequence on a fresh handle.
pub fn required_versions(seq: &[AccessType]) -> Vec<Version> {
    let mut counter = SubmissionCounter::new();
    seq.iter().map(|&ty| counter.register(ty)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use AccessType::*;

    fn fig1() -> Vec<AccessType> {
        vec![Read, Read, Modify, Add, Add, Add, Modify]
    }

    #[test]
    fn fig1_required_versions() {
        let got: Vec<u64> = required_versions(&fig1()).into_iter().map(|v| v.0).collect();
        assert_eq!(got, vec![0, 0, 2, 3, 3, 3, 6]);
    }

    #[test]
    fn single_modify_requires_zero() {
        assert_eq!(required_versions(&[Modify]), vec![Version(0)]);
    }

    #[test]
    fn modify_after_modify_is_new_group() {
        let got: Vec<u64> = required_versions(&[Modify, Modify, Modify])
            .into_iter()
            .map(|v| v.0)
            .collect();
        assert_eq!(got, vec![0, 1, 2]);
    }

    #[test]
    fn read_equal_runtime_is_ready() {
        let mut h: HandleState<u32> = HandleState::new(HandleId(1));
        for ty in [Modify, Add, Add] {
            let r = h.register_access(ty);
            assert!(h.is_satisfied(&r));
            h.complete_access(&r);
        }
        assert_eq!(h.runtime_version(), Version(3));
        let r = h.register_access(Read);
        assert_eq!(r.required, Version(3));
        assert!(h.is_satisfied(&r));
    }

    #[test]
    fn adds_are_mutually_exclusive() {
        let mut h: HandleState<usize> = HandleState::new(HandleId(7));
        let reqs: Vec<_> = fig1().into_iter().map(|t| h.register_access(t)).collect();
        // Drive the first three accesses.
        assert!(h.is_satisfied(&reqs[0]) && h.is_satisfied(&reqs[1]));
        assert!(!h.is_satisfied(&reqs[2]));
        h.complete_access(&reqs[0]);
        h.complete_access(&reqs[1]);
        assert!(h.is_satisfied(&reqs[2]));
        h.complete_access(&reqs[2]);
        assert_eq!(h.runtime_version(), Version(3));
        let adds = &reqs[3..6];
        let granted: Vec<bool> = adds.iter().map(|r| h.is_satisfied(r)).collect();
        assert_eq!(granted.iter().filter(|&&g| g).count(), 1);
        assert!(h.token_held());
    }

    #[test]
    fn final_modify_waits_for_six() {
        let mut h: HandleState<usize> = HandleState::new(HandleId(7));
        let reqs: Vec<_> = fig1().into_iter().map(|t| h.register_access(t)).collect();
        let r = &reqs[2];
        h.runtime = Version(2);
        assert!(h.is_satisfied(r));
        h.token_held = false;
        assert!(!h.is_satisfied(&reqs[6]));
    }

    #[test]
    fn reads_complete_then_modify_wakes() {
        let mut h: HandleState<&'static str> = HandleState::new(HandleId(3));
        let r0 = h.register_access(Read);
        let r1 = h.register_access(Read);
        let m = h.register_access(Modify);
        assert!(h.is_satisfied(&r0));
        assert!(h.is_satisfied(&r1));
        assert!(!h.is_satisfied(&m));
        h.enqueue_waiter(m.required, "modify");
        let (v, woken) = h.complete_access(&r0);
        assert_eq!(v, Version(1));
        assert!(woken.is_empty());
        let (v, woken) = h.complete_access(&r1);
        assert_eq!(v, Version(2));
        assert_eq!(woken, vec!["modify"]);
        assert!(h.is_satisfied(&m));
    }

    #[test]
    fn waiter_notified_once_after_second_completion() {
        let mut h: HandleState<u8> = HandleState::new(HandleId(9));
        let a = h.register_access(Modify);
        let b = h.register_access(Modify);
        let c = h.register_access(Modify);
        assert_eq!(c.required, Version(2));
        h.enqueue_waiter(c.required, 42);
        assert!(h.is_satisfied(&a));
        assert!(h.complete_access(&a).1.is_empty());
        assert!(h.is_satisfied(&b));
        assert_eq!(h.complete_access(&b).1, vec![42]);
        assert_eq!(h.waiter_count(), 0);
    }

    #[test]
    fn add_waiters_wake_on_reach_then_on_release() {
        let mut h: HandleState<u8> = HandleState::new(HandleId(2));
        let reqs: Vec<_> = [Modify, Modify, Modify, Add, Add]
            .into_iter()
            .map(|t| h.register_access(t))
            .collect();
        h.enqueue_waiter(reqs[3].required, 1);
        h.enqueue_waiter(reqs[4].required, 2);
        for r in &reqs[..2] {
            assert!(h.is_satisfied(r));
            assert!(h.complete_access(r).1.is_empty());
        }
        assert!(h.is_satisfied(&reqs[2]));
        let (_, woken) = h.complete_access(&reqs[2]);
        assert_eq!(woken, vec![1, 2]);
        // first wins the token, second goes back to its queue
        assert!(h.is_satisfied(&reqs[3]));
        assert!(!h.is_satisfied(&reqs[4]));
        h.enqueue_waiter(reqs[4].required, 2);
        let (_, woken) = h.complete_access(&reqs[3]);
        assert_eq!(woken, vec![2]);
        assert!(h.is_satisfied(&reqs[4]));
    }

    #[test]
    fn release_token_wakes_token_waiters() {
        let mut h: HandleState<u8> = HandleState::new(HandleId(4));
        let a = h.register_access(Add);
        let b = h.register_access(Add);
        assert!(h.is_satisfied(&a));
        assert!(!h.is_satisfied(&b));
        h.enqueue_waiter(b.required, 5);
        assert_eq!(h.release_token(), vec![5]);
        assert!(h.is_satisfied(&b));
    }

    #[test]
    #[should_panic(expected = "never registered")]
    fn completing_unregistered_access_aborts() {
        let mut h: HandleState<u8> = HandleState::new(HandleId(4));
        let bogus = AccessRequest {
            handle: HandleId(4),
            ty: Read,
            required: Version(0),
        };
        h.complete_access(&bogus);
    }
}
