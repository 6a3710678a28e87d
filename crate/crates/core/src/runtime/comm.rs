use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};
use std::panic::Location;
use std::sync::Arc;

use super::world::{Activation, Shared, State};
use super::{tree_reduce, CommError, Killed, LogicalClock, Pid, RankId, ReduceOp, RepairError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum SlotKind {
    Collective,
    Agree,
    Shrink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) struct SlotKey {
    epoch: u64,
    kind: SlotKind,
    seq: u64,
}

/// `(epoch, src, dst, tag)`
pub(crate) type MailKey = (u64, RankId, RankId, u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgreeOutcome {
    /// Logical AND of the flags of every live participant.
    pub flag: bool,
    /// Union of failed ranks known at agreement time.
    pub failed: BTreeSet<RankId>,
}

#[derive(Clone)]
struct ShrinkResult {
    epoch: u64,
    members: Arc<Vec<Pid>>,
    replaced: Vec<RankId>,
}

#[derive(Clone)]
enum SlotOutcome {
    Agree(AgreeOutcome),
    Shrink(Result<ShrinkResult, RepairError>),
}

pub(crate) struct Slot {
    op: &'static str,
    contributions: BTreeMap<RankId, Vec<f64>>,
    outcome: Option<SlotOutcome>,
    reads: usize,
}

impl Slot {
    fn new(op: &'static str) -> Self {
        Slot {
            op,
            contributions: BTreeMap::new(),
            outcome: None,
            reads: 0,
        }
    }
}

/// Result of a communicator repair.
pub struct Repaired {
    pub comm: Comm,
    /// Rank ids now held by freshly activated spares.
    pub replaced: Vec<RankId>,
}

/// One rank's view of a communicator. Not shareable across ranks.
pub struct Comm {
    shared: Arc<Shared>,
    pid: Pid,
    rank: RankId,
    epoch: u64,
    members: Arc<Vec<Pid>>,
    seq: u64,
    agree_seq: u64,
    shrink_seq: u64,
    clock: LogicalClock,
    fingerprint: u64,
    replaced: Vec<RankId>,
}

impl Comm {
    pub(crate) fn new(
        shared: Arc<Shared>,
        pid: Pid,
        rank: RankId,
        epoch: u64,
        members: Arc<Vec<Pid>>,
        replaced: Vec<RankId>,
    ) -> Self {
        Comm {
            shared,
            pid,
            rank,
            epoch,
            members,
            seq: 0,
            agree_seq: 0,
            shrink_seq: 0,
            clock: LogicalClock::default(),
            fingerprint: 0,
            replaced,
        }
    }

    pub fn rank(&self) -> RankId {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn clock(&self) -> &LogicalClock {
        &self.clock
    }

    pub fn clock_mut(&mut self) -> &mut LogicalClock {
        &mut self.clock
    }

    /// Ranks that were substituted by the repair producing this communicator.
    pub fn replaced_in_last_repair(&self) -> &[RankId] {
        &self.replaced
    }

    pub fn successor(&self) -> RankId {
        RankId((self.rank.0 + 1) % self.size())
    }

    pub fn predecessor(&self) -> RankId {
        RankId((self.rank.0 + self.size() - 1) % self.size())
    }

    /// Runtime-call boundary: the only place a kill takes effect.
    fn enter(&mut self) {
        if let Some(ks) = &self.shared.kill_switch {
            if ks.should_die(self.rank, &self.clock) {
                let mut st = self.shared.state.lock();
                st.dead.insert(self.pid);
                st.kills += 1;
                self.trace(&mut st, "kill", 0, 0, "dead");
                self.shared.cv.notify_all();
                drop(st);
                std::panic::resume_unwind(Box::new(Killed));
            }
        }
        let st = self.shared.state.lock();
        self.shared.bail_if_aborted(&st);
    }

    fn note_site(&mut self, op: &str, loc: &Location<'_>) {
        let mut h = DefaultHasher::new();
        self.fingerprint.hash(&mut h);
        op.hash(&mut h);
        loc.file().hash(&mut h);
        loc.line().hash(&mut h);
        loc.column().hash(&mut h);
        self.fingerprint = h.finish();
        self.shared.state.lock().fingerprints[self.pid.0] = self.fingerprint;
    }

    fn trace(&self, st: &mut State, op: &str, tag: u32, bytes: usize, outcome: &str) {
        if self.shared.trace {
            st.trace.push(format!(
                "{} {} {} {} {} {}",
                self.epoch, self.rank, op, tag, bytes, outcome
            ));
        }
    }

    fn stale_or_revoked(&self, st: &State) -> bool {
        st.epoch != self.epoch || st.revoked
    }

    fn dead_members(&self, st: &State) -> BTreeSet<RankId> {
        self.members
            .iter()
            .enumerate()
            .filter(|(_, pid)| st.dead.contains(pid))
            .map(|(r, _)| RankId(r))
            .collect()
    }

    fn pid_of(&self, rank: RankId) -> Pid {
        *self
            .members
            .get(rank.0)
            .unwrap_or_else(|| panic!("rank {rank} outside communicator of size {}", self.size()))
    }

    pub fn send(&mut self, dst: RankId, tag: u32, payload: Vec<u8>) -> Result<(), CommError> {
        self.enter();
        let dst_pid = self.pid_of(dst);
        let mut st = self.shared.state.lock();
        let bytes = payload.len();
        if self.stale_or_revoked(&st) {
            self.trace(&mut st, "send", tag, bytes, "revoked");
            return Err(CommError::revoked());
        }
        if st.dead.contains(&dst_pid) {
            self.trace(&mut st, "send", tag, bytes, "proc_failed");
            return Err(CommError::proc_failed([dst]));
        }
        st.mailboxes
            .entry((self.epoch, self.rank, dst, tag))
            .or_default()
            .push_back(payload);
        self.trace(&mut st, "send", tag, bytes, "ok");
        self.shared.cv.notify_all();
        Ok(())
    }

    pub fn recv(&mut self, src: RankId, tag: u32) -> Result<Vec<u8>, CommError> {
        self.enter();
        let src_pid = self.pid_of(src);
        let key = (self.epoch, src, self.rank, tag);
        let mut st = self.shared.state.lock();
        loop {
            self.shared.bail_if_aborted(&st);
            if let Some(msg) = st.mailboxes.get_mut(&key).and_then(|q| q.pop_front()) {
                let bytes = msg.len();
                self.trace(&mut st, "recv", tag, bytes, "ok");
                return Ok(msg);
            }
            if st.dead.contains(&src_pid) {
                self.trace(&mut st, "recv", tag, 0, "proc_failed");
                return Err(CommError::proc_failed([src]));
            }
            if self.stale_or_revoked(&st) {
                self.trace(&mut st, "recv", tag, 0, "revoked");
                return Err(CommError::revoked());
            }
            self.shared.cv.wait(&mut st);
        }
    }

    /// Rendezvous of every member; returns contributions in rank order.
    fn exchange(
        &mut self,
        op: &'static str,
        data: Vec<f64>,
        loc: &Location<'_>,
    ) -> Result<Vec<Vec<f64>>, CommError> {
        self.enter();
        self.note_site(op, loc);
        let key = SlotKey {
            epoch: self.epoch,
            kind: SlotKind::Collective,
            seq: self.seq,
        };
        self.seq += 1;
        let bytes = data.len() * 8;
        let n = self.size();
        let mut st = self.shared.state.lock();
        if self.stale_or_revoked(&st) {
            self.trace(&mut st, op, 0, bytes, "revoked");
            return Err(CommError::revoked());
        }
        {
            let slot = st.slots.entry(key).or_insert_with(|| Slot::new(op));
            assert_eq!(
                slot.op, op,
                "SPMD violation: rank {} called {op} where peers called {}",
                self.rank, slot.op
            );
            slot.contributions.insert(self.rank, data);
        }
        self.shared.cv.notify_all();
        loop {
            self.shared.bail_if_aborted(&st);
            let slot = st.slots.get_mut(&key).expect("collective slot vanished");
            if slot.contributions.len() == n {
                let out: Vec<Vec<f64>> = slot.contributions.values().cloned().collect();
                slot.reads += 1;
                if slot.reads == n {
                    st.slots.remove(&key);
                }
                self.trace(&mut st, op, 0, bytes, "ok");
                return Ok(out);
            }
            let dead = self.dead_members(&st);
            if !dead.is_empty() {
                self.trace(&mut st, op, 0, bytes, "proc_failed");
                return Err(CommError::proc_failed(dead));
            }
            if self.stale_or_revoked(&st) {
                self.trace(&mut st, op, 0, bytes, "revoked");
                return Err(CommError::revoked());
            }
            self.shared.cv.wait(&mut st);
        }
    }

    /// Concatenation of every rank's block in rank order.
    #[track_caller]
    pub fn allgather(&mut self, block: &[f64]) -> Result<Vec<f64>, CommError> {
        let loc = Location::caller();
        Ok(self.exchange("allgather", block.to_vec(), loc)?.concat())
    }

    #[track_caller]
    pub fn allgather_blocks(&mut self, block: &[f64]) -> Result<Vec<Vec<f64>>, CommError> {
        let loc = Location::caller();
        self.exchange("allgather", block.to_vec(), loc)
    }

    /// Elementwise reduction with a fixed pairwise tree over rank ids.
    #[track_caller]
    pub fn allreduce(&mut self, op: ReduceOp, values: &[f64]) -> Result<Vec<f64>, CommError> {
        let loc = Location::caller();
        let parts = self.exchange("allreduce", values.to_vec(), loc)?;
        Ok(tree_reduce(parts, op))
    }

    #[track_caller]
    pub fn allreduce_scalar(&mut self, op: ReduceOp, value: f64) -> Result<f64, CommError> {
        let loc = Location::caller();
        let parts = self.exchange("allreduce", vec![value], loc)?;
        Ok(tree_reduce(parts, op)[0])
    }

    /// Logical AND over all ranks.
    #[track_caller]
    pub fn all_true(&mut self, flag: bool) -> Result<bool, CommError> {
        let loc = Location::caller();
        let parts = self.exchange("land", vec![if flag { 1.0 } else { 0.0 }], loc)?;
        Ok(parts.iter().all(|p| p[0] != 0.0))
    }

    #[track_caller]
    pub fn barrier(&mut self) -> Result<(), CommError> {
        let loc = Location::caller();
        self.exchange("barrier", Vec::new(), loc).map(|_| ())
    }

    /// Poisons the communicator: every pending and later operation on this
    /// epoch fails with `Revoked` until a repair.
    pub fn revoke(&mut self) {
        self.enter();
        let mut st = self.shared.state.lock();
        if st.epoch == self.epoch && !st.revoked {
            st.revoked = true;
            self.trace(&mut st, "revoke", 0, 0, "ok");
            self.shared.cv.notify_all();
        }
    }

    /// Blocks until every member has either contributed or died.
    fn failure_tolerant_rendezvous(
        &mut self,
        kind: SlotKind,
        op: &'static str,
        flag: bool,
        decide: impl FnOnce(&mut State, &Comm, bool, BTreeSet<RankId>) -> SlotOutcome,
    ) -> SlotOutcome {
        self.enter();
        let seq = match kind {
            SlotKind::Agree => {
                self.agree_seq += 1;
                self.agree_seq
            }
            _ => {
                self.shrink_seq += 1;
                self.shrink_seq
            }
        };
        let key = SlotKey {
            epoch: self.epoch,
            kind,
            seq,
        };
        let mut st = self.shared.state.lock();
        st.slots
            .entry(key)
            .or_insert_with(|| Slot::new(op))
            .contributions
            .insert(self.rank, vec![if flag { 1.0 } else { 0.0 }]);
        self.shared.cv.notify_all();
        let mut decide = Some(decide);
        loop {
            self.shared.bail_if_aborted(&st);
            let dead = self.dead_members(&st);
            let slot = st.slots.get(&key).expect("rendezvous slot vanished");
            if let Some(outcome) = slot.outcome.clone() {
                self.trace(&mut st, op, 0, 0, "ok");
                return outcome;
            }
            let ready = (0..self.size())
                .map(RankId)
                .all(|r| slot.contributions.contains_key(&r) || dead.contains(&r));
            if ready {
                let all = slot.contributions.values().all(|v| v[0] != 0.0);
                let outcome = (decide.take().expect("decided twice"))(&mut st, self, all, dead);
                if let Some(slot) = st.slots.get_mut(&key) {
                    slot.outcome = Some(outcome.clone());
                }
                self.trace(&mut st, op, 0, 0, "ok");
                self.shared.cv.notify_all();
                return outcome;
            }
            self.shared.cv.wait(&mut st);
        }
    }

    /// Failure-tolerant agreement. Works on revoked communicators.
    pub fn agree(&mut self, flag: bool) -> AgreeOutcome {
        let outcome =
            self.failure_tolerant_rendezvous(SlotKind::Agree, "agree", flag, |_, _, all, dead| {
                SlotOutcome::Agree(AgreeOutcome {
                    flag: all,
                    failed: dead,
                })
            });
        match outcome {
            SlotOutcome::Agree(a) => a,
            SlotOutcome::Shrink(_) => unreachable!("agree slot resolved as shrink"),
        }
    }

    /// Excludes dead members and substitutes each with the next warm spare
    /// in pool order. Active size and rank ids are preserved.
    pub fn shrink_and_substitute(&mut self) -> Result<Repaired, RepairError> {
        let outcome = self.failure_tolerant_rendezvous(
            SlotKind::Shrink,
            "shrink",
            true,
            |st, comm, _, dead| SlotOutcome::Shrink(apply_repair(st, comm, dead)),
        );
        let result = match outcome {
            SlotOutcome::Shrink(r) => r?,
            SlotOutcome::Agree(_) => unreachable!("shrink slot resolved as agree"),
        };
        let mut comm = Comm::new(
            self.shared.clone(),
            self.pid,
            self.rank,
            result.epoch,
            result.members,
            result.replaced.clone(),
        );
        comm.clock = self.clock;
        comm.fingerprint = self.fingerprint;
        Ok(Repaired {
            comm,
            replaced: result.replaced,
        })
    }
}

fn apply_repair(
    st: &mut State,
    comm: &Comm,
    dead: BTreeSet<RankId>,
) -> Result<ShrinkResult, RepairError> {
    if st.epoch != comm.epoch {
        return Err(RepairError::StaleCommunicator(comm.epoch));
    }
    if dead.len() > st.pool.len() {
        return Err(RepairError::InsufficientSpares {
            failed: dead.len(),
            available: st.pool.len(),
        });
    }
    let new_epoch = st.epoch + 1;
    let mut members: Vec<Pid> = comm.members.as_ref().clone();
    let replaced: Vec<RankId> = dead.iter().copied().collect();
    let mut adopted = Vec::new();
    for &r in &replaced {
        let spare = st.pool.pop_front().expect("pool size checked");
        members[r.0] = spare;
        adopted.push((spare, r));
    }
    let members = Arc::new(members);
    for (spare, r) in adopted {
        st.activations.insert(
            spare,
            Activation {
                epoch: new_epoch,
                rank: r,
                members: members.clone(),
                replaced: replaced.clone(),
            },
        );
        st.activation_log.push((spare.0, r, new_epoch));
        st.running += 1;
    }
    st.epoch = new_epoch;
    st.members = members.clone();
    st.revoked = false;
    st.slots.retain(|k, _| {
        k.epoch >= comm.epoch && (k.kind == SlotKind::Shrink || k.epoch == new_epoch)
    });
    st.mailboxes.retain(|k, _| k.0 >= new_epoch);
    Ok(ShrinkResult {
        epoch: new_epoch,
        members,
        replaced,
    })
}
