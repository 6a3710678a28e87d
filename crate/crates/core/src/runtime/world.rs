use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};

use super::comm::{Comm, MailKey, Slot, SlotKey};
use super::{Aborted, KillSwitch, Killed, Pid, RankId, WorldError};

/// Launch parameters of a simulated world.
#[derive(Clone, Default)]
pub struct WorldConfig {
    pub n_active: usize,
    pub n_spares: usize,
    pub kill_switch: Option<Arc<dyn KillSwitch>>,
    pub trace: bool,
}

impl WorldConfig {
    pub fn new(n_active: usize, n_spares: usize) -> Self {
        WorldConfig {
            n_active,
            n_spares,
            kill_switch: None,
            trace: false,
        }
    }

    pub fn with_trace(mut self, on: bool) -> Self {
        self.trace = on;
        self
    }
}

/// How a process entered the program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Role {
    /// One of the initial active ranks.
    Initial,
    /// A warm spare that adopted a failed rank. `replaced` lists every rank
    /// substituted in the same repair.
    Substitute { replaced: Vec<RankId> },
}

#[derive(Debug)]
pub struct WorldOutcome<T> {
    /// Result of the final occupant of each rank id; `None` when that
    /// occupant died.
    pub results: Vec<Option<T>>,
    /// Collective call-site fingerprint per process slot (active ranks
    /// first, then spares).
    pub fingerprints: Vec<u64>,
    pub kills: usize,
    /// `(pid, adopted rank, epoch)` for every activated spare, in order.
    pub activations: Vec<(usize, RankId, u64)>,
    pub final_epoch: u64,
    pub trace: Vec<String>,
}

pub(crate) struct Activation {
    pub epoch: u64,
    pub rank: RankId,
    pub members: Arc<Vec<Pid>>,
    pub replaced: Vec<RankId>,
}

pub(crate) struct State {
    pub epoch: u64,
    pub members: Arc<Vec<Pid>>,
    pub revoked: bool,
    pub dead: BTreeSet<Pid>,
    pub pool: VecDeque<Pid>,
    pub activations: HashMap<Pid, Activation>,
    pub slots: HashMap<SlotKey, Slot>,
    pub mailboxes: HashMap<MailKey, VecDeque<Vec<u8>>>,
    pub running: usize,
    pub shutdown: bool,
    pub aborted: bool,
    pub kills: usize,
    pub fingerprints: Vec<u64>,
    pub trace: Vec<String>,
    pub activation_log: Vec<(usize, RankId, u64)>,
}

pub(crate) struct Shared {
    pub state: Mutex<State>,
    pub cv: Condvar,
    pub kill_switch: Option<Arc<dyn KillSwitch>>,
    pub trace: bool,
}

impl Shared {
    pub(crate) fn bail_if_aborted(&self, st: &State) {
        if st.aborted {
            std::panic::resume_unwind(Box::new(Aborted));
        }
    }
}

/// Handle held by a parked warm spare.
pub struct SpareHandle {
    shared: Arc<Shared>,
    pid: Pid,
}

impl SpareHandle {
    /// Blocks until a repair selects this spare. Returns the repaired
    /// communicator and the rank id to impersonate, or `None` when the
    /// world shuts down first.
    pub fn wait_for_activation(self) -> Option<(Comm, RankId)> {
        let mut st = self.shared.state.lock();
        loop {
            if st.aborted || st.shutdown {
                return None;
            }
            if let Some(act) = st.activations.remove(&self.pid) {
                drop(st);
                let comm = Comm::new(
                    self.shared.clone(),
                    self.pid,
                    act.rank,
                    act.epoch,
                    act.members,
                    act.replaced,
                );
                return Some((comm, act.rank));
            }
            self.shared.cv.wait(&mut st);
        }
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}

enum Exit<T> {
    Done(RankId, T),
    Gone,
    Panicked(RankId, String),
}

/// Runs `program` on `n_active` ranks with `n_spares` warm spares parked
/// until a repair needs them. Returns once every running process has
/// finished or died.
pub fn spawn_world<T, F>(config: WorldConfig, program: F) -> Result<WorldOutcome<T>, WorldError>
where
    T: Send,
    F: Fn(Comm, Role) -> T + Sync,
{
    if config.n_active == 0 {
        return Err(WorldError::NoActiveRanks);
    }
    let n_total = config.n_active + config.n_spares;
    let members: Arc<Vec<Pid>> = Arc::new((0..config.n_active).map(Pid).collect());
    let shared = Arc::new(Shared {
        state: Mutex::new(State {
            epoch: 0,
            members: members.clone(),
            revoked: false,
            dead: BTreeSet::new(),
            pool: (config.n_active..n_total).map(Pid).collect(),
            activations: HashMap::new(),
            slots: HashMap::new(),
            mailboxes: HashMap::new(),
            running: config.n_active,
            shutdown: false,
            aborted: false,
            kills: 0,
            fingerprints: vec![0; n_total],
            trace: Vec::new(),
            activation_log: Vec::new(),
        }),
        cv: Condvar::new(),
        kill_switch: config.kill_switch.clone(),
        trace: config.trace,
    });

    let results: Mutex<BTreeMap<RankId, (usize, T)>> = Mutex::new(BTreeMap::new());
    let panics: Mutex<Vec<WorldError>> = Mutex::new(Vec::new());

    let finish = |pid: Pid, exit: Exit<T>| {
        let mut st = shared.state.lock();
        st.running -= 1;
        match exit {
            Exit::Done(rank, value) => {
                results.lock().insert(rank, (pid.0, value));
            }
            Exit::Gone => {}
            Exit::Panicked(rank, message) => {
                st.aborted = true;
                st.dead.insert(pid);
                panics.lock().push(WorldError::RankPanicked {
                    rank: Some(rank),
                    pid: pid.0,
                    message,
                });
            }
        }
        if st.running == 0 {
            st.shutdown = true;
        }
        shared.cv.notify_all();
    };

    let run = |comm: Comm, role: Role| -> Exit<T> {
        let rank = comm.rank();
        match catch_unwind(AssertUnwindSafe(|| program(comm, role))) {
            Ok(v) => Exit::Done(rank, v),
            Err(payload) => {
                if payload.is::<Killed>() || payload.is::<Aborted>() {
                    Exit::Gone
                } else {
                    Exit::Panicked(rank, panic_message(payload.as_ref()))
                }
            }
        }
    };

    std::thread::scope(|scope| {
        for pid in 0..n_total {
            let shared = shared.clone();
            let members = members.clone();
            let run = &run;
            let finish = &finish;
            scope.spawn(move || {
                let pid = Pid(pid);
                if pid.0 < members.len() {
                    let comm = Comm::new(shared, pid, RankId(pid.0), 0, members, Vec::new());
                    finish(pid, run(comm, Role::Initial));
                } else {
                    let handle = SpareHandle { shared, pid };
                    if let Some((comm, _rank)) = handle.wait_for_activation() {
                        let replaced = comm.replaced_in_last_repair().to_vec();
                        finish(pid, run(comm, Role::Substitute { replaced }));
                    }
                }
            });
        }
    });

    if let Some(err) = panics.into_inner().into_iter().next() {
        return Err(err);
    }
    let mut st = shared.state.lock();
    let mut by_rank: Vec<Option<T>> = (0..config.n_active).map(|_| None).collect();
    let final_members = st.members.clone();
    for (rank, (pid, value)) in results.into_inner() {
        // Only the process currently holding the rank id reports for it.
        if final_members.get(rank.0).map(|p| p.0) == Some(pid) {
            by_rank[rank.0] = Some(value);
        }
    }
    Ok(WorldOutcome {
        results: by_rank,
        fingerprints: std::mem::take(&mut st.fingerprints),
        kills: st.kills,
        activations: std::mem::take(&mut st.activation_log),
        final_epoch: st.epoch,
        trace: std::mem::take(&mut st.trace),
    })
}
