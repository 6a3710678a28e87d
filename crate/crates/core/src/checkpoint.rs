//! In-memory neighbour checkpoints and rank-local snapshots.
//!
//! Rank `r` keeps the checkpoints of its predecessor `(r - 1) mod n`. Every
//! store is two-phase: payloads travel to the successor, the receiver
//! verifies the checksum and stages the copy, and only a successful
//! collective vote commits the new generation everywhere. A failure in the
//! middle of a store therefore leaves the previous generation intact.

use crc::{Crc, CRC_64_XZ};
use thiserror::Error;

use crate::runtime::{Comm, CommError, RankId, ReduceOp};
use crate::solver::StaticState;

pub const MAGIC: &[u8; 4] = b"RKCP";
pub const VERSION: u16 = 1;
/// magic(4) version(2) kind(1) owner(4) epoch(4) payload_len(8) checksum(8)
pub const HEADER_LEN: usize = 31;

const TAG_STORE_STATIC: u32 = 0x100;
const TAG_STORE_DYNAMIC: u32 = 0x101;
const TAG_RESTORE_STATIC: u32 = 0x110;
const TAG_RESTORE_DYNAMIC: u32 = 0x111;
const TAG_REPROTECT_STATIC: u32 = 0x120;
const TAG_REPROTECT_DYNAMIC: u32 = 0x121;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// 64-bit digest used for checkpoint payloads and static-state verification.
pub fn digest(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error("checkpoint of rank {owner} is corrupt: {reason}")]
    Corrupt { owner: RankId, reason: String },
    #[error("rank {rank} and the holder of its checkpoints (rank {holder}) both failed")]
    HolderDead { rank: RankId, holder: RankId },
    #[error("restore epoch {agreed} is older than retained epoch {retained} on rank {rank}")]
    EpochUnavailable {
        rank: RankId,
        agreed: u32,
        retained: u32,
    },
    #[error("usage error: {0}")]
    Usage(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CheckpointKind {
    Static = 0,
    Dynamic = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub owner: RankId,
    /// Outer-iteration index for dynamic checkpoints, 0 for static ones.
    pub epoch: u32,
    pub kind: CheckpointKind,
    pub payload: Vec<u8>,
    pub checksum: u64,
}

impl Checkpoint {
    pub fn new(owner: RankId, epoch: u32, kind: CheckpointKind, payload: Vec<u8>) -> Self {
        let checksum = digest(&payload);
        Checkpoint {
            owner,
            epoch,
            kind,
            payload,
            checksum,
        }
    }

    pub fn verify(&self) -> bool {
        digest(&self.payload) == self.checksum
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.owner.0 as u32).to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses and verifies a checkpoint produced by [`Checkpoint::encode`].
    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |owner: usize, reason: &str| CheckpointError::Corrupt {
            owner: RankId(owner),
            reason: reason.to_string(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(usize::MAX, "truncated header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let owner = u32_at(7) as usize;
        if &bytes[0..4] != MAGIC {
            return Err(corrupt(owner, "bad magic"));
        }
        if u16::from_le_bytes([bytes[4], bytes[5]]) != VERSION {
            return Err(corrupt(owner, "unsupported version"));
        }
        let kind = match bytes[6] {
            0 => CheckpointKind::Static,
            1 => CheckpointKind::Dynamic,
            _ => return Err(corrupt(owner, "unknown kind")),
        };
        let epoch = u32_at(11);
        let len = u64_at(15) as usize;
        let checksum = u64_at(23);
        if bytes.len() - HEADER_LEN != len {
            return Err(corrupt(owner, "payload length mismatch"));
        }
        let ckpt = Checkpoint {
            owner: RankId(owner),
            epoch,
            kind,
            payload: bytes[HEADER_LEN..].to_vec(),
            checksum,
        };
        if !ckpt.verify() {
            return Err(corrupt(owner, "checksum mismatch"));
        }
        Ok(ckpt)
    }
}

/// Checkpoints kept by one rank. Survives communicator repair.
#[derive(Debug, Clone, Default)]
pub struct CheckpointStore {
    /// Predecessor's static checkpoint.
    pub held_static: Option<Checkpoint>,
    /// Predecessor's latest dynamic checkpoint.
    pub held_dynamic: Option<Checkpoint>,
    /// This rank's own last committed copies, used to roll back locally
    /// and to re-protect a replaced successor.
    pub own_static: Option<Checkpoint>,
    pub own_dynamic: Option<Checkpoint>,
}

impl CheckpointStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Epoch of the last committed dynamic checkpoint, 0 when none.
    pub fn committed_epoch(&self) -> u32 {
        self.own_dynamic.as_ref().map_or(0, |c| c.epoch)
    }
}

/// Bytes moved by a store, for bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StoreReceipt {
    pub bytes_sent: usize,
}

fn ring_exchange(
    comm: &mut Comm,
    ckpt: &Checkpoint,
    tag: u32,
) -> Result<Checkpoint, CheckpointError> {
    let succ = comm.successor();
    let pred = comm.predecessor();
    comm.send(succ, tag, ckpt.encode())?;
    let bytes = comm.recv(pred, tag)?;
    Checkpoint::decode(&bytes)
}

/// Stores this rank's static payload on its successor.
pub fn store_static(
    comm: &mut Comm,
    store: &mut CheckpointStore,
    payload: Vec<u8>,
) -> Result<StoreReceipt, CheckpointError> {
    let mine = Checkpoint::new(comm.rank(), 0, CheckpointKind::Static, payload);
    let received = ring_exchange(comm, &mine, TAG_STORE_STATIC);
    let staged_ok = received
        .as_ref()
        .map(|c| c.kind == CheckpointKind::Static)
        .unwrap_or(false);
    // Peers still waiting in the vote learn about local failures here.
    let committed = match received {
        Ok(_) | Err(CheckpointError::Corrupt { .. }) => comm.all_true(staged_ok)?,
        Err(e) => return Err(e),
    };
    if !committed {
        return Err(CheckpointError::Corrupt {
            owner: comm.predecessor(),
            reason: "static stage rejected".into(),
        });
    }
    let receipt = StoreReceipt {
        bytes_sent: mine.encoded_len(),
    };
    store.held_static = received.ok();
    store.own_static = Some(mine);
    Ok(receipt)
}

/// Replaces the dynamic checkpoint generation with `epoch`. The previous
/// generation stays in place unless every rank staged the new one.
pub fn store_dynamic(
    comm: &mut Comm,
    store: &mut CheckpointStore,
    payload: Vec<u8>,
    epoch: u32,
) -> Result<StoreReceipt, CheckpointError> {
    comm.clock_mut().checkpoint_epoch = Some(u64::from(epoch));
    let result = store_dynamic_inner(comm, store, payload, epoch);
    comm.clock_mut().checkpoint_epoch = None;
    result
}

fn store_dynamic_inner(
    comm: &mut Comm,
    store: &mut CheckpointStore,
    payload: Vec<u8>,
    epoch: u32,
) -> Result<StoreReceipt, CheckpointError> {
    let mine = Checkpoint::new(comm.rank(), epoch, CheckpointKind::Dynamic, payload);
    let received = ring_exchange(comm, &mine, TAG_STORE_DYNAMIC);
    let staged_ok =
        matches!(&received, Ok(c) if c.kind == CheckpointKind::Dynamic && c.epoch == epoch);
    let committed = match received {
        Ok(_) | Err(CheckpointError::Corrupt { .. }) => comm.all_true(staged_ok)?,
        Err(e) => return Err(e),
    };
    if !committed {
        return Err(CheckpointError::Corrupt {
            owner: comm.predecessor(),
            reason: "dynamic stage rejected".into(),
        });
    }
    let receipt = StoreReceipt {
        bytes_sent: mine.encoded_len(),
    };
    store.held_dynamic = received.ok();
    store.own_dynamic = Some(mine);
    Ok(receipt)
}

/// What a rank walks away with after [`fetch_for_restore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestoreBundle {
    /// This rank's static payload when it was delivered by the holder
    /// (activated spares only).
    pub static_payload: Option<Vec<u8>>,
    /// Dynamic payload at `restore_epoch`, `None` when rolling back to the
    /// initial state.
    pub dynamic_payload: Option<Vec<u8>>,
    pub restore_epoch: u32,
    /// Bytes this rank sent during delivery and re-protection.
    pub bytes_sent: usize,
}

fn encode_opt(c: Option<&Checkpoint>) -> Vec<u8> {
    c.map(Checkpoint::encode).unwrap_or_default()
}

fn decode_opt(bytes: Vec<u8>) -> Result<Option<Checkpoint>, CheckpointError> {
    if bytes.is_empty() {
        Ok(None)
    } else {
        Checkpoint::decode(&bytes).map(Some)
    }
}

/// Fails with [`CheckpointError::HolderDead`] when a replaced rank's
/// checkpoint holder was replaced in the same repair.
pub fn check_holders(n: usize, replaced: &[RankId]) -> Result<(), CheckpointError> {
    for &r in replaced {
        let holder = RankId((r.0 + 1) % n);
        if replaced.contains(&holder) {
            return Err(CheckpointError::HolderDead { rank: r, holder });
        }
    }
    Ok(())
}

/// Runs on the repaired communicator. Holders deliver static and dynamic
/// checkpoints to the spares that adopted their predecessors, each
/// predecessor re-protects its replaced successor, and all ranks agree on
/// the restore epoch (minimum committed epoch).
pub fn fetch_for_restore(
    comm: &mut Comm,
    store: &mut CheckpointStore,
    replaced: &[RankId],
) -> Result<RestoreBundle, CheckpointError> {
    let n = comm.size();
    check_holders(n, replaced)?;
    let me = comm.rank();
    let i_am_new = replaced.contains(&me);
    let mut bytes_sent = 0;

    if !i_am_new {
        let pred = comm.predecessor();
        let succ = comm.successor();
        if replaced.contains(&pred) {
            for (tag, c) in [
                (TAG_RESTORE_STATIC, store.held_static.as_ref()),
                (TAG_RESTORE_DYNAMIC, store.held_dynamic.as_ref()),
            ] {
                let msg = encode_opt(c);
                bytes_sent += msg.len();
                comm.send(pred, tag, msg)?;
            }
        }
        if replaced.contains(&succ) {
            for (tag, c) in [
                (TAG_REPROTECT_STATIC, store.own_static.as_ref()),
                (TAG_REPROTECT_DYNAMIC, store.own_dynamic.as_ref()),
            ] {
                let msg = encode_opt(c);
                bytes_sent += msg.len();
                comm.send(succ, tag, msg)?;
            }
        }
    }

    let mut static_payload = None;
    if i_am_new {
        let holder = comm.successor();
        let own_static = decode_opt(comm.recv(holder, TAG_RESTORE_STATIC)?)?;
        let own_dynamic = decode_opt(comm.recv(holder, TAG_RESTORE_DYNAMIC)?)?;
        let pred = comm.predecessor();
        let held_static = decode_opt(comm.recv(pred, TAG_REPROTECT_STATIC)?)?;
        let held_dynamic = decode_opt(comm.recv(pred, TAG_REPROTECT_DYNAMIC)?)?;
        for c in [&own_static, &own_dynamic].into_iter().flatten() {
            if c.owner != me {
                return Err(CheckpointError::Corrupt {
                    owner: c.owner,
                    reason: format!("delivered to rank {me}"),
                });
            }
        }
        static_payload = own_static.as_ref().map(|c| c.payload.clone());
        *store = CheckpointStore {
            held_static,
            held_dynamic,
            own_static,
            own_dynamic,
        };
    }

    let retained = store.committed_epoch();
    let agreed = comm.allreduce_scalar(ReduceOp::Min, f64::from(retained))? as u32;
    if agreed != retained {
        return Err(CheckpointError::EpochUnavailable {
            rank: me,
            agreed,
            retained,
        });
    }
    let dynamic_payload = if agreed == 0 {
        None
    } else {
        store.own_dynamic.as_ref().map(|c| c.payload.clone())
    };
    Ok(RestoreBundle {
        static_payload,
        dynamic_payload,
        restore_epoch: agreed,
        bytes_sent,
    })
}

/// True iff the operands still match the digest taken at setup.
pub fn verify_static(state: &StaticState) -> bool {
    state.operand_digest() == state.checksum
}

/// Token for a live [`SnapshotSlot`] snapshot.
#[derive(Debug, PartialEq, Eq)]
pub struct SnapshotToken {
    id: u64,
}

/// Single-slot local snapshot used to roll an inner solve back.
#[derive(Debug)]
pub struct SnapshotSlot<T> {
    live: Option<(u64, T)>,
    next_id: u64,
}

impl<T> Default for SnapshotSlot<T> {
    fn default() -> Self {
        SnapshotSlot {
            live: None,
            next_id: 0,
        }
    }
}

impl<T: Clone> SnapshotSlot<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Only one snapshot may be live at a time.
    pub fn snapshot(&mut self, state: &T) -> Result<SnapshotToken, CheckpointError> {
        if self.live.is_some() {
            return Err(CheckpointError::Usage("a snapshot is already live"));
        }
        self.next_id += 1;
        self.live = Some((self.next_id, state.clone()));
        Ok(SnapshotToken { id: self.next_id })
    }

    pub fn rollback(&self, token: &SnapshotToken) -> Result<T, CheckpointError> {
        match &self.live {
            Some((id, state)) if *id == token.id => Ok(state.clone()),
            _ => Err(CheckpointError::Usage(
                "rollback with a committed or foreign token",
            )),
        }
    }

    /// Drops the snapshot; the token becomes invalid.
    pub fn commit(&mut self, token: &SnapshotToken) -> Result<(), CheckpointError> {
        match &self.live {
            Some((id, _)) if *id == token.id => {
                self.live = None;
                Ok(())
            }
            _ => Err(CheckpointError::Usage(
                "commit with a committed or foreign token",
            )),
        }
    }
}
