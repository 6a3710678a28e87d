//! Neighbour checkpoint store, restore after failure, and static-state
//! verification.

mod common;

use common::KillOnce;
use multires::checkpoint::{
    fetch_for_restore, store_dynamic, store_static, verify_static, CheckpointError,
    CheckpointStore, RestoreBundle,
};
use multires::linalg::{
    build_poisson3d, frobenius_norm, norm2, CsrMatrix, DenseVector, Poisson3DSpec,
};
use multires::runtime::{spawn_world, Comm, RankId, Role, WorldConfig};
use multires::solver::StaticState;
use proptest::prelude::*;

fn payload(rank: usize, tag: u8, len: usize) -> Vec<u8> {
    (0..len)
        .map(|i| (i as u8).wrapping_mul(31) ^ (rank as u8) ^ tag)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dynamic_round_trip_is_bitwise(lens in proptest::collection::vec(0usize..=1 << 20, 3), epoch in 1u32..1000) {
        let lens_ref = &lens;
        let out = spawn_world(WorldConfig::new(3, 0), move |mut comm, _| {
            let mut store = CheckpointStore::new();
            let r = comm.rank().0;
            store_dynamic(&mut comm, &mut store, payload(r, 7, lens_ref[r]), epoch).unwrap();
            store
        })
        .unwrap();
        for (r, store) in out.results.into_iter().enumerate() {
            let store = store.unwrap();
            let held = store.held_dynamic.unwrap();
            let pred = (r + 2) % 3;
            prop_assert!(held.verify());
            prop_assert_eq!(held.owner, RankId(pred));
            prop_assert_eq!(held.epoch, epoch);
            prop_assert_eq!(held.payload, payload(pred, 7, lens[pred]));
        }
    }
}

#[test]
fn two_ranks_hold_each_other() {
    let out = spawn_world(WorldConfig::new(2, 0), |mut comm, _| {
        let mut store = CheckpointStore::new();
        let r = comm.rank().0;
        store_static(&mut comm, &mut store, payload(r, 1, 64)).unwrap();
        store
    })
    .unwrap();
    for (r, store) in out.results.into_iter().enumerate() {
        let held = store.unwrap().held_static.unwrap();
        assert_eq!(held.owner, RankId(1 - r));
        assert_eq!(held.payload, payload(1 - r, 1, 64));
    }
}

#[test]
fn single_rank_holds_itself() {
    let out = spawn_world(WorldConfig::new(1, 0), |mut comm, _| {
        let mut store = CheckpointStore::new();
        store_static(&mut comm, &mut store, vec![9; 10]).unwrap();
        store_dynamic(&mut comm, &mut store, vec![4; 3], 2).unwrap();
        store
    })
    .unwrap();
    let store = out.results[0].clone().unwrap();
    assert_eq!(store.held_static.unwrap().owner, RankId(0));
    assert_eq!(store.held_dynamic.unwrap().payload, vec![4; 3]);
}

#[test]
fn only_latest_dynamic_epoch_retained() {
    let out = spawn_world(WorldConfig::new(4, 0), |mut comm, _| {
        let mut store = CheckpointStore::new();
        let r = comm.rank().0;
        for e in 1..=3 {
            store_dynamic(&mut comm, &mut store, payload(r, e as u8, 100), e).unwrap();
        }
        store
    })
    .unwrap();
    for (r, store) in out.results.into_iter().enumerate() {
        let store = store.unwrap();
        assert_eq!(store.committed_epoch(), 3);
        let held = store.held_dynamic.unwrap();
        assert_eq!(held.epoch, 3);
        // No rank holds its own dynamic checkpoint as the neighbour copy.
        assert_ne!(held.owner, RankId(r));
    }
}

#[test]
fn failure_during_static_store_is_reported() {
    let world = KillOnce::world(3, 0, |r, _| r == RankId(1));
    let out = spawn_world(world, |mut comm, _| {
        let mut store = CheckpointStore::new();
        store_static(&mut comm, &mut store, vec![1; 8]).map(|_| ())
    })
    .unwrap();
    for r in [0, 2] {
        let err = out.results[r].clone().unwrap().unwrap_err();
        assert!(
            matches!(err, CheckpointError::Comm(e) if e.is_proc_failed()),
            "rank {r}"
        );
    }
}

#[test]
fn interrupted_store_keeps_previous_generation() {
    // Rank 1 dies while storing epoch 2.
    let world = KillOnce::world(4, 0, |r, c| r == RankId(1) && c.checkpoint_epoch == Some(2));
    let out = spawn_world(world, |mut comm, _| {
        let mut store = CheckpointStore::new();
        let r = comm.rank().0;
        store_dynamic(&mut comm, &mut store, payload(r, 1, 32), 1).unwrap();
        let second = store_dynamic(&mut comm, &mut store, payload(r, 2, 32), 2);
        (second.is_err(), store)
    })
    .unwrap();
    for r in [0, 2, 3] {
        let (failed, store) = out.results[r].clone().unwrap();
        assert!(failed, "rank {r} must see the failure");
        assert_eq!(store.committed_epoch(), 1);
        let held = store.held_dynamic.unwrap();
        assert_eq!(held.epoch, 1);
        assert_eq!(held.payload, payload(held.owner.0, 1, 32));
    }
}

/// Stores static and three dynamic generations, then dies on `victims` at the
/// first barrier and restores on the repaired communicator.
fn restore_scenario(
    victims: Vec<usize>,
    spares: usize,
) -> Vec<Option<Result<(bool, RestoreBundle), CheckpointError>>> {
    let world = KillOnce::world(4, spares, move |r, c| {
        victims.contains(&r.0) && c.iterations >= 1
    });
    let program = |mut comm: Comm, role: Role| -> Result<(bool, RestoreBundle), CheckpointError> {
        match role {
            Role::Initial => {
                let mut store = CheckpointStore::new();
                let r = comm.rank().0;
                store_static(&mut comm, &mut store, payload(r, 0, 256))?;
                for e in 1..=3 {
                    store_dynamic(&mut comm, &mut store, payload(r, e as u8, 300 + r), e)?;
                }
                comm.clock_mut().iterations = 1;
                let _ = comm.barrier();
                comm.revoke();
                let _ = comm.agree(true);
                let repaired = comm.shrink_and_substitute().expect("enough spares");
                let mut comm = repaired.comm;
                fetch_for_restore(&mut comm, &mut store, &repaired.replaced).map(|b| (false, b))
            }
            Role::Substitute { replaced } => {
                let mut store = CheckpointStore::new();
                fetch_for_restore(&mut comm, &mut store, &replaced).map(|b| (true, b))
            }
        }
    };
    spawn_world(world, program).unwrap().results
}

#[test]
fn spare_restores_failed_rank_payload() {
    let results = restore_scenario(vec![2], 1);
    let (is_spare, bundle) = results[2].clone().unwrap().unwrap();
    assert!(is_spare);
    assert_eq!(bundle.static_payload, Some(payload(2, 0, 256)));
    assert_eq!(bundle.dynamic_payload, Some(payload(2, 3, 302)));
    assert_eq!(bundle.restore_epoch, 3);
    for r in [0, 1, 3] {
        let (is_spare, bundle) = results[r].clone().unwrap().unwrap();
        assert!(!is_spare);
        assert_eq!(bundle.restore_epoch, 3);
        assert_eq!(bundle.static_payload, None);
        assert_eq!(bundle.dynamic_payload, Some(payload(r, 3, 300 + r)));
    }
    // Only the holder (rank 3) and the predecessor (rank 1) ship bytes.
    let sent: Vec<usize> = results
        .iter()
        .map(|b| b.clone().unwrap().unwrap().1.bytes_sent)
        .collect();
    assert_eq!(sent[0], 0);
    assert!(sent[1] > 0 && sent[3] > 0);
}

#[test]
fn restore_without_failures_moves_nothing() {
    let out = spawn_world(WorldConfig::new(3, 0), |mut comm, _| {
        let mut store = CheckpointStore::new();
        store_dynamic(&mut comm, &mut store, vec![5; 9], 4).unwrap();
        fetch_for_restore(&mut comm, &mut store, &[]).unwrap()
    })
    .unwrap();
    for b in out.results.into_iter().flatten() {
        assert_eq!(b.bytes_sent, 0);
        assert_eq!(b.restore_epoch, 4);
        assert_eq!(b.dynamic_payload, Some(vec![5; 9]));
    }
}

#[test]
fn adjacent_failures_lose_the_holder() {
    let results = restore_scenario(vec![2, 3], 2);
    for res in &results {
        let err = res.clone().unwrap().unwrap_err();
        assert_eq!(
            err,
            CheckpointError::HolderDead {
                rank: RankId(2),
                holder: RankId(3)
            }
        );
    }
}

fn sample_state() -> StaticState {
    let (a, b) = build_poisson3d(Poisson3DSpec::new(3, 3, 2)).unwrap();
    let (f, bn) = (frobenius_norm(&a), norm2(&b));
    StaticState::from_parts(a, b, f, bn)
}

#[test]
fn verify_static_cases() {
    let mut st = sample_state();
    assert!(verify_static(&st));
    st.a_local.values_mut()[5] = f64::from_bits(st.a_local.values()[5].to_bits() ^ 1);
    assert!(!verify_static(&st));
    st.reseal();
    assert!(verify_static(&st));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn verify_static_catches_every_single_bit_flip(in_a in any::<bool>(), idx in 0usize..10_000, bit in 0u32..64) {
        let mut st = sample_state();
        let flip = |v: &mut f64| *v = f64::from_bits(v.to_bits() ^ (1u64 << bit));
        if in_a {
            let vals = st.a_local.values_mut();
            let n = vals.len();
            flip(&mut vals[idx % n]);
        } else {
            let n = st.b_local.len();
            flip(&mut st.b_local[idx % n]);
        }
        prop_assert!(!verify_static(&st));
    }
}

#[test]
fn static_payload_survives_transfer() {
    let st = sample_state();
    let bytes = st.to_bytes();
    let back = StaticState::from_bytes(&bytes).unwrap();
    assert!(verify_static(&back));
    assert_eq!(back.a_local, st.a_local);
    assert_eq!(back.b_local, st.b_local);
    let _: (&CsrMatrix, &DenseVector) = (&back.a_local, &back.b_local);
}
