mod common;

use oopdbg_core::serial::{blob_stats, materialize, snapshot, InertProxies};
use oopdbg_core::vm::{
    spawn, ChangeRecord, CodeHash, ExecutionState, NoFiles, Patch, ProgramImage, StepOp, TaskArgs, Value, Vm,
};
use oopdbg_core::wire::{Message, ResumeStrategy, WireStepOp};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FUEL: u64 = 200_000;

fn suspended(src: &str, seed: i64) -> (ProgramImage, ExecutionState) {
    let img = ProgramImage::load(src).unwrap_or_else(|e| panic!("{e}\n{src}"));
    let mut st = spawn(&img, "P", "go", &TaskArgs::scalars([Value::Int(seed)])).unwrap();
    Vm::new(&img, &mut NoFiles::default()).with_fuel(FUEL).run(&mut st).unwrap();
    assert!(st.status.is_suspended(), "{:?}\n{src}", st.status);
    (img, st)
}

fn op_strategy() -> impl Strategy<Value = (u8, usize)> {
    (0u8..11, 0usize..8)
}

fn to_op(code: u8, k: usize, depth: usize) -> StepOp {
    match code {
        0..=3 => StepOp::Into,
        4..=6 => StepOp::Over,
        7 | 8 => StepOp::Through,
        9 => StepOp::Restart(k % depth.max(1)),
        _ => StepOp::Proceed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn round_trip_is_isomorphic(seed in any::<u64>(), arg in 0i64..50) {
        let src = common::ProgramGen::generate(&mut ChaCha8Rng::seed_from_u64(seed));
        let (img, st) = suspended(&src, arg);
        let blob = snapshot(&st, img.hash(), 1, 1, &mut []).unwrap();
        let m = materialize(&blob, &img, &mut InertProxies).unwrap();
        prop_assert_eq!(common::isomorphic(&st, &m.state), Ok(()));
        // Same state, same bytes; and the copy serializes back to them.
        prop_assert_eq!(&snapshot(&st, img.hash(), 1, 1, &mut []).unwrap(), &blob);
        prop_assert_eq!(&snapshot(&m.state, img.hash(), 1, 1, &mut []).unwrap(), &blob);
    }

    #[test]
    fn stepping_a_copy_matches_the_original(
        seed in any::<u64>(),
        arg in 0i64..50,
        ops in prop::collection::vec(op_strategy(), 1..30),
    ) {
        let src = common::ProgramGen::generate(&mut ChaCha8Rng::seed_from_u64(seed));
        let (img, mut a) = suspended(&src, arg);
        let blob = snapshot(&a, img.hash(), 1, 1, &mut []).unwrap();
        let mut b = materialize(&blob, &img, &mut InertProxies).unwrap().state;
        for (i, (code, k)) in ops.into_iter().enumerate() {
            let op = to_op(code, k, a.depth());
            let ra = Vm::new(&img, &mut NoFiles::default()).with_fuel(FUEL).step(&mut a, op);
            let rb = Vm::new(&img, &mut NoFiles::default()).with_fuel(FUEL).step(&mut b, op);
            prop_assert_eq!(&ra, &rb, "step {} {:?}", i, op);
            prop_assert_eq!(common::isomorphic(&a, &b), Ok(()), "after step {} {:?}", i, op);
        }
    }

    #[test]
    fn blob_records_equal_bfs_closure(seed in any::<u64>(), n in 1usize..120) {
        let img = ProgramImage::load("class T { method go() { var a, b, c; halt; } }").unwrap();
        let mut st = spawn(&img, "T", "go", &TaskArgs::new()).unwrap();
        Vm::new(&img, &mut NoFiles::default()).run(&mut st).unwrap();
        common::random_graph(&mut st, &mut ChaCha8Rng::seed_from_u64(seed), n);
        let roots = common::roots(&st);
        let order = common::bfs_closure(&st.heap, &roots);
        prop_assert_eq!(order.iter().copied().collect::<std::collections::BTreeSet<_>>(), common::fixpoint_closure(&st.heap, &roots));
        let blob = snapshot(&st, img.hash(), 1, 1, &mut []).unwrap();
        prop_assert_eq!(blob_stats(&blob).unwrap().object_count as usize, order.len());
        let m = materialize(&blob, &img, &mut InertProxies).unwrap();
        prop_assert_eq!(common::isomorphic(&st, &m.state), Ok(()));
    }

    #[test]
    fn wire_decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = Message::decode(&bytes);
        let _ = Message::decode_body(&bytes);
    }

    #[test]
    fn wire_round_trip(msg in message()) {
        let bytes = msg.encode();
        let (back, used) = Message::decode(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, msg);
        for cut in 0..bytes.len() {
            prop_assert!(Message::decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn patch_round_trip(changes in prop::collection::vec(change(), 0..6), target in any::<Option<[u8; 32]>>()) {
        let mut p = Patch::new(3, CodeHash([9; 32]), changes);
        if let Some(t) = target {
            p = p.with_target(CodeHash(t));
        }
        let bytes = p.encode_changes();
        prop_assert_eq!(Patch::decode_changes(3, &bytes).unwrap(), p);
    }
}

fn name() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z0-9]{0,8}"
}

fn change() -> impl Strategy<Value = ChangeRecord> {
    prop_oneof![
        ".{0,40}".prop_map(|source| ChangeRecord::AddClass { source }),
        (name(), name()).prop_map(|(class, name)| ChangeRecord::AddIvar { class, name }),
        (name(), name()).prop_map(|(class, name)| ChangeRecord::RemoveIvar { class, name }),
        (name(), name(), ".{0,40}").prop_map(|(class, selector, source)| ChangeRecord::ChangeMethod {
            class,
            selector,
            source
        }),
        (name(), name()).prop_map(|(class, selector)| ChangeRecord::RemoveMethod { class, selector }),
    ]
}

fn message() -> impl Strategy<Value = Message> {
    let hash = any::<[u8; 32]>().prop_map(CodeHash);
    prop_oneof![
        (any::<u32>(), any::<u64>(), hash.clone()).prop_map(|(req, monitor_id, code_hash)| Message::Register {
            req,
            monitor_id,
            code_hash
        }),
        (any::<u32>(), any::<u64>(), prop::collection::vec(any::<u8>(), 0..64))
            .prop_map(|(req, session_id, blob)| Message::SessionTransfer { req, session_id, blob }),
        (any::<u32>(), any::<u64>(), any::<u64>(), any::<u32>()).prop_map(|(req, resource_id, offset, length)| {
            Message::ProxyReadRequest { req, resource_id, offset, length }
        }),
        (any::<u32>(), prop::collection::vec(any::<u8>(), 0..64), any::<bool>())
            .prop_map(|(ref_id, bytes, eof)| Message::ProxyReadResponse { ref_id, bytes, eof }),
        (any::<u32>(), any::<u64>(), hash).prop_map(|(ref_id, patch_id, code_hash)| Message::PatchApplied {
            ref_id,
            patch_id,
            code_hash
        }),
        (any::<u32>(), any::<u64>(), 0u8..3).prop_map(|(req, session_id, s)| Message::ResumeSession {
            req,
            session_id,
            strategy: ResumeStrategy::from_code(s).unwrap()
        }),
        (any::<u32>(), any::<u64>(), any::<Option<u32>>()).prop_map(|(req, session_id, frame_index)| {
            Message::StepRequest { req, session_id, op: WireStepOp::Restart, frame_index }
        }),
        (any::<u32>(), ".{0,30}").prop_map(|(ref_id, reason)| Message::Error { ref_id, reason }),
        any::<u32>().prop_map(|ref_id| Message::Ack { ref_id }),
        (any::<u32>(), ".{0,20}", ".{0,60}", any::<bool>()).prop_map(|(req, target, buffer, accept)| {
            Message::RemoteEdit { req, target, buffer, accept }
        }),
    ]
}
