//! Byte-exact formats. Small cases are assembled by hand from the layouts in
//! docs/; larger ones are frozen in tests/golden/. Set OOPDBG_BLESS=1 to
//! rewrite the frozen files after an intentional format change.

use std::path::PathBuf;
use std::time::Duration;

use oopdbg_core::manager::api::handle_line;
use oopdbg_core::manager::{Manager, ManagerConfig};
use oopdbg_core::monitor::{Monitor, MonitorConfig};
use oopdbg_core::serial::{snapshot, SHARED_MIN};
use oopdbg_core::vm::{spawn, ChangeRecord, CodeHash, NoFiles, Patch, ProgramImage, TaskArgs, Value, Vm};
use oopdbg_core::wire::{
    FrameSummary, Message, Preview, ResumeStrategy, StackSummary, ValueSummary, WireStepOp,
};
use oopdbg_core::workloads::{self, SENSOR, TWEETS};

fn golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("OOPDBG_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    for (i, (e, a)) in expected.lines().zip(actual.lines()).enumerate() {
        assert_eq!(e, a, "{name} line {}", i + 1);
    }
    assert_eq!(expected.lines().count(), actual.lines().count(), "{name} line count");
}

fn le32(v: u32) -> Vec<u8> {
    v.to_le_bytes().to_vec()
}

fn le64(v: u64) -> Vec<u8> {
    v.to_le_bytes().to_vec()
}

fn s(v: &str) -> Vec<u8> {
    [le32(v.len() as u32), v.as_bytes().to_vec()].concat()
}

fn frame(tag: u8, payload: Vec<u8>) -> Vec<u8> {
    [le32(payload.len() as u32 + 1), vec![tag], payload].concat()
}

#[test]
fn ack_frame_layout() {
    let m = Message::Ack { ref_id: 7 };
    assert_eq!(m.encode(), vec![5, 0, 0, 0, 13, 7, 0, 0, 0]);
}

#[test]
fn register_frame_layout() {
    let m = Message::Register { req: 1, monitor_id: 2, code_hash: CodeHash([0xab; 32]) };
    assert_eq!(m.encode(), frame(1, [le32(1), le64(2), vec![0xab; 32]].concat()));
}

#[test]
fn request_frame_layouts() {
    let m = Message::ProxyReadRequest { req: 3, resource_id: 9, offset: 4096, length: 4096 };
    assert_eq!(m.encode(), frame(3, [le32(3), le64(9), le64(4096), le32(4096)].concat()));
    let m = Message::StepRequest { req: 4, session_id: 5, op: WireStepOp::Restart, frame_index: Some(2) };
    assert_eq!(m.encode(), frame(9, [le32(4), le64(5), vec![3, 1], le32(2)].concat()));
    let m = Message::ResumeSession { req: 6, session_id: 5, strategy: ResumeStrategy::Discard };
    assert_eq!(m.encode(), frame(7, [le32(6), le64(5), vec![2]].concat()));
    let m = Message::Error { ref_id: 6, reason: "no".into() };
    assert_eq!(m.encode(), frame(14, [le32(6), s("no")].concat()));
}

#[test]
fn patch_layout() {
    let p = Patch::new(1, CodeHash([1; 32]), vec![ChangeRecord::AddIvar { class: "A".into(), name: "x".into() }])
        .with_target(CodeHash([2; 32]));
    let want = [vec![1; 32], vec![1], vec![2; 32], le32(1), vec![3], s("A"), s("x")].concat();
    assert_eq!(p.encode_changes(), want);
}

#[test]
fn minimal_blob_layout() {
    let img = ProgramImage::load("class T { var x; method go() { var a; a := 5; halt; } }").unwrap();
    let mut st = spawn(&img, "T", "go", &TaskArgs::new()).unwrap();
    Vm::new(&img, &mut NoFiles::default()).run(&mut st).unwrap();
    let f = &st.frames[0];
    assert!(f.stack.is_empty());
    let frame_body = [
        le32(f.id),
        s("T"),
        s("go"),
        le32(0),
        le32(u32::MAX),
        le32(f.pc as u32),
        vec![6],
        le32(0),
        le32(1),
        vec![3],
        5i64.to_le_bytes().to_vec(),
        le32(0),
        le32(0),
    ]
    .concat();
    let object_body = [vec![0], s("T"), le32(1), vec![0]].concat();
    let want = [
        b"OOPS".to_vec(),
        vec![1, 0],
        le64(11),
        le64(22),
        img.hash().0.to_vec(),
        vec![1, 0],
        le32(1),
        le32(1),
        le32(0),
        le32(frame_body.len() as u32),
        frame_body,
        le32(object_body.len() as u32),
        object_body,
        le32(0),
    ]
    .concat();
    assert_eq!(snapshot(&st, img.hash(), 11, 22, &mut []).unwrap(), want);
}

#[test]
fn shared_string_layout() {
    let long = "y".repeat(SHARED_MIN);
    let img = ProgramImage::load("class T { method go(s) { var a; a := s; halt; } }").unwrap();
    let mut st = spawn(&img, "T", "go", &TaskArgs::scalars([Value::from(long.as_str())])).unwrap();
    Vm::new(&img, &mut NoFiles::default()).run(&mut st).unwrap();
    let blob = snapshot(&st, img.hash(), 1, 1, &mut []).unwrap();
    // The 64-byte header is followed by a table holding the one long string.
    assert_eq!(&blob[64..72 + long.len()], [le32(1), s(&long)].concat().as_slice());
    // The parameter slot, the local and the saved entry argument all refer
    // to entry 0.
    let refs = blob.windows(5).filter(|w| *w == [7, 0, 0, 0, 0]).count();
    assert_eq!(refs, 3);
}

fn hex_lines(items: &[(&str, Vec<u8>)]) -> String {
    items.iter().map(|(n, b)| format!("{n} {}\n", hex::encode(b))).collect()
}

#[test]
fn wire_frames_match_golden() {
    let preview = Preview::LongString { prefix: "abc".into(), len: 300 };
    let msgs: Vec<(&str, Message)> = vec![
        ("register", Message::Register { req: 1, monitor_id: 1, code_hash: CodeHash([7; 32]) }),
        ("session_transfer", Message::SessionTransfer { req: 2, session_id: 3, blob: b"OOPS".to_vec() }),
        ("proxy_read_request", Message::ProxyReadRequest { req: 3, resource_id: 1, offset: 0, length: 4096 }),
        ("proxy_read_response", Message::ProxyReadResponse { ref_id: 3, bytes: vec![0, 1, 2], eof: true }),
        ("commit_patch", Message::CommitPatch { req: 4, patch_id: 1, changes: vec![9; 4] }),
        ("patch_applied", Message::PatchApplied { ref_id: 4, patch_id: 1, code_hash: CodeHash([8; 32]) }),
        ("resume_session", Message::ResumeSession { req: 5, session_id: 3, strategy: ResumeStrategy::RestartTask }),
        ("discard_session", Message::DiscardSession { req: 6, session_id: 3 }),
        ("step_request", Message::StepRequest { req: 7, session_id: 3, op: WireStepOp::Over, frame_index: None }),
        (
            "step_response",
            Message::StepResponse {
                ref_id: 7,
                summary: StackSummary {
                    status: "suspended_on_halt".into(),
                    exception: Some(("NumberParseError".into(), "nan".into())),
                    frames: vec![FrameSummary {
                        method: "Sensor>>parse".into(),
                        pc: 4,
                        line: 3,
                        receiver: Preview::Handle { oid: 1, class: "Sensor".into() },
                        locals: vec![("raw".into(), Preview::Scalar(Value::from("nan"))), ("t".into(), preview)],
                    }],
                },
            },
        ),
        ("inspect_request", Message::InspectRequest { req: 8, session_id: 3, oid: 0, path: "frame:0/local:raw".into() }),
        (
            "inspect_response",
            Message::InspectResponse {
                ref_id: 8,
                summary: ValueSummary::Object {
                    oid: 4,
                    class: "Tweet".into(),
                    fields: vec![("id".into(), Preview::Scalar(Value::Int(-2))), ("f".into(), Preview::Scalar(Value::Float(0.5)))],
                },
            },
        ),
        ("ack", Message::Ack { ref_id: 9 }),
        ("error", Message::Error { ref_id: 9, reason: "unknown session 3".into() }),
        ("proxy_open_request", Message::ProxyOpenRequest { req: 10, session_id: 3, path: "/tmp/t.bin".into() }),
        ("proxy_open_response", Message::ProxyOpenResponse { ref_id: 10, resource_id: 2, size: 98304 }),
        ("eval_request", Message::EvalRequest { req: 11, session_id: 3, frame_index: 1, expr: "total := 100".into() }),
        ("browse_request", Message::BrowseRequest { req: 12, path: "classes".into() }),
        ("browse_response", Message::BrowseResponse { ref_id: 12, text: "Sensor".into() }),
        ("remote_edit", Message::RemoteEdit { req: 13, target: "method:Sensor".into(), buffer: "m".into(), accept: false }),
    ];
    let encoded: Vec<(&str, Vec<u8>)> = msgs.iter().map(|(n, m)| (*n, m.encode())).collect();
    for ((_, m), (_, b)) in msgs.iter().zip(&encoded) {
        assert_eq!(&Message::decode(b).unwrap().0, m);
    }
    golden("wire_frames.hex", &hex_lines(&encoded));
}

#[test]
fn tweet_session_blob_matches_golden() {
    let img = ProgramImage::load(TWEETS).unwrap();
    let corpus = workloads::corpus();
    let mut st = spawn(&img, "TwitterApplication", "analyze", &workloads::tweet_args(&corpus[..2])).unwrap();
    Vm::new(&img, &mut NoFiles::default()).run(&mut st).unwrap();
    let blob = snapshot(&st, img.hash(), 1, 1, &mut []).unwrap();
    let lines: String = blob.chunks(64).map(|c| format!("{}\n", hex::encode(c))).collect();
    golden("tweet_session.hex", &lines);
}

#[test]
fn control_api_matches_golden() {
    let mgr = Manager::new(ProgramImage::load(SENSOR).unwrap(), ManagerConfig::default());
    let events = mgr.subscribe();
    let mon = Monitor::new(ProgramImage::load(SENSOR).unwrap(), MonitorConfig::default());
    mon.attach(mgr.listen("127.0.0.1:0").unwrap()).unwrap();
    mon.run_task("Sensor", "average", &workloads::sensor_args(&["3", "nan"])).unwrap();
    assert!(mgr.wait_sessions(1, Duration::from_secs(5)));
    let requests = [
        r#"{"id":1,"op":"list_sessions"}"#,
        r#"{"id":2,"op":"open","session":1}"#,
        r#"{"id":3,"op":"step","step":"over"}"#,
        r#"{"id":4,"op":"inspect","path":"frame:1/local:total"}"#,
        r#"{"id":5,"op":"eval","frame":1,"expr":"total * 2"}"#,
        r#"{"id":6,"op":"source","class":"Sensor","selector":"parse"}"#,
        r#"{"id":7,"op":"record_change","change":{"kind":"change_method","class":"Sensor","selector":"parse","source":"method parse(raw) { return 0; }"}}"#,
        r#"{"id":8,"op":"pending_changes"}"#,
        r#"{"id":9,"op":"replay","session":1}"#,
        r#"{"id":10,"op":"open","session":99}"#,
        r#"{"id":11,"op":"step","step":"sideways"}"#,
        r#"{"id":12,"op":"nope"}"#,
        r#"not json"#,
    ];
    let mut transcript = String::new();
    for r in requests {
        transcript.push_str(&format!("> {r}\n< {}\n", handle_line(&mgr, r)));
    }
    let first = events.recv_timeout(Duration::from_secs(5)).unwrap();
    transcript.push_str(&format!("push {}\n", serde_json::to_string(&first).unwrap()));
    golden("control_api.txt", &transcript);
}
