use oopdbg_core::vm::{spawn, LocalFiles, NoFiles, ProgramImage, Status, TaskArgs, Value, Vm};
use oopdbg_core::workloads::{self, CLBG, CLBG_TASKS, FILE_HEADER, SENSOR, TWEETS};

fn run(img: &ProgramImage, class: &str, sel: &str, args: &TaskArgs) -> oopdbg_core::vm::ExecutionState {
    let mut st = spawn(img, class, sel, args).unwrap();
    let mut host = LocalFiles::new();
    Vm::new(img, &mut host).run(&mut st).unwrap();
    st
}

#[test]
fn tweets_halt_after_batch_then_merge() {
    let img = ProgramImage::load(TWEETS).unwrap();
    let tweets = &workloads::corpus()[..5];
    let mut st = spawn(&img, "TwitterApplication", "analyze", &workloads::tweet_args(tweets)).unwrap();
    let mut host = NoFiles::default();
    let mut vm = Vm::new(&img, &mut host);
    assert_eq!(vm.run(&mut st).unwrap(), Status::SuspendedOnHalt);
    assert_eq!(st.top().unwrap().method.display_name(), "TwitterApplication>>analyzeTweets");
    assert_eq!(vm.run(&mut st).unwrap(), Status::Completed);
    // Distinct words over the five texts, counted independently.
    let mut words = std::collections::BTreeSet::new();
    for t in tweets {
        let doc: serde_json::Value = serde_json::from_str(t).unwrap();
        words.extend(doc["text"].as_str().unwrap().split(' ').filter(|w| !w.is_empty()).map(str::to_string));
    }
    assert_eq!(st.result, Some(Value::Int(words.len() as i64)));
}

#[test]
fn sensor_raises_on_nan() {
    let img = ProgramImage::load(SENSOR).unwrap();
    let st = run(&img, "Sensor", "average", &workloads::sensor_args(&["1.5", "2.5"]));
    assert_eq!(st.result, Some(Value::Float(2.0)));
    let st = run(&img, "Sensor", "average", &workloads::sensor_args(&["1.5", "nan", "2"]));
    assert_eq!(st.status, Status::SuspendedOnException);
    assert_eq!(st.exception.as_ref().unwrap().class_name, "NumberParseError");
    assert_eq!(st.top().unwrap().method.display_name(), "Sensor>>parse");
}

#[test]
fn file_header_reads_after_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.bin");
    let mut bytes = vec![0u8, 1];
    bytes.extend(b"0123456789abcdef");
    std::fs::write(&path, &bytes).unwrap();
    let img = ProgramImage::load(FILE_HEADER).unwrap();
    let args = TaskArgs::scalars([Value::from(path.to_str().unwrap())]);
    let mut st = spawn(&img, "TwitterApplication", "analyzeFileNamed", &args).unwrap();
    let mut host = LocalFiles::new();
    let mut vm = Vm::new(&img, &mut host);
    assert_eq!(vm.run(&mut st).unwrap(), Status::SuspendedOnHalt);
    assert_eq!(vm.run(&mut st).unwrap(), Status::Completed);
    assert_eq!(st.result, Some(Value::from("0123456789")));
}

#[test]
fn clbg_tasks_complete() {
    let img = ProgramImage::load(CLBG).unwrap();
    let expect_fannkuch = 16; // maximum flips for n = 7
    let expect_trees: i64 = (2..=9).map(|d| (1i64 << (d + 1)) - 1).sum();
    for (sel, n) in CLBG_TASKS {
        let st = run(&img, "Suite", sel, &TaskArgs::scalars([Value::Int(n)]));
        assert_eq!(st.status, Status::Completed, "{sel}: {:?}", st.exception);
        match sel {
            "fannkuch" => assert_eq!(st.result, Some(Value::Int(expect_fannkuch))),
            "binarytrees" => assert_eq!(st.result, Some(Value::Int(expect_trees))),
            _ => assert!(matches!(st.result, Some(Value::Int(_)))),
        }
    }
}
