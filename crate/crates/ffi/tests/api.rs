use std::ffi::{c_char, CStr, CString};
use std::ptr;

use oopdbg_ffi::*;

const PROGRAM: &str = "class P {
  method go(n) { var a; a := n * 2; halt; return self.twice(a) + 1; }
  method twice(x) { return x * 2; }
  method bad() { return @parseNumber(\"nan\"); }
}";

fn last_error() -> String {
    unsafe { CStr::from_ptr(oopdbg_last_error()) }.to_str().unwrap().to_string()
}

fn load(src: &str) -> *mut OopdbgImage {
    let src = CString::new(src).unwrap();
    let mut img = ptr::null_mut();
    assert_eq!(unsafe { oopdbg_image_load(src.as_ptr(), &mut img) }, OopdbgStatus::Ok);
    img
}

fn spawn(img: *const OopdbgImage, selector: &str, args: &[i64]) -> *mut OopdbgExecution {
    let class = CString::new("P").unwrap();
    let sel = CString::new(selector).unwrap();
    let mut ex = ptr::null_mut();
    let s = unsafe { oopdbg_execution_spawn(img, class.as_ptr(), sel.as_ptr(), args.as_ptr(), args.len(), &mut ex) };
    assert_eq!(s, OopdbgStatus::Ok, "{}", last_error());
    ex
}

fn read_str(f: impl Fn(*mut c_char, usize, *mut usize) -> OopdbgStatus) -> String {
    let mut len = 0;
    assert_eq!(f(ptr::null_mut(), 0, &mut len), OopdbgStatus::Ok);
    let mut buf = vec![0 as c_char; len + 1];
    assert_eq!(f(buf.as_mut_ptr(), buf.len(), &mut len), OopdbgStatus::Ok);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string()
}

#[test]
fn run_snapshot_materialize_and_resume() {
    let img = load(PROGRAM);
    let ex = spawn(img, "go", &[5]);
    let mut status = OopdbgExecStatus::Running;
    unsafe {
        assert_eq!(oopdbg_execution_run(img, ex, 0, &mut status), OopdbgStatus::Ok);
        assert_eq!(status, OopdbgExecStatus::SuspendedOnHalt);

        let mut blob = ptr::null_mut();
        assert_eq!(oopdbg_snapshot(img, ex, 7, 3, &mut blob), OopdbgStatus::Ok);
        let (mut data, mut len) = (ptr::null(), 0usize);
        assert_eq!(oopdbg_blob_bytes(blob, &mut data, &mut len), OopdbgStatus::Ok);
        let mut stats = OopdbgBlobStats::default();
        assert_eq!(oopdbg_blob_stats(data, len, &mut stats), OopdbgStatus::Ok);
        assert_eq!(stats.frame_count, 1);
        assert_eq!(stats.object_count, 1);
        assert_eq!(stats.byte_size, len as u64);

        let mut copy = ptr::null_mut();
        assert_eq!(oopdbg_materialize(img, data, len, &mut copy), OopdbgStatus::Ok);
        oopdbg_blob_free(blob);

        let method = read_str(|b, c, l| oopdbg_execution_frame_method(copy, 0, b, c, l));
        assert_eq!(method, "P>>go");
        for e in [ex, copy] {
            assert_eq!(oopdbg_execution_run(img, e, 0, &mut status), OopdbgStatus::Ok);
            assert_eq!(status, OopdbgExecStatus::Completed);
            assert_eq!(read_str(|b, c, l| oopdbg_execution_result(e, b, c, l)), "21");
        }
        oopdbg_execution_free(ex);
        oopdbg_execution_free(copy);
        oopdbg_image_free(img);
    }
}

#[test]
fn stepping_and_depth() {
    let img = load(PROGRAM);
    let ex = spawn(img, "go", &[1]);
    let (mut status, mut depth) = (OopdbgExecStatus::Running, 0usize);
    unsafe {
        oopdbg_execution_run(img, ex, 0, &mut status);
        let mut seen_depth_two = false;
        for _ in 0..20 {
            assert_eq!(oopdbg_execution_step(img, ex, OopdbgStep::Into, &mut status), OopdbgStatus::Ok);
            assert_eq!(oopdbg_execution_info(ex, ptr::null_mut(), &mut depth), OopdbgStatus::Ok);
            if depth == 2 {
                seen_depth_two = true;
                let m = read_str(|b, c, l| oopdbg_execution_frame_method(ex, 0, b, c, l));
                assert_eq!(m, "P>>twice");
                break;
            }
        }
        assert!(seen_depth_two);
        assert_eq!(oopdbg_execution_restart(img, ex, 1, &mut status), OopdbgStatus::Ok);
        assert_eq!(oopdbg_execution_info(ex, &mut status, &mut depth), OopdbgStatus::Ok);
        assert_eq!(depth, 1);
        assert_eq!(status, OopdbgExecStatus::SuspendedOnStep);
        oopdbg_execution_free(ex);
        oopdbg_image_free(img);
    }
}

#[test]
fn exceptions_are_reported() {
    let img = load(PROGRAM);
    let ex = spawn(img, "bad", &[]);
    let mut status = OopdbgExecStatus::Running;
    unsafe {
        assert_eq!(oopdbg_execution_run(img, ex, 0, &mut status), OopdbgStatus::Ok);
        assert_eq!(status, OopdbgExecStatus::SuspendedOnException);
        let e = read_str(|b, c, l| oopdbg_execution_exception(ex, b, c, l));
        assert!(e.starts_with("NumberParseError: "), "{e}");
        // Truncated copies stay terminated and report the full length.
        let mut buf = [1 as c_char; 6];
        let mut len = 0;
        oopdbg_execution_exception(ex, buf.as_mut_ptr(), buf.len(), &mut len);
        assert_eq!(len, e.len());
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), &e[..5]);
        oopdbg_execution_free(ex);
        oopdbg_image_free(img);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut img = ptr::null_mut();
        assert_eq!(oopdbg_image_load(ptr::null(), &mut img), OopdbgStatus::NullArgument);
        let bad = CString::new("class {").unwrap();
        assert_eq!(oopdbg_image_load(bad.as_ptr(), &mut img), OopdbgStatus::LoadFailed);
        assert!(!last_error().is_empty());
        assert!(img.is_null());

        let img = load(PROGRAM);
        let class = CString::new("Nope").unwrap();
        let sel = CString::new("go").unwrap();
        let mut ex = ptr::null_mut();
        let s = oopdbg_execution_spawn(img, class.as_ptr(), sel.as_ptr(), ptr::null(), 0, &mut ex);
        assert_eq!(s, OopdbgStatus::SpawnFailed);
        assert!(last_error().contains("Nope"));

        // Snapshots need a suspended execution.
        let ex = spawn(img, "go", &[2]);
        let mut blob = ptr::null_mut();
        assert_eq!(oopdbg_snapshot(img, ex, 1, 1, &mut blob), OopdbgStatus::SnapshotFailed);

        let mut stats = OopdbgBlobStats::default();
        assert_eq!(oopdbg_blob_stats(b"OOPS".as_ptr(), 4, &mut stats), OopdbgStatus::MalformedBlob);

        let mut status = OopdbgExecStatus::Running;
        oopdbg_execution_run(img, ex, 0, &mut status);
        oopdbg_snapshot(img, ex, 1, 1, &mut blob);
        let (mut data, mut len) = (ptr::null(), 0usize);
        oopdbg_blob_bytes(blob, &mut data, &mut len);
        let other = load("class P { method go(n) { halt; } }");
        let mut copy = ptr::null_mut();
        assert_eq!(oopdbg_materialize(other, data, len, &mut copy), OopdbgStatus::CodeVersionMismatch);

        let mut depth = 0;
        assert_eq!(oopdbg_execution_info(ex, ptr::null_mut(), &mut depth), OopdbgStatus::Ok);
        assert!(last_error().is_empty());
        let mut out_len = 0;
        let s = oopdbg_execution_frame_method(ex, depth, ptr::null_mut(), 0, &mut out_len);
        assert_eq!(s, OopdbgStatus::OutOfRange);

        oopdbg_blob_free(blob);
        oopdbg_execution_free(ex);
        oopdbg_image_free(other);
        oopdbg_image_free(img);
        oopdbg_image_free(ptr::null_mut());
    }
}

#[test]
fn image_hash_is_stable() {
    let (a, b) = (load(PROGRAM), load(PROGRAM));
    let (mut ha, mut hb) = ([0u8; 32], [0u8; 32]);
    unsafe {
        oopdbg_image_hash(a, ha.as_mut_ptr());
        oopdbg_image_hash(b, hb.as_mut_ptr());
        assert_eq!(ha, hb);
        assert_ne!(ha, [0; 32]);
        oopdbg_image_free(a);
        oopdbg_image_free(b);
    }
}

#[test]
fn wire_peek_reads_one_frame() {
    // Ack with correlation id 9, followed by trailing bytes.
    let mut frame = vec![5, 0, 0, 0, 13, 9, 0, 0, 0];
    let mut tag = 0u8;
    let mut used = 0usize;
    unsafe {
        assert_eq!(oopdbg_wire_peek(frame.as_ptr(), frame.len(), &mut tag, &mut used), OopdbgStatus::Ok);
        assert_eq!((tag, used), (13, 9));
        frame.extend_from_slice(&[1, 2, 3]);
        assert_eq!(oopdbg_wire_peek(frame.as_ptr(), frame.len(), &mut tag, &mut used), OopdbgStatus::Ok);
        assert_eq!(used, 9);
        assert_eq!(oopdbg_wire_peek(frame.as_ptr(), 6, &mut tag, &mut used), OopdbgStatus::MalformedFrame);
    }
}
