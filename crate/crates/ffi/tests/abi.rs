use std::ffi::{CStr, CString};
use std::ptr;

use hallu_probe::probe::mlp::Mlp;
use hallu_probe::probe::{checkpoint, Probe, ProbeConfig};
use hallu_probe_ffi::*;

fn probe(dim: usize) -> Probe {
    let config = ProbeConfig::new(dim);
    let mut net = Mlp::<f32>::zeros(&config.layer_sizes());
    let params: Vec<f32> = (0..net.num_params()).map(|i| ((i * 37 % 101) as f32 - 50.0) * 1e-3).collect();
    net.set_flat(&params);
    Probe { config, standardizer: None, net }
}

fn last_error() -> String {
    let p = hp_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn loaded_probe_matches_the_rust_runtime() {
    let p = probe(5);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("p.hpck");
    checkpoint::save(&p, &path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { hp_probe_load(cpath.as_ptr(), &mut handle) }, HpStatus::Ok);
    assert_eq!(unsafe { hp_probe_input_size(handle) }, 5);

    let rows: Vec<f32> = (0..15).map(|i| i as f32 * 0.3 - 2.0).collect();
    let mut out = [0f32; 3];
    assert_eq!(unsafe { hp_probe_predict(handle, rows.as_ptr(), 3, 5, out.as_mut_ptr()) }, HpStatus::Ok);
    for (r, got) in rows.chunks(5).zip(out) {
        assert_eq!(got, p.predict_one(r).unwrap());
    }

    assert_eq!(unsafe { hp_probe_predict(handle, rows.as_ptr(), 5, 3, out.as_mut_ptr()) }, HpStatus::DimensionMismatch);
    assert!(last_error().contains("expects 5"));
    unsafe { hp_probe_free(handle) };
}

#[test]
fn probe_from_bytes_and_bad_checkpoints() {
    let bytes = checkpoint::encode(&probe(2));
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { hp_probe_from_bytes(bytes.as_ptr(), bytes.len(), &mut handle) }, HpStatus::Ok);
    assert_eq!(unsafe { hp_probe_input_size(handle) }, 2);
    unsafe { hp_probe_free(handle) };

    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { hp_probe_from_bytes(bytes.as_ptr(), 7, &mut handle) }, HpStatus::BadCheckpoint);
    assert!(handle.is_null());
    let missing = CString::new("/nonexistent/p.hpck").unwrap();
    assert_eq!(unsafe { hp_probe_load(missing.as_ptr(), &mut handle) }, HpStatus::Io);
    assert_eq!(unsafe { hp_probe_load(ptr::null(), &mut handle) }, HpStatus::NullPointer);
    assert!(last_error().contains("path"));
    assert_eq!(unsafe { hp_probe_input_size(ptr::null()) }, 0);
    unsafe { hp_probe_free(ptr::null_mut()) };
}

#[test]
fn map_booleans_covers_every_input() {
    for answerable in [true, false] {
        for bits in 0u8..16 {
            let b = |i: u8| bits & (1 << i) != 0;
            let mut got = HpLabel::Invalid;
            assert_eq!(unsafe { hp_map_booleans(answerable, b(0), b(1), b(2), b(3), &mut got) }, HpStatus::Ok);
            let verdict = hallu_probe::labeler::JudgeVerdict::new(b(0), b(1), b(2), b(3));
            let want: HpLabel = match hallu_probe::labeler::map_booleans(answerable, &verdict) {
                hallu_probe::labeler::Label::Grounded => HpLabel::Grounded,
                hallu_probe::labeler::Label::Hallucinated => HpLabel::Hallucinated,
                hallu_probe::labeler::Label::Invalid => HpLabel::Invalid,
            };
            assert_eq!(got, want);
        }
    }
    assert_eq!(unsafe { hp_map_booleans(true, false, true, false, false, ptr::null_mut()) }, HpStatus::NullPointer);
}

#[test]
fn quotes_and_sentences() {
    let s = CString::new("The tower is 324 metres tall.").unwrap();
    let q = CString::new("324 metres").unwrap();
    let mut hit = false;
    assert_eq!(unsafe { hp_verify_quote(s.as_ptr(), q.as_ptr(), &mut hit) }, HpStatus::Ok);
    assert!(hit);
    let q = CString::new("324 Metres").unwrap();
    assert_eq!(unsafe { hp_verify_quote(s.as_ptr(), q.as_ptr(), &mut hit) }, HpStatus::Ok);
    assert!(!hit);
    let bad = [0xffu8, 0];
    assert_eq!(unsafe { hp_verify_quote(bad.as_ptr().cast(), q.as_ptr(), &mut hit) }, HpStatus::InvalidUtf8);

    let text = "Dr. Smith arrived. He left at 5 p.m. on Monday! Was it late?";
    let c = CString::new(text).unwrap();
    let mut n = 0usize;
    assert_eq!(unsafe { hp_split_sentences(c.as_ptr(), ptr::null_mut(), 0, &mut n) }, HpStatus::BufferTooSmall);
    let want = hallu_probe::segment::split_sentences(text);
    assert_eq!(n, want.len());
    let mut spans = vec![HpSpan::default(); n];
    assert_eq!(unsafe { hp_split_sentences(c.as_ptr(), spans.as_mut_ptr(), n, &mut n) }, HpStatus::Ok);
    for (got, w) in spans.iter().zip(&want) {
        assert_eq!((got.start, got.end), (w.start, w.end));
    }
    let empty = CString::new("").unwrap();
    assert_eq!(unsafe { hp_split_sentences(empty.as_ptr(), ptr::null_mut(), 0, &mut n) }, HpStatus::Ok);
    assert_eq!(n, 0);
}

#[test]
fn errors_are_thread_local() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { hp_probe_load(ptr::null(), &mut h) }, HpStatus::NullPointer);
    std::thread::spawn(|| assert!(hp_last_error_message().is_null())).join().unwrap();
    assert!(!hp_last_error_message().is_null());
}

#[test]
fn version_is_the_package_version() {
    let v = unsafe { CStr::from_ptr(hp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
