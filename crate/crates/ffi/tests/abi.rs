use std::ffi::{CStr, CString};
use std::ptr;

use msgca_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(msgca_last_error()) }
        .to_string_lossy()
        .into_owned()
}

const SMALL: &str = r#"{"ws": 5, "synth": {"n_stocks": 6, "n_days": 80, "dim": 8, "seed": 3}}"#;
const TINY_TRAIN: &str = r#"{"epochs": 1, "batch_size": 16, "model": {"d": 8, "ws": 5}}"#;

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(msgca_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn mcc_of_diagonal_is_one() {
    let counts: [u64; 9] = [5, 0, 0, 0, 7, 0, 0, 0, 2];
    let mut out = 0.0;
    let st = unsafe { msgca_mcc(counts.as_ptr(), 3, &mut out) };
    assert_eq!(st, MsgcaStatus::Ok);
    assert!((out - 1.0).abs() < 1e-12);
}

#[test]
fn null_arguments_are_reported() {
    let mut out = 0.0;
    let st = unsafe { msgca_mcc(ptr::null(), 3, &mut out) };
    assert_eq!(st, MsgcaStatus::NullArgument);
    assert!(last_error().contains("counts"));

    let mut len = 0usize;
    let st = unsafe { msgca_dataset_len(ptr::null(), MSGCA_PART_TRAIN, &mut len) };
    assert_eq!(st, MsgcaStatus::NullArgument);
    unsafe {
        msgca_dataset_free(ptr::null_mut());
        msgca_model_free(ptr::null_mut());
    }
}

#[test]
fn bad_json_is_a_config_error() {
    let json = CString::new(r#"{"no_such_key": 1}"#).unwrap();
    let mut ds = ptr::null_mut();
    let st = unsafe { msgca_dataset_synth(json.as_ptr(), &mut ds) };
    assert_eq!(st, MsgcaStatus::Config);
    assert!(ds.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn missing_directory_is_an_io_error() {
    let dir = CString::new("/nonexistent/msgca-ffi-test").unwrap();
    let mut ds = ptr::null_mut();
    let st = unsafe { msgca_dataset_load(dir.as_ptr(), ptr::null(), &mut ds) };
    assert_eq!(st, MsgcaStatus::Io);
    assert!(ds.is_null());
}

#[test]
fn train_predict_checkpoint_round_trip() {
    let opts = CString::new(SMALL).unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { msgca_dataset_synth(opts.as_ptr(), &mut ds) },
        MsgcaStatus::Ok,
        "{}",
        last_error()
    );

    let mut n_test = 0usize;
    assert_eq!(
        unsafe { msgca_dataset_len(ds, MSGCA_PART_TEST, &mut n_test) },
        MsgcaStatus::Ok
    );
    assert!(n_test > 0);
    assert_eq!(
        unsafe { msgca_dataset_len(ds, 7, &mut n_test) },
        MsgcaStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { msgca_dataset_len(ds, MSGCA_PART_TEST, &mut n_test) },
        MsgcaStatus::Ok
    );

    let cfg = CString::new(TINY_TRAIN).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { msgca_train(ds, cfg.as_ptr(), &mut model) },
        MsgcaStatus::Ok,
        "{}",
        last_error()
    );

    let mut probs = vec![0.0; 3 * n_test];
    let st =
        unsafe { msgca_predict_proba(model, ds, MSGCA_PART_TEST, probs.as_mut_ptr(), probs.len()) };
    assert_eq!(st, MsgcaStatus::Ok, "{}", last_error());
    for row in probs.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let st = unsafe { msgca_predict_proba(model, ds, MSGCA_PART_TEST, probs.as_mut_ptr(), 2) };
    assert_eq!(st, MsgcaStatus::InvalidArgument);

    let (mut acc, mut mcc) = (0.0, 0.0);
    assert_eq!(
        unsafe { msgca_evaluate(model, ds, MSGCA_PART_TEST, &mut acc, &mut mcc) },
        MsgcaStatus::Ok
    );
    assert!((0.0..=1.0).contains(&acc));
    assert!((-1.0..=1.0).contains(&mcc));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { msgca_checkpoint_save(model, path.as_ptr()) },
        MsgcaStatus::Ok,
        "{}",
        last_error()
    );
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { msgca_checkpoint_load(path.as_ptr(), &mut loaded) },
        MsgcaStatus::Ok
    );
    let mut again = vec![0.0; 3 * n_test];
    let st = unsafe {
        msgca_predict_proba(loaded, ds, MSGCA_PART_TEST, again.as_mut_ptr(), again.len())
    };
    assert_eq!(st, MsgcaStatus::Ok);
    assert_eq!(probs, again);

    std::fs::write(dir.path().join("bad.ckpt"), b"garbage").unwrap();
    let bad = CString::new(dir.path().join("bad.ckpt").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(
        unsafe { msgca_checkpoint_load(bad.as_ptr(), &mut none) },
        MsgcaStatus::Checkpoint
    );
    assert!(none.is_null());

    unsafe {
        msgca_model_free(model);
        msgca_model_free(loaded);
        msgca_dataset_free(ds);
    }
}

#[test]
fn header_declares_the_api() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/msgca.h")).unwrap();
    for name in [
        "msgca_version",
        "msgca_last_error",
        "msgca_mcc",
        "msgca_dataset_synth",
        "msgca_dataset_load",
        "msgca_dataset_len",
        "msgca_train",
        "msgca_evaluate",
        "msgca_predict_proba",
        "msgca_checkpoint_save",
        "msgca_checkpoint_load",
        "MSGCA_STATUS_OK",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
