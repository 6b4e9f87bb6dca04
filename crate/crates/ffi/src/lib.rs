//! C ABI over the `msgca` library.
//!
//! Objects cross the boundary as opaque handles created by `msgca_*`
//! constructors and released with the matching `*_free`. Every fallible
//! call returns an [`MsgcaStatus`]; on failure [`msgca_last_error`] gives a
//! message for the calling thread. Configuration travels as JSON strings
//! whose keys mirror the Rust config structs; a null pointer means
//! defaults.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use serde::Deserialize;

use msgca::data::{
    synth_dataset, DataPaths, Dataset, IndicatorTransform, LabelSpec, SplitPart, SplitRatios,
    SynthConfig,
};
use msgca::evaluation::{accuracy, mcc, ConfusionMatrix};
use msgca::training::{
    confusion, load_checkpoint, save_checkpoint, train, Checkpoint, TrainOptions,
};
use msgca::{Model, MsgcaError, TrainConfig};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsgcaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numeric = 5,
    Checkpoint = 6,
    Io = 7,
    Panic = 8,
}

/// Split selector for per-part calls.
pub const MSGCA_PART_TRAIN: i32 = 0;
pub const MSGCA_PART_VALID: i32 = 1;
pub const MSGCA_PART_TEST: i32 = 2;

/// A loaded or generated dataset with its chronological split.
pub struct MsgcaDataset {
    inner: Dataset,
}

/// A trained model with its training state.
pub struct MsgcaModel {
    model: Model,
    checkpoint: Option<Checkpoint>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes replaced"));
}

fn status_of(e: &MsgcaError) -> MsgcaStatus {
    match e {
        MsgcaError::Config(_) => MsgcaStatus::Config,
        MsgcaError::NonFinite(_) => MsgcaStatus::Numeric,
        MsgcaError::CorruptCheckpoint(_) | MsgcaError::CheckpointVersion { .. } => {
            MsgcaStatus::Checkpoint
        }
        MsgcaError::Io { .. } => MsgcaStatus::Io,
        MsgcaError::Shape(_) => MsgcaStatus::InvalidArgument,
        _ => MsgcaStatus::Data,
    }
}

/// Runs `f`, recording any error or panic for [`msgca_last_error`].
fn guard(f: impl FnOnce() -> Result<(), (MsgcaStatus, String)>) -> MsgcaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MsgcaStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MsgcaStatus::Panic
        }
    }
}

fn lib_err(e: MsgcaError) -> (MsgcaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MsgcaStatus, String) {
    (MsgcaStatus::NullArgument, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn opt_str<'a>(
    p: *const c_char,
    what: &str,
) -> Result<Option<&'a str>, (MsgcaStatus, String)> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| (MsgcaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// # Safety
/// As for [`opt_str`].
unsafe fn req_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MsgcaStatus, String)> {
    opt_str(p, what)?.ok_or_else(|| null(what))
}

fn parse_json<T: for<'de> Deserialize<'de> + Default>(
    s: Option<&str>,
    what: &str,
) -> Result<T, (MsgcaStatus, String)> {
    match s {
        None => Ok(T::default()),
        Some(s) => {
            serde_json::from_str(s).map_err(|e| (MsgcaStatus::Config, format!("{what}: {e}")))
        }
    }
}

fn part_of(part: i32) -> Result<SplitPart, (MsgcaStatus, String)> {
    match part {
        MSGCA_PART_TRAIN => Ok(SplitPart::Train),
        MSGCA_PART_VALID => Ok(SplitPart::Valid),
        MSGCA_PART_TEST => Ok(SplitPart::Test),
        _ => Err((
            MsgcaStatus::InvalidArgument,
            format!("unknown split part {part}"),
        )),
    }
}

/// Windowing, labeling and split settings of a dataset.
#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DatasetOptions {
    ws: usize,
    labels: LabelSpec,
    transform: IndicatorTransform,
    split: SplitRatios,
    synth: SynthConfig,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            ws: msgca::ModelConfig::default().ws,
            labels: LabelSpec::default(),
            transform: IndicatorTransform::default(),
            split: SplitRatios::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn msgca_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next `msgca_*` call on the same thread.
#[no_mangle]
pub extern "C" fn msgca_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Multiclass MCC of a row-major `k x k` confusion matrix (rows are true
/// classes).
///
/// # Safety
/// `counts` must point to `k * k` readable values and `out` to one
/// writable double.
#[no_mangle]
pub unsafe extern "C" fn msgca_mcc(counts: *const u64, k: usize, out: *mut f64) -> MsgcaStatus {
    guard(|| {
        if counts.is_null() {
            return Err(null("counts"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let flat = std::slice::from_raw_parts(counts, k * k);
        let rows: Vec<Vec<u64>> = flat.chunks(k.max(1)).map(<[u64]>::to_vec).collect();
        let cm = ConfusionMatrix::from_counts(&rows).map_err(lib_err)?;
        *out = mcc(&cm);
        Ok(())
    })
}

/// Generates a synthetic dataset. `options_json` may set `ws`, `labels`,
/// `transform`, `split` and `synth` (a synthetic-data config).
///
/// # Safety
/// `options_json` must be null or a NUL-terminated string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn msgca_dataset_synth(
    options_json: *const c_char,
    out: *mut *mut MsgcaDataset,
) -> MsgcaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let opts: DatasetOptions =
            parse_json(opt_str(options_json, "options_json")?, "options_json")?;
        let synth = synth_dataset(&opts.synth).map_err(lib_err)?;
        let inner =
            Dataset::from_synth(&synth, opts.labels, opts.ws, opts.split).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MsgcaDataset { inner }));
        Ok(())
    })
}

/// Loads `prices.csv`, `documents.jsonl`, `embeddings.jsonl` and `graph.tsv`
/// from `dir`. Options as for [`msgca_dataset_synth`]; `synth` is ignored.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msgca_dataset_load(
    dir: *const c_char,
    options_json: *const c_char,
    out: *mut *mut MsgcaDataset,
) -> MsgcaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = PathBuf::from(req_str(dir, "dir")?);
        let opts: DatasetOptions =
            parse_json(opt_str(options_json, "options_json")?, "options_json")?;
        let inner = Dataset::load(
            &DataPaths::in_dir(dir),
            opts.labels,
            opts.transform,
            opts.ws,
            opts.split,
        )
        .map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MsgcaDataset { inner }));
        Ok(())
    })
}

/// Number of samples in one split part.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msgca_dataset_len(
    ds: *const MsgcaDataset,
    part: i32,
    out: *mut usize,
) -> MsgcaStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ds.inner.split.part(part_of(part)?).len();
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msgca_dataset_free(ds: *mut MsgcaDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains on `ds` with a JSON training config (keys of the Rust
/// `TrainConfig`, the network shape under `model`). When the dataset
/// carries document embeddings, their width replaces `model.doc_dim`.
///
/// # Safety
/// `ds` must be a live handle, `config_json` null or NUL-terminated, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msgca_train(
    ds: *const MsgcaDataset,
    config_json: *const c_char,
    out: *mut *mut MsgcaModel,
) -> MsgcaStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg: TrainConfig = parse_json(opt_str(config_json, "config_json")?, "config_json")?;
        if ds.inner.panel.dim > 0 {
            cfg.model.doc_dim = ds.inner.panel.dim;
        }
        let res = train(&ds.inner, &cfg, &TrainOptions::default(), None).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MsgcaModel {
            model: res.model,
            checkpoint: Some(res.checkpoint),
        }));
        Ok(())
    })
}

/// Accuracy and MCC of the model on one split part.
///
/// # Safety
/// Handles must be live; `acc` and `mcc_out` writable.
#[no_mangle]
pub unsafe extern "C" fn msgca_evaluate(
    model: *const MsgcaModel,
    ds: *const MsgcaDataset,
    part: i32,
    acc: *mut f64,
    mcc_out: *mut f64,
) -> MsgcaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if acc.is_null() || mcc_out.is_null() {
            return Err(null("acc/mcc_out"));
        }
        let samples = ds.inner.split.part(part_of(part)?);
        let cm = confusion(&m.model.params, &m.model.config, &ds.inner, samples, 256)
            .map_err(lib_err)?;
        *acc = accuracy(&cm).map_err(lib_err)?;
        *mcc_out = mcc(&cm);
        Ok(())
    })
}

/// Class probabilities (down, flat, up) for every sample of one split
/// part, row-major into `out`, which must hold `len = 3 * n` doubles.
///
/// # Safety
/// Handles must be live and `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn msgca_predict_proba(
    model: *const MsgcaModel,
    ds: *const MsgcaDataset,
    part: i32,
    out: *mut f64,
    len: usize,
) -> MsgcaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let samples = ds.inner.split.part(part_of(part)?);
        if len != 3 * samples.len() {
            return Err((
                MsgcaStatus::InvalidArgument,
                format!("buffer holds {len} values, need {}", 3 * samples.len()),
            ));
        }
        let p = m
            .model
            .predict_proba(&ds.inner.panel, &ds.inner.graph, samples, 256)
            .map_err(lib_err)?;
        let dst = std::slice::from_raw_parts_mut(out, len);
        for (d, v) in dst.iter_mut().zip(p.iter()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Writes the model's training state to `path`. Only models returned by
/// [`msgca_train`] or [`msgca_checkpoint_load`] carry one.
///
/// # Safety
/// `model` must be live and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn msgca_checkpoint_save(
    model: *const MsgcaModel,
    path: *const c_char,
) -> MsgcaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = req_str(path, "path")?;
        let ckpt = m.checkpoint.as_ref().ok_or_else(|| {
            (
                MsgcaStatus::InvalidArgument,
                "model has no training state".to_string(),
            )
        })?;
        save_checkpoint(path, ckpt).map_err(lib_err)
    })
}

/// Loads a checkpoint; the model uses its best-validation weights.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msgca_checkpoint_load(
    path: *const c_char,
    out: *mut *mut MsgcaModel,
) -> MsgcaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = load_checkpoint(req_str(path, "path")?).map_err(lib_err)?;
        let model = Model {
            config: ckpt.config.model.clone(),
            params: ckpt.best_params(),
        };
        *out = Box::into_raw(Box::new(MsgcaModel {
            model,
            checkpoint: Some(ckpt),
        }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msgca_model_free(model: *mut MsgcaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
