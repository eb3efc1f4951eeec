//! C ABI over `sat_core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released by the matching `*_free`. Every fallible call
//! returns a [`SatStatus`]; on failure, [`sat_last_error`] describes the
//! problem for the calling thread. Panics are caught and reported as
//! [`SatStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sat_core::checkpoint::Checkpoint;
use sat_core::config::RunConfig;
use sat_core::eval::{evaluate, sauvegrain_sum, AgeMap};
use sat_core::model::{predict_scores, ForwardMode, SatModel, ScoreMode};
use sat_core::pipeline::train_run;
use sat_core::synth::{generate, read_dataset, write_dataset, Dataset, SynthConfig};
use sat_core::SatError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SatStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8 or an undersized output buffer.
    InvalidArgument = 1,
    Dimension = 2,
    Contract = 3,
    Config = 4,
    Data = 5,
    Numerical = 6,
    Format = 7,
    Io = 8,
    Internal = 9,
}

impl From<&SatError> for SatStatus {
    fn from(e: &SatError) -> Self {
        match e {
            SatError::Dimension(_) => SatStatus::Dimension,
            SatError::Contract(_) => SatStatus::Contract,
            SatError::Config(_) => SatStatus::Config,
            SatError::Data(_) => SatStatus::Data,
            SatError::Numerical(_) => SatStatus::Numerical,
            SatError::Format { .. } | SatError::Json(_) => SatStatus::Format,
            SatError::Io { .. } => SatStatus::Io,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SatScoreMode {
    Expected = 0,
    Argmax = 1,
}

impl From<SatScoreMode> for ScoreMode {
    fn from(m: SatScoreMode) -> Self {
        match m {
            SatScoreMode::Expected => ScoreMode::Expected,
            SatScoreMode::Argmax => ScoreMode::Argmax,
        }
    }
}

/// Opaque dataset handle.
pub struct SatDataset(Dataset);

/// Opaque trained-model handle.
pub struct SatModelHandle(SatModel<f32>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes removed"));
}

struct Fail(SatStatus, String);

impl From<SatError> for Fail {
    fn from(e: SatError) -> Self {
        Fail(SatStatus::from(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(SatStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SatStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SatStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len < need {
        return Err(invalid(format!("{what} holds {len} values, {need} needed")));
    }
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next `sat_*` call on the same thread.
#[no_mangle]
pub extern "C" fn sat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sat_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a synthetic dataset from a JSON data configuration (`"{}"` for defaults).
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sat_dataset_generate(config_json: *const c_char, out: *mut *mut SatDataset) -> SatStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let cfg: SynthConfig = serde_json::from_str(str_arg(config_json, "config_json")?)
            .map_err(|e| Fail(SatStatus::Config, e.to_string()))?;
        let ds = generate(&cfg)?;
        *out = Box::into_raw(Box::new(SatDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sat_dataset_load(dir: *const c_char, out: *mut *mut SatDataset) -> SatStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let ds = read_dataset(Path::new(str_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(SatDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live dataset handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn sat_dataset_save(ds: *const SatDataset, dir: *const c_char) -> SatStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        write_dataset(&ds.0, Path::new(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live dataset handle; `num_samples` and `num_regions` writable.
#[no_mangle]
pub unsafe extern "C" fn sat_dataset_shape(
    ds: *const SatDataset,
    num_samples: *mut usize,
    num_regions: *mut usize,
) -> SatStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        *out_arg(num_samples, "num_samples")? = ds.0.len();
        *out_arg(num_regions, "num_regions")? = ds.0.num_regions();
        Ok(())
    })
}

/// Copies the labels of sample `index` into `labels[0..num_regions]`.
///
/// # Safety
/// `ds` must be a live dataset handle; `labels` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn sat_dataset_labels(
    ds: *const SatDataset,
    index: usize,
    labels: *mut u32,
    len: usize,
) -> SatStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let sample =
            ds.0.samples
                .get(index)
                .ok_or_else(|| Fail(SatStatus::Data, format!("sample {index} out of range for {}", ds.0.len())))?;
        slice_out(labels, len, sample.labels.len(), "labels")?.copy_from_slice(&sample.labels);
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn sat_dataset_free(ds: *mut SatDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains with a JSON run configuration, writing artifacts under `out_dir`.
///
/// # Safety
/// String arguments must be NUL-terminated; `ds` a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sat_train(
    config_json: *const c_char,
    ds: *const SatDataset,
    out_dir: *const c_char,
) -> SatStatus {
    guard(|| {
        let cfg = RunConfig::from_json(str_arg(config_json, "config_json")?)?;
        let ds = ref_arg(ds, "dataset")?;
        train_run(&cfg, &ds.0, Path::new(str_arg(out_dir, "out_dir")?), None, None)?;
        Ok(())
    })
}

/// Loads the model stored in a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sat_model_load(path: *const c_char, out: *mut *mut SatModelHandle) -> SatStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = Checkpoint::load(Path::new(str_arg(path, "path")?))?.model()?;
        *out = Box::into_raw(Box::new(SatModelHandle(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live model handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sat_model_num_regions(model: *const SatModelHandle, out: *mut usize) -> SatStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(model, "model")?.0.config().num_regions;
        Ok(())
    })
}

/// Predicted scores for sample `index` of `ds`, one per region.
///
/// # Safety
/// Handles must be live; `scores` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn sat_model_predict(
    model: *const SatModelHandle,
    ds: *const SatDataset,
    index: usize,
    mode: SatScoreMode,
    scores: *mut u32,
    len: usize,
) -> SatStatus {
    guard(|| {
        let model = &ref_arg(model, "model")?.0;
        let ds = &ref_arg(ds, "dataset")?.0;
        if index >= ds.len() {
            return Err(Fail(SatStatus::Data, format!("sample {index} out of range for {}", ds.len())));
        }
        let cfg = model.config();
        if ds.class_counts != cfg.class_counts || ds.image_size != cfg.image_size {
            return Err(Fail(SatStatus::Config, "dataset does not match the model".into()));
        }
        let out = slice_out(scores, len, cfg.num_regions, "scores")?;
        let (tape, _, output) = model.run(&ds.batch_images(&[index]), ForwardMode::Eval)?;
        let logits: Vec<_> = output.logits.iter().map(|&v| tape.value(v)).collect();
        out.copy_from_slice(&predict_scores(&logits, mode.into())[0]);
        Ok(())
    })
}

/// Evaluates `model` on `ds` with the default age map. On success `*report_json`
/// holds a report to be released with [`sat_string_free`].
///
/// # Safety
/// Handles must be live; `thetas` must hold `num_thetas` values; `report_json` writable.
#[no_mangle]
pub unsafe extern "C" fn sat_model_evaluate(
    model: *const SatModelHandle,
    ds: *const SatDataset,
    thetas: *const f64,
    num_thetas: usize,
    mode: SatScoreMode,
    report_json: *mut *mut c_char,
) -> SatStatus {
    guard(|| {
        let out = out_arg(report_json, "report_json")?;
        *out = ptr::null_mut();
        let model = &ref_arg(model, "model")?.0;
        let ds = &ref_arg(ds, "dataset")?.0;
        let thetas = slice_arg(thetas, num_thetas, "thetas")?;
        let report = evaluate(model, ds, thetas, &AgeMap::default(), mode.into(), 64)?;
        let json = CString::new(report.to_json()?).map_err(|e| Fail(SatStatus::Internal, e.to_string()))?;
        *out = json.into_raw();
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn sat_model_free(model: *mut SatModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total maturity score of five region scores.
///
/// # Safety
/// `scores` must hold `len` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sat_sauvegrain_sum(scores: *const f64, len: usize, out: *mut f64) -> SatStatus {
    guard(|| {
        let scores = slice_arg(scores, len, "scores")?;
        *out_arg(out, "out")? = sauvegrain_sum(scores)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(sat_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn every_error_kind_has_its_own_status() {
        let io = SatError::io("x", std::io::Error::other("boom"));
        let cases = [
            (SatError::Dimension(String::new()), SatStatus::Dimension),
            (SatError::Contract(String::new()), SatStatus::Contract),
            (SatError::Config(String::new()), SatStatus::Config),
            (SatError::Data(String::new()), SatStatus::Data),
            (SatError::Numerical(String::new()), SatStatus::Numerical),
            (SatError::format("x", "bad"), SatStatus::Format),
            (io, SatStatus::Io),
        ];
        for (e, status) in &cases {
            assert_eq!(SatStatus::from(e), *status);
        }
    }

    #[test]
    fn panics_become_internal_errors() {
        assert_eq!(guard(|| panic!("unreachable state")), SatStatus::Internal);
        assert_eq!(last_error(), "internal panic");
    }

    #[test]
    fn success_clears_the_message() {
        assert_eq!(guard(|| Err(invalid("nope"))), SatStatus::InvalidArgument);
        assert_eq!(last_error(), "nope");
        assert_eq!(guard(|| Ok(())), SatStatus::Ok);
        assert_eq!(last_error(), "");
    }

    #[test]
    fn embedded_nul_does_not_lose_the_message() {
        set_error("a\0b");
        assert_eq!(last_error(), "a b");
    }

    #[test]
    fn short_output_buffer_is_rejected() {
        let mut buf = [0u32; 2];
        assert!(unsafe { slice_out(buf.as_mut_ptr(), 2, 5, "labels") }.is_err());
        assert!(unsafe { slice_out(buf.as_mut_ptr(), 2, 2, "labels") }.is_ok());
    }
}
