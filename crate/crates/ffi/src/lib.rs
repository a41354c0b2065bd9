//! C interface: load a checkpoint, run detection, and a few standalone
//! helpers. Every function returns an [`MdfStatus`]; on failure the message
//! is available from [`mdf_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{CStr, CString, c_char};
use std::panic::{AssertUnwindSafe, catch_unwind};
use std::path::PathBuf;

use mdfnet::Error;
use mdfnet::checkpoint::Checkpoint;
use mdfnet::clinical::{ClinicalRecord, Feature, Gender};
use mdfnet::data::{SynthConfig, generate_dataset};
use mdfnet::detection::BBox;
use mdfnet::model::{ClinicalInput, Model};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MdfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    CheckpointMismatch = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Axis-aligned box: top-left corner plus width and height, in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MdfBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Triage record. Numeric fields use NaN for a missing value; `gender` is
/// 0 for M, 1 for F and -1 when missing.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MdfClinical {
    pub temperature: f64,
    pub heartrate: f64,
    pub resprate: f64,
    pub o2sat: f64,
    pub sbp: f64,
    pub dbp: f64,
    pub pain: f64,
    pub acuity: f64,
    pub age: f64,
    pub gender: i32,
}

/// `class_id` is 0..=4 in the order: enlarged cardiac silhouette, atelectasis,
/// consolidation, pleural abnormality, pulmonary edema.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MdfDetection {
    pub class_id: u32,
    pub score: f64,
    pub bbox: MdfBox,
}

/// Opaque model handle.
pub struct MdfModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MdfStatus {
    match e {
        Error::Io { .. } | Error::Csv { .. } => MdfStatus::Io,
        Error::Format(_) | Error::Json(_) => MdfStatus::Format,
        Error::CheckpointMismatch(_) => MdfStatus::CheckpointMismatch,
        Error::Numeric { .. } | Error::Diverged { .. } => MdfStatus::Numeric,
        _ => MdfStatus::InvalidArgument,
    }
}

struct Fail(MdfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MdfStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MdfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MdfStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            MdfStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(MdfStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn bbox(b: MdfBox) -> BBox {
    BBox::new(b.x, b.y, b.w, b.h)
}

fn record(c: &MdfClinical) -> Result<ClinicalRecord, Fail> {
    let mut r = ClinicalRecord::default();
    let vals = [c.temperature, c.heartrate, c.resprate, c.o2sat, c.sbp, c.dbp, c.pain, c.acuity, c.age];
    for (f, v) in Feature::NUMERIC.into_iter().zip(vals) {
        r.set_numeric(f, (!v.is_nan()).then_some(v));
    }
    r.gender = match c.gender {
        -1 => None,
        i => Some(
            *Gender::ALL
                .get(i as usize)
                .ok_or_else(|| Fail(MdfStatus::InvalidArgument, format!("gender code {i} is not -1, 0 or 1")))?,
        ),
    };
    Ok(r)
}

/// Last error message on this thread, or NULL. Valid until the next call
/// into this library from the same thread.
#[unsafe(no_mangle)]
pub extern "C" fn mdf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[unsafe(no_mangle)]
pub extern "C" fn mdf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint; free the handle with [`mdf_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn mdf_model_load(path: *const c_char, out: *mut *mut MdfModel) -> MdfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked above; caller guarantees validity.
        unsafe { *out = std::ptr::null_mut() };
        let path = unsafe { path_arg(path, "path")? };
        let model = Model::from_checkpoint(&Checkpoint::load(&path)?)?;
        let handle = Box::into_raw(Box::new(MdfModel { model }));
        unsafe { *out = handle };
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mdf_model_load`] and not be freed twice.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn mdf_model_free(model: *mut MdfModel) {
    if !model.is_null() {
        // SAFETY: the pointer was produced by Box::into_raw in mdf_model_load.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Side length of the square images the model expects.
///
/// # Safety
/// Pointers must be valid.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn mdf_model_image_size(model: *const MdfModel, out: *mut usize) -> MdfStatus {
    guard(|| {
        // SAFETY: caller guarantees validity.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = m.model.cfg.image_size;
        Ok(())
    })
}

/// Detects abnormalities in one grayscale image of `n_pixels` values in
/// `[0, 1]`, row-major. Writes up to `capacity` detections, sorted by
/// descending score, and their total number to `count`. When `count`
/// exceeds `capacity` the call returns `BUFFER_TOO_SMALL` after filling the
/// buffer. `clinical` may be NULL for models that ignore clinical data.
///
/// # Safety
/// `pixels` must hold `n_pixels` values and `out` room for `capacity`
/// detections.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn mdf_model_detect(
    model: *const MdfModel,
    pixels: *const f64,
    n_pixels: usize,
    clinical: *const MdfClinical,
    score_thresh: f64,
    out: *mut MdfDetection,
    capacity: usize,
    count: *mut usize,
) -> MdfStatus {
    guard(|| {
        // SAFETY: caller guarantees validity of every pointer.
        let m = &unsafe { model.as_ref() }.ok_or_else(|| null("model"))?.model;
        let count = unsafe { count.as_mut() }.ok_or_else(|| null("count"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if out.is_null() && capacity > 0 {
            return Err(null("out"));
        }
        let px = unsafe { std::slice::from_raw_parts(pixels, n_pixels) };
        let rec = match unsafe { clinical.as_ref() } {
            Some(c) => Some(record(c)?),
            None => None,
        };
        if !(0.0..=1.0).contains(&score_thresh) {
            return Err(Fail(MdfStatus::InvalidArgument, format!("score threshold {score_thresh} outside [0, 1]")));
        }
        let image = m.image_tensor(px)?;
        let dets = m.detect(&m.params, &image, &ClinicalInput::new(rec.as_ref()), score_thresh)?;
        *count = dets.len();
        for (i, d) in dets.iter().take(capacity).enumerate() {
            let b = d.bbox;
            let v = MdfDetection { class_id: d.class.index() as u32, score: d.score, bbox: MdfBox { x: b.x, y: b.y, w: b.w, h: b.h } };
            unsafe { out.add(i).write(v) };
        }
        if dets.len() > capacity {
            return Err(Fail(MdfStatus::BufferTooSmall, format!("{} detections, room for {capacity}", dets.len())));
        }
        Ok(())
    })
}

/// Intersection over the predicted box area.
///
/// # Safety
/// `out` must be valid.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn mdf_iobb(pred: MdfBox, gt: MdfBox, out: *mut f64) -> MdfStatus {
    guard(|| {
        // SAFETY: caller guarantees validity.
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = mdfnet::metrics::iobb(&bbox(pred), &bbox(gt))?;
        Ok(())
    })
}

/// Smooth-L1 distance summed over `n` coordinates.
///
/// # Safety
/// `pred` and `target` must hold `n` values; `out` must be valid.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn mdf_smooth_l1(pred: *const f64, target: *const f64, n: usize, beta: f64, out: *mut f64) -> MdfStatus {
    guard(|| {
        if pred.is_null() || target.is_null() {
            return Err(null("pred/target"));
        }
        // SAFETY: caller guarantees validity.
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let (p, t) = unsafe { (std::slice::from_raw_parts(pred, n), std::slice::from_raw_parts(target, n)) };
        *out = mdfnet::training::smooth_l1(p, t, beta)?;
        Ok(())
    })
}

/// Writes a synthetic dataset with its joined manifest under `out_dir`;
/// stores the number of joined instances in `joined`.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string; `joined` may be NULL.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn mdf_generate_dataset(
    out_dir: *const c_char,
    seed: u64,
    n_train: usize,
    n_test: usize,
    kappa: f64,
    joined: *mut usize,
) -> MdfStatus {
    guard(|| {
        // SAFETY: caller guarantees validity.
        let root = unsafe { path_arg(out_dir, "out_dir")? };
        let cfg = SynthConfig { n_train, n_test, kappa, ..SynthConfig::default() };
        let out = generate_dataset(&root, &cfg, seed)?;
        if let Some(j) = unsafe { joined.as_mut() } {
            *j = out.instances.len();
        }
        Ok(())
    })
}
