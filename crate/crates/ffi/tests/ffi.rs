use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use mdfnet::clinical::{ClinicalRecord, fit_normalization};
use mdfnet::data::{SynthConfig, synth_generate};
use mdfnet::model::{ClinicalInput, Mode, Model, ModelConfig};
use mdfnet_ffi::*;

fn last_error() -> String {
    let p = mdf_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn save_model(dir: &Path, mode: Mode) -> (PathBuf, Model, Vec<mdfnet::data::Sample>) {
    let ds = synth_generate(&SynthConfig { n_train: 6, n_test: 2, ..SynthConfig::default() }, 5).unwrap();
    let (train, test) = ds.samples().unwrap();
    let recs: Vec<ClinicalRecord> = train.iter().map(|s| s.clinical.clone()).collect();
    let cfg = ModelConfig { mode, ..ModelConfig::desk() };
    let model = Model::new(cfg, Some(fit_normalization(&recs).unwrap()), 3).unwrap();
    let path = dir.join(format!("{mode}.ckpt"));
    model.to_checkpoint(Default::default()).unwrap().save(&path).unwrap();
    (path, model, test)
}

fn c_clinical(r: &ClinicalRecord) -> MdfClinical {
    let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
    MdfClinical {
        temperature: v(r.temperature),
        heartrate: v(r.heartrate),
        resprate: v(r.resprate),
        o2sat: v(r.o2sat),
        sbp: v(r.sbp),
        dbp: v(r.dbp),
        pain: v(r.pain),
        acuity: v(r.acuity),
        age: v(r.age),
        gender: r.gender.map_or(-1, |g| g.index() as i32),
    }
}

#[test]
fn version_and_helpers() {
    let v = unsafe { CStr::from_ptr(mdf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));

    let mut out = 0.0;
    let a = MdfBox { x: 0.0, y: 0.0, w: 10.0, h: 10.0 };
    let b = MdfBox { x: 0.0, y: 0.0, w: 5.0, h: 5.0 };
    // small prediction inside a large ground truth
    assert_eq!(unsafe { mdf_iobb(b, a, &mut out) }, MdfStatus::Ok);
    assert_eq!(out, 1.0);
    assert_eq!(unsafe { mdf_iobb(a, b, &mut out) }, MdfStatus::Ok);
    assert_eq!(out, 0.25);
    assert_eq!(unsafe { mdf_iobb(a, b, ptr::null_mut()) }, MdfStatus::NullPointer);
    assert!(last_error().contains("out"));
    let empty = MdfBox { x: 0.0, y: 0.0, w: 0.0, h: 3.0 };
    assert_eq!(unsafe { mdf_iobb(empty, a, &mut out) }, MdfStatus::InvalidArgument);

    let p = [1.0, 0.5];
    let t = [0.0, 0.5];
    assert_eq!(unsafe { mdf_smooth_l1(p.as_ptr(), t.as_ptr(), 2, 1.0 / 9.0, &mut out) }, MdfStatus::Ok);
    assert!((out - 17.0 / 18.0).abs() < 1e-15);
    assert_eq!(unsafe { mdf_smooth_l1(p.as_ptr(), t.as_ptr(), 2, -1.0, &mut out) }, MdfStatus::InvalidArgument);
    assert!(mdf_last_error_message().is_null() || !last_error().is_empty());
}

#[test]
fn model_handle_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model, test) = save_model(dir.path(), Mode::Mdf);
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { mdf_model_load(cstr(&path).as_ptr(), &mut handle) }, MdfStatus::Ok);
    let mut size = 0;
    assert_eq!(unsafe { mdf_model_image_size(handle, &mut size) }, MdfStatus::Ok);
    assert_eq!(size, 64);

    for s in &test {
        let want = model.detect(&model.params, &s.image, &ClinicalInput::new(Some(&s.clinical)), 0.0).unwrap();
        let clin = c_clinical(&s.clinical);
        let mut buf = vec![MdfDetection { class_id: 0, score: 0.0, bbox: MdfBox { x: 0.0, y: 0.0, w: 0.0, h: 0.0 } }; 200];
        let mut n = 0;
        let px = s.image.data();
        let st = unsafe { mdf_model_detect(handle, px.as_ptr(), px.len(), &clin, 0.0, buf.as_mut_ptr(), buf.len(), &mut n) };
        assert_eq!(st, MdfStatus::Ok);
        assert_eq!(n, want.len());
        for (got, w) in buf.iter().zip(&want) {
            assert_eq!(got.class_id as usize, w.class.index());
            assert_eq!((got.score, got.bbox.x, got.bbox.y, got.bbox.w, got.bbox.h), (w.score, w.bbox.x, w.bbox.y, w.bbox.w, w.bbox.h));
        }
        if n > 1 {
            let mut m = 0;
            let st = unsafe { mdf_model_detect(handle, px.as_ptr(), px.len(), &clin, 0.0, buf.as_mut_ptr(), 1, &mut m) };
            assert_eq!((st, m), (MdfStatus::BufferTooSmall, n));
        }
        let st = unsafe { mdf_model_detect(handle, px.as_ptr(), px.len(), ptr::null(), 0.0, buf.as_mut_ptr(), buf.len(), &mut n) };
        assert_eq!(st, MdfStatus::InvalidArgument);
        assert!(last_error().contains("clinical"));
        let st = unsafe { mdf_model_detect(handle, px.as_ptr(), 10, &clin, 0.0, buf.as_mut_ptr(), buf.len(), &mut n) };
        assert_eq!(st, MdfStatus::InvalidArgument);
    }
    unsafe { mdf_model_free(handle) };
    unsafe { mdf_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors_carry_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut handle = ptr::null_mut();
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(unsafe { mdf_model_load(cstr(&missing).as_ptr(), &mut handle) }, MdfStatus::Io);
    assert!(handle.is_null());
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(unsafe { mdf_model_load(cstr(&junk).as_ptr(), &mut handle) }, MdfStatus::Format);
    assert!(last_error().contains("magic"));
    assert_eq!(unsafe { mdf_model_load(ptr::null(), &mut handle) }, MdfStatus::NullPointer);

    let (path, _, _) = save_model(dir.path(), Mode::Mdf);
    let mut ck = mdfnet::checkpoint::Checkpoint::load(&path).unwrap();
    ck.meta["model"]["head"]["hidden"] = 32.into();
    ck.save(&path).unwrap();
    assert_eq!(unsafe { mdf_model_load(cstr(&path).as_ptr(), &mut handle) }, MdfStatus::CheckpointMismatch);
}

#[test]
fn baseline_needs_no_clinical_record() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _, test) = save_model(dir.path(), Mode::Baseline);
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { mdf_model_load(cstr(&path).as_ptr(), &mut handle) }, MdfStatus::Ok);
    let px = test[0].image.data();
    let mut n = 0;
    let st = unsafe { mdf_model_detect(handle, px.as_ptr(), px.len(), ptr::null(), 0.5, ptr::null_mut(), 0, &mut n) };
    assert!(st == MdfStatus::Ok || st == MdfStatus::BufferTooSmall);
    unsafe { mdf_model_free(handle) };
}

#[test]
fn generates_a_joined_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let mut joined = 0;
    assert_eq!(unsafe { mdf_generate_dataset(cstr(&root).as_ptr(), 7, 10, 4, 1.0, &mut joined) }, MdfStatus::Ok);
    assert_eq!(joined, 14);
    assert!(root.join("manifest.jsonl").is_file());
    assert_eq!(unsafe { mdf_generate_dataset(cstr(&root).as_ptr(), 7, 10, 4, 2.0, &mut joined) }, MdfStatus::InvalidArgument);
    assert!(last_error().contains("kappa"));
}

/// Compiles a small C program against the generated header and the shared
/// library; skipped when no C compiler is on the path.
#[test]
fn c_program_links_against_the_header() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else { return };
    if !cc.status.success() {
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    if !lib_dir.join("libmdfnet_ffi.so").is_file() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "mdfnet.h"
int main(void) {
    MdfBox a = {0, 0, 10, 10}, b = {0, 0, 5, 5};
    double v = -1;
    if (mdf_iobb(b, a, &v) != MDF_STATUS_OK || v != 1.0) return 1;
    if (mdf_iobb(a, b, NULL) != MDF_STATUS_NULL_POINTER) return 2;
    if (strstr(mdf_last_error_message(), "null") == NULL) return 3;
    MdfModel *m = NULL;
    if (mdf_model_load("/nonexistent.ckpt", &m) != MDF_STATUS_IO || m != NULL) return 4;
    printf("%s\n", mdf_version());
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let st = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg("-L")
        .arg(lib_dir)
        .arg("-lmdfnet_ffi")
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap();
    assert!(st.success());
    let out = Command::new(&bin).env("LD_LIBRARY_PATH", lib_dir).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
