use std::ffi::{c_int, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use magsr::degrade::{degrade, DegradeConfig};
use magsr::inference::{decompose, sample};
use magsr::model::snapshot::save_snapshot;
use magsr::model::{build_model, random_input, Heads, ModelConfig};
use magsr::Grid;
use magsr_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(magsr_last_error()) }.to_string_lossy().into_owned()
}

fn small_model(heads: Heads) -> magsr::model::Model {
    let cfg = ModelConfig {
        base_channels: 4,
        depth: 2,
        heads,
        variance_floor: if heads == Heads::MeanAndLogvar { 25.0 } else { 0.0 },
        ..Default::default()
    };
    build_model(cfg, 3).unwrap()
}

fn saved(dir: &Path, heads: Heads) -> (PathBuf, magsr::model::Model) {
    let model = small_model(heads);
    let path = dir.join("m.snap");
    save_snapshot(&model, &path).unwrap();
    (path, model)
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn degrade_matches_library() {
    let hr = random_input(8, 8, 100.0, 1);
    let mut lr = vec![0.0; 16];
    let status = unsafe { magsr_degrade(hr.as_slice().as_ptr(), 8, 8, 2, 0.0, 0, lr.as_mut_ptr(), lr.len()) };
    assert_eq!(status, MagsrStatus::Ok);
    let expect = degrade(&hr, &DegradeConfig::with_scale(2).unwrap()).unwrap();
    assert_eq!(lr, expect.as_slice());
    assert!(last_error().is_empty());
}

#[test]
fn degrade_reports_bad_arguments() {
    let hr = vec![0.0; 9];
    let mut lr = vec![0.0; 1];
    let status = unsafe { magsr_degrade(hr.as_ptr(), 3, 3, 2, 0.0, 0, lr.as_mut_ptr(), 1) };
    assert_eq!(status, MagsrStatus::InvalidArgument);
    assert!(last_error().contains("divisible"), "{}", last_error());
    let status = unsafe { magsr_degrade(ptr::null(), 4, 4, 2, 0.0, 0, lr.as_mut_ptr(), 4) };
    assert_eq!(status, MagsrStatus::NullPointer);
    let status = unsafe { magsr_degrade(hr.as_ptr(), 2, 2, 2, 0.0, 0, lr.as_mut_ptr(), 3) };
    assert_eq!(status, MagsrStatus::InvalidArgument);
}

#[test]
fn kernel_weights_sum_to_one() {
    let mut w = vec![0.0; 9];
    assert_eq!(unsafe { magsr_gaussian_kernel(3, 1.0, w.as_mut_ptr(), 9) }, MagsrStatus::Ok);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(unsafe { magsr_gaussian_kernel(4, 1.0, w.as_mut_ptr(), 9) }, MagsrStatus::InvalidArgument);
}

#[test]
fn nll_with_unit_variance_is_half_mse() {
    let f = [1.0, 2.0, 3.0];
    let v = [1.0; 3];
    let y = [2.0, 2.0, 5.0];
    let (mut loss, mut gm, mut gv) = (0.0, [0.0; 3], [0.0; 3]);
    let status = unsafe {
        magsr_heteroskedastic_nll(f.as_ptr(), v.as_ptr(), y.as_ptr(), 3, &mut loss, gm.as_mut_ptr(), gv.as_mut_ptr())
    };
    assert_eq!(status, MagsrStatus::Ok);
    assert!((loss - 0.5 * 5.0 / 3.0).abs() < 1e-12);
    assert!((gm[2] + 2.0 / 3.0).abs() < 1e-12);
    let bad = [0.0; 3];
    let status = unsafe {
        magsr_heteroskedastic_nll(f.as_ptr(), bad.as_ptr(), y.as_ptr(), 3, &mut loss, ptr::null_mut(), ptr::null_mut())
    };
    assert_eq!(status, MagsrStatus::Domain);
}

#[test]
fn decompose_two_samples() {
    let means = [0.0, 2.0];
    let vars = [1.0, 3.0];
    let (mut m, mut e, mut a, mut t) = (0.0, 0.0, 0.0, 0.0);
    let status = unsafe { magsr_decompose(means.as_ptr(), vars.as_ptr(), 2, 1, 1, &mut m, &mut e, &mut a, &mut t) };
    assert_eq!(status, MagsrStatus::Ok);
    assert_eq!((m, e, a, t), (1.0, 1.0, 2.0, 3.0));
    let status = unsafe {
        magsr_decompose(means.as_ptr(), vars.as_ptr(), 0, 1, 1, &mut m, ptr::null_mut(), ptr::null_mut(), ptr::null_mut())
    };
    assert_eq!(status, MagsrStatus::InvalidArgument);
}

#[test]
fn model_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = saved(dir.path(), Heads::MeanAndLogvar);
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { magsr_model_load(cpath(&path).as_ptr(), &mut handle) }, MagsrStatus::Ok);
    let (mut scale, mut has_var) = (0usize, 0 as c_int);
    assert_eq!(unsafe { magsr_model_info(handle, &mut scale, &mut has_var) }, MagsrStatus::Ok);
    assert_eq!((scale, has_var), (2, 1));

    let lr = random_input(4, 4, 300.0, 9);
    let mut mean = vec![0.0; 64];
    let mut var = vec![0.0; 64];
    let status = unsafe {
        magsr_model_forward(handle, lr.as_slice().as_ptr(), 4, 4, 0, 0, mean.as_mut_ptr(), var.as_mut_ptr(), 64)
    };
    assert_eq!(status, MagsrStatus::Ok);
    assert_eq!(mean, model.predict_mean(&lr).unwrap().as_slice());
    assert!(var.iter().all(|&v| v >= 25.0));

    let mut maps = ptr::null_mut();
    assert_eq!(unsafe { magsr_infer(handle, lr.as_slice().as_ptr(), 4, 4, 5, 11, &mut maps) }, MagsrStatus::Ok);
    let (mut h, mut w, mut t) = (0, 0, 0);
    assert_eq!(unsafe { magsr_maps_info(maps, &mut h, &mut w, &mut t) }, MagsrStatus::Ok);
    assert_eq!((h, w, t), (8, 8, 5));
    let expect = decompose(&sample(&model, &lr, 5, 11).unwrap()).unwrap();
    let mut epi = vec![0.0; 64];
    let status = unsafe { magsr_maps_copy(maps, MagsrLayer::Epistemic as c_int, epi.as_mut_ptr(), 64) };
    assert_eq!(status, MagsrStatus::Ok);
    assert_eq!(epi, expect.epistemic.as_slice());
    assert_eq!(unsafe { magsr_maps_copy(maps, 9, epi.as_mut_ptr(), 64) }, MagsrStatus::InvalidArgument);
    unsafe {
        magsr_maps_free(maps);
        magsr_model_free(handle);
        magsr_maps_free(ptr::null_mut());
        magsr_model_free(ptr::null_mut());
    }
}

#[test]
fn mean_only_model_has_no_variance() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved(dir.path(), Heads::MeanOnly);
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { magsr_model_load(cpath(&path).as_ptr(), &mut handle) }, MagsrStatus::Ok);
    let lr = Grid::zeros(4, 4);
    let mut mean = vec![0.0; 64];
    let mut var = vec![0.0; 64];
    let status = unsafe {
        magsr_model_forward(handle, lr.as_slice().as_ptr(), 4, 4, 0, 0, mean.as_mut_ptr(), var.as_mut_ptr(), 64)
    };
    assert_eq!(status, MagsrStatus::State);
    let mut maps = ptr::null_mut();
    assert_eq!(unsafe { magsr_infer(handle, lr.as_slice().as_ptr(), 4, 4, 2, 0, &mut maps) }, MagsrStatus::State);
    assert!(maps.is_null());
    unsafe { magsr_model_free(handle) };
}

#[test]
fn load_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut handle = ptr::null_mut();
    let missing = cpath(&dir.path().join("missing.snap"));
    assert_eq!(unsafe { magsr_model_load(missing.as_ptr(), &mut handle) }, MagsrStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("missing.snap"), "{}", last_error());
    let junk = dir.path().join("junk.snap");
    std::fs::write(&junk, b"not a snapshot").unwrap();
    assert_eq!(unsafe { magsr_model_load(cpath(&junk).as_ptr(), &mut handle) }, MagsrStatus::Io);
    assert_eq!(unsafe { magsr_model_load(ptr::null(), &mut handle) }, MagsrStatus::NullPointer);
}

fn target_dir() -> PathBuf {
    // tests run from <target>/<profile>/deps/
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "magsr.h"

int main(void) {
    double hr[16];
    for (int i = 0; i < 16; i++) hr[i] = 7.0;
    double lr[4];
    if (magsr_degrade(hr, 4, 4, 2, 0.0, 0, lr, 4) != MAGSR_STATUS_OK) return 1;
    for (int i = 0; i < 4; i++) if (lr[i] < 6.999999 || lr[i] > 7.000001) return 2;
    if (magsr_degrade(hr, 3, 3, 2, 0.0, 0, lr, 4) != MAGSR_STATUS_INVALID_ARGUMENT) return 3;
    if (magsr_last_error()[0] == '\0') return 4;
    MagsrModel *model = NULL;
    if (magsr_model_load("/nonexistent/model.snap", &model) != MAGSR_STATUS_IO) return 5;
    if (model != NULL) return 6;
    printf("ok %s\n", magsr_version());
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("magsr.h").is_file(), "header is generated by build.rs");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let Ok(check) = Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg("-I").arg(&include).arg(&src).status() else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    assert!(check.success(), "C program against magsr.h does not compile");

    let lib = target_dir().join("libmagsr_ffi.a");
    if !lib.is_file() {
        eprintln!("{} not built; skipping link step", lib.display());
        return;
    }
    let exe = dir.path().join("smoke");
    let link = Command::new("cc")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(link.success(), "linking against the static library failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C smoke program exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok 0.1.0"));
}
