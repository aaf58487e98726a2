use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use dpose::geometry::Structure;
use dpose::model::{init_params, predict, Hyper};
use dpose_ffi::*;

const SMALL: &str = "embed_dim=8\nreadout_dim=6\nn_interactions=2\nn_heads=5\nn_rbf=12\n";

fn last_error() -> String {
    unsafe { CStr::from_ptr(dpose_last_error()) }.to_string_lossy().into_owned()
}

fn small_model(seed: u64) -> *mut DposeModel {
    let kv = CString::new(SMALL).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dpose_model_init(kv.as_ptr(), seed, &mut model) }, DposeStatus::Ok);
    model
}

fn water() -> (Vec<u32>, Vec<f64>) {
    (vec![8, 1, 1], vec![0.0, 0.0, 0.0, 0.96, 0.0, 0.0, -0.24, 0.93, 0.0])
}

#[test]
fn predict_matches_library() {
    let model = small_model(3);
    let (species, pos) = water();
    let mut s = ptr::null_mut();
    let status = unsafe { dpose_structure_new(species.as_ptr(), pos.as_ptr(), 3, ptr::null(), ptr::null(), &mut s) };
    assert_eq!(status, DposeStatus::Ok);

    let mut pred = DposePrediction::default();
    let mut heads = vec![0.0; 5];
    let status = unsafe { dpose_predict(model, s, &mut pred, heads.as_mut_ptr(), heads.len()) };
    assert_eq!(status, DposeStatus::Ok);
    assert_eq!(last_error(), "");

    let hyper = Hyper { embed_dim: 8, readout_dim: 6, n_interactions: 2, n_heads: 5, n_rbf: 12, ..Hyper::default() };
    let params = init_params(&hyper, 3).unwrap();
    let positions = pos.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let want = predict(&params, &Structure::molecule(species, positions).unwrap()).unwrap();
    assert_eq!(pred.mean, want.mean);
    assert_eq!(pred.variance, want.variance);
    assert_eq!(pred.sigma_per_atom, want.sigma_per_atom);
    assert_eq!((pred.n_atoms, pred.n_heads), (3, 5));
    assert_eq!(heads, want.head_energies);
    assert_eq!(unsafe { dpose_model_n_heads(model) }, 5);

    let mut short = vec![0.0; 2];
    let status = unsafe { dpose_predict(model, s, &mut pred, short.as_mut_ptr(), short.len()) };
    assert_eq!(status, DposeStatus::BufferTooSmall);
    assert!(last_error().contains("need 5"));
    assert_eq!(unsafe { dpose_predict(model, s, &mut pred, ptr::null_mut(), 0) }, DposeStatus::Ok);

    unsafe {
        dpose_structure_free(s);
        dpose_model_free(model);
    }
}

#[test]
fn save_and_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let model = small_model(4);
    assert_eq!(unsafe { dpose_model_save(model, path.as_ptr()) }, DposeStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { dpose_model_load(path.as_ptr(), &mut loaded) }, DposeStatus::Ok);

    let (species, pos) = water();
    let mut s = ptr::null_mut();
    unsafe { dpose_structure_new(species.as_ptr(), pos.as_ptr(), 3, ptr::null(), ptr::null(), &mut s) };
    let (mut a, mut b) = (DposePrediction::default(), DposePrediction::default());
    unsafe {
        dpose_predict(model, s, &mut a, ptr::null_mut(), 0);
        dpose_predict(loaded, s, &mut b, ptr::null_mut(), 0);
    }
    assert_eq!(a, b);

    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { dpose_model_load(missing.as_ptr(), &mut m2) }, DposeStatus::Io);
    assert!(m2.is_null());
    std::fs::write(dir.path().join("bad.ckpt"), "dpose-checkpoint\n").unwrap();
    let bad = CString::new(dir.path().join("bad.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dpose_model_load(bad.as_ptr(), &mut m2) }, DposeStatus::Data);
    assert!(last_error().contains("digest"));
    unsafe {
        dpose_structure_free(s);
        dpose_model_free(model);
        dpose_model_free(loaded);
    }
}

#[test]
fn errors_and_null_handling() {
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dpose_model_init(ptr::null(), 0, ptr::null_mut()) }, DposeStatus::NullPointer);
    let bad = CString::new("n_heads=1").unwrap();
    assert_eq!(unsafe { dpose_model_init(bad.as_ptr(), 0, &mut model) }, DposeStatus::InvalidArgument);
    let unknown = CString::new("colour=blue").unwrap();
    assert_eq!(unsafe { dpose_model_init(unknown.as_ptr(), 0, &mut model) }, DposeStatus::InvalidArgument);
    assert!(last_error().contains("colour"));

    let mut pred = DposePrediction::default();
    assert_eq!(unsafe { dpose_predict(ptr::null(), ptr::null(), &mut pred, ptr::null_mut(), 0) }, DposeStatus::NullPointer);
    assert_eq!(unsafe { dpose_model_n_heads(ptr::null()) }, 0);
    unsafe {
        dpose_model_free(ptr::null_mut());
        dpose_structure_free(ptr::null_mut());
    }

    // Species beyond the embedding table.
    let model = small_model(5);
    let species = [150u32, 1];
    let pos = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    let mut s = ptr::null_mut();
    unsafe { dpose_structure_new(species.as_ptr(), pos.as_ptr(), 2, ptr::null(), ptr::null(), &mut s) };
    assert_eq!(unsafe { dpose_predict(model, s, &mut pred, ptr::null_mut(), 0) }, DposeStatus::Model);

    // A 4 Å cube is too small for the 5 Å cutoff.
    let cell = [4.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 4.0];
    let species = [1u32, 1];
    let mut p = ptr::null_mut();
    unsafe { dpose_structure_new(species.as_ptr(), pos.as_ptr(), 2, cell.as_ptr(), ptr::null(), &mut p) };
    assert_eq!(unsafe { dpose_predict(model, p, &mut pred, ptr::null_mut(), 0) }, DposeStatus::Geometry);

    let nan = [f64::NAN, 0.0, 0.0];
    let mut q = ptr::null_mut();
    let status = unsafe { dpose_structure_new(species.as_ptr(), nan.as_ptr(), 1, ptr::null(), ptr::null(), &mut q) };
    assert_eq!(status, DposeStatus::Geometry);
    unsafe {
        dpose_structure_free(s);
        dpose_structure_free(p);
        dpose_model_free(model);
    }
}

#[test]
fn nll_and_version() {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((dpose_nll_loss(0.0, 1.0, 1e-8) - half_ln_2pi).abs() < 1e-12);
    assert!(dpose_nll_loss(0.0, 0.0, 1e-8).is_finite());
    let v = unsafe { CStr::from_ptr(dpose_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dpose.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "dpose_model_load",
        "dpose_model_init",
        "dpose_model_free",
        "dpose_structure_new",
        "dpose_predict",
        "dpose_nll_loss",
        "dpose_last_error",
        "DPOSE_STATUS_OK",
        "typedef struct DposeModel DposeModel",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", "-std=c11"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
