//! C ABI for loading models and predicting energies with uncertainty.
//!
//! Handles are opaque and owned by the caller; free them with the matching
//! `*_free` function. Every fallible call returns a [`DposeStatus`]; on
//! failure [`dpose_last_error`] holds a message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dpose::data::{self, DataError};
use dpose::geometry::{GeometryError, Structure};
use dpose::model::{self, Hyper, ModelError, ModelParams};
use dpose::training::{self, TrainConfig};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DposeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Geometry = 5,
    Model = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct DposeModel {
    params: ModelParams,
}

/// Opaque structure handle.
pub struct DposeStructure {
    structure: Structure,
}

/// Ensemble summary filled by [`dpose_predict`].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DposePrediction {
    /// eV
    pub mean: f64,
    /// eV²
    pub variance: f64,
    /// eV
    pub sigma: f64,
    /// eV/atom
    pub sigma_per_atom: f64,
    pub n_atoms: usize,
    pub n_heads: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(DposeStatus, String);

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let status = match e {
            DataError::Io(_) => DposeStatus::Io,
            DataError::Geometry(_) => DposeStatus::Geometry,
            _ => DposeStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

impl From<GeometryError> for Failure {
    fn from(e: GeometryError) -> Self {
        Failure(DposeStatus::Geometry, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::Geometry(_) => DposeStatus::Geometry,
            ModelError::InvalidHyper(_) => DposeStatus::InvalidArgument,
            _ => DposeStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(DposeStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(DposeStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DposeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DposeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DposeStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpose_model_load(path: *const c_char, out: *mut *mut DposeModel) -> DposeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let ckpt = data::load_checkpoint(Path::new(path))?;
        store(out, DposeModel { params: ckpt.params });
        Ok(())
    })
}

/// Creates a freshly initialized model. `hyper_kv` may be null (defaults)
/// or hold `key=value` lines overriding the architecture.
///
/// # Safety
/// `hyper_kv` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpose_model_init(hyper_kv: *const c_char, seed: u64, out: *mut *mut DposeModel) -> DposeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut hyper = Hyper::default();
        if !hyper_kv.is_null() {
            for line in str_arg(hyper_kv, "hyper_kv")?.lines().map(str::trim).filter(|l| !l.is_empty()) {
                let (k, v) = line.split_once('=').ok_or_else(|| invalid(format!("expected key=value, got '{line}'")))?;
                if !hyper.set_kv(k.trim(), v).map_err(invalid)? {
                    return Err(invalid(format!("unknown hyperparameter '{}'", k.trim())));
                }
            }
        }
        let params = model::init_params(&hyper, seed)?;
        store(out, DposeModel { params });
        Ok(())
    })
}

/// Writes the model to a checkpoint file with default training settings.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dpose_model_save(model: *const DposeModel, path: *const c_char) -> DposeStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let path = str_arg(path, "path")?;
        data::save_checkpoint(Path::new(path), &model.params, &TrainConfig::default(), &[])?;
        Ok(())
    })
}

/// Number of ensemble heads, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dpose_model_n_heads(model: *const DposeModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.hyper.n_heads)
}

/// # Safety
/// `model` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dpose_model_free(model: *mut DposeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Builds a structure. `positions` holds `3·n_atoms` Cartesian coordinates
/// (Å). `cell` is null for a molecule or 9 values (lattice vectors as rows);
/// `pbc` is null (all periodic when a cell is given) or 3 flags.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpose_structure_new(
    species: *const u32,
    positions: *const f64,
    n_atoms: usize,
    cell: *const f64,
    pbc: *const bool,
    out: *mut *mut DposeStructure,
) -> DposeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if species.is_null() || positions.is_null() {
            return Err(null("species or positions"));
        }
        if n_atoms == 0 {
            return Err(invalid("structure needs at least one atom"));
        }
        let species = std::slice::from_raw_parts(species, n_atoms).to_vec();
        let flat = std::slice::from_raw_parts(positions, 3 * n_atoms);
        let positions = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let cell = (!cell.is_null()).then(|| {
            let c = std::slice::from_raw_parts(cell, 9);
            [[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]]
        });
        let periodic = if pbc.is_null() {
            [cell.is_some(); 3]
        } else {
            let p = std::slice::from_raw_parts(pbc, 3);
            [p[0], p[1], p[2]]
        };
        let structure = Structure::new(species, positions, cell, periodic)?;
        store(out, DposeStructure { structure });
        Ok(())
    })
}

/// # Safety
/// `structure` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dpose_structure_free(structure: *mut DposeStructure) {
    if !structure.is_null() {
        drop(Box::from_raw(structure));
    }
}

/// Predicts the ensemble energy. When `head_energies` is non-null it must
/// hold at least `head_capacity` doubles and receives one energy per head;
/// a smaller capacity returns `BufferTooSmall` with `out` still filled.
///
/// # Safety
/// Handles must come from this library; `out` must be writable;
/// `head_energies` must be null or hold `head_capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn dpose_predict(
    model: *const DposeModel,
    structure: *const DposeStructure,
    out: *mut DposePrediction,
    head_energies: *mut f64,
    head_capacity: usize,
) -> DposeStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let structure = structure.as_ref().ok_or_else(|| null("structure"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let pred = model::predict(&model.params, &structure.structure)?;
        *out = DposePrediction {
            mean: pred.mean,
            variance: pred.variance,
            sigma: pred.sigma(),
            sigma_per_atom: pred.sigma_per_atom,
            n_atoms: pred.n_atoms,
            n_heads: pred.head_energies.len(),
        };
        if !head_energies.is_null() {
            let m = pred.head_energies.len();
            if head_capacity < m {
                return Err(Failure(
                    DposeStatus::BufferTooSmall,
                    format!("head buffer holds {head_capacity} values, need {m}"),
                ));
            }
            ptr::copy_nonoverlapping(pred.head_energies.as_ptr(), head_energies, m);
        }
        Ok(())
    })
}

/// Gaussian negative log-likelihood `½[Δy²/σ² + ln(2πσ²)]`, `σ² = max(variance, floor)`.
#[no_mangle]
pub extern "C" fn dpose_nll_loss(delta_y: f64, variance: f64, floor: f64) -> f64 {
    training::nll_loss(delta_y, variance, floor)
}

/// Message of the last failed call on this thread ("" after a success).
/// Valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn dpose_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dpose_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
