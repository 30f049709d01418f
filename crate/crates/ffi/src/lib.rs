//! C ABI for the `vgfm` crate.
//!
//! Objects are passed as opaque handles created by `vgfm_*_load`/`_new`
//! functions and released with the matching `_free`. Every fallible call
//! returns a [`VgfmStatus`]; on failure a message is available from
//! [`vgfm_last_error_message`] on the same thread. Arrays are row-major
//! `double` buffers owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ndarray::{Array1, ArrayView1, ArrayView2};
use vgfm::checkpoint::{load_model, save_model};
use vgfm::data::{parse_snapshot_csv, Dataset, Snapshot};
use vgfm::eval::w1_metric;
use vgfm::trainer::{train, Model, TrainConfig};
use vgfm::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VgfmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Shape = 5,
    Numerical = 6,
    NotConverged = 7,
    Checkpoint = 8,
    Panic = 9,
}

impl VgfmStatus {
    fn of(e: &Error) -> Self {
        match e.code() {
            "parse" | "json" => VgfmStatus::Parse,
            "io" => VgfmStatus::Io,
            "dimension" | "shape" => VgfmStatus::Shape,
            "non_finite" | "overflow" | "integration" | "diverged" | "autodiff" | "infeasible" => VgfmStatus::Numerical,
            "not_converged" => VgfmStatus::NotConverged,
            "checkpoint" => VgfmStatus::Checkpoint,
            _ => VgfmStatus::InvalidArgument,
        }
    }
}

/// Snapshot series.
pub struct VgfmDataset(Dataset);

/// Trained velocity and growth networks.
pub struct VgfmModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(VgfmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(VgfmStatus::of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(VgfmStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VgfmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VgfmStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            VgfmStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(VgfmStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn matrix(data: &[f64], n: usize, d: usize) -> Result<ArrayView2<'_, f64>, Fail> {
    ArrayView2::from_shape((n, d), data).map_err(|e| Fail(VgfmStatus::Shape, e.to_string()))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vgfm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Reads a snapshot CSV.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vgfm_dataset_load_csv(path: *const c_char, out: *mut *mut VgfmDataset) -> VgfmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ds = parse_snapshot_csv(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(VgfmDataset(ds)));
        Ok(())
    })
}

/// Builds a dataset with snapshot times `0..num_times` from unit-weight
/// points. `points` holds the snapshots back to back, `counts[t] x dim` each.
///
/// # Safety
/// `counts` must hold `num_times` entries and `points` their sum times `dim`.
#[no_mangle]
pub unsafe extern "C" fn vgfm_dataset_new(
    num_times: usize,
    counts: *const usize,
    dim: usize,
    points: *const f64,
    out: *mut *mut VgfmDataset,
) -> VgfmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if counts.is_null() {
            return Err(null("counts"));
        }
        let counts = std::slice::from_raw_parts(counts, num_times);
        let total: usize = counts.iter().sum();
        let data = slice(points, total * dim, "points")?;
        let mut snaps = Vec::with_capacity(num_times);
        let mut off = 0;
        for (t, &n) in counts.iter().enumerate() {
            let m = matrix(&data[off * dim..(off + n) * dim], n, dim)?;
            snaps.push(Snapshot::new(t, m.to_owned())?);
            off += n;
        }
        *out = Box::into_raw(Box::new(VgfmDataset(Dataset::new(snaps)?)));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn vgfm_dataset_free(ds: *mut VgfmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of snapshots and their dimension.
///
/// # Safety
/// `ds` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn vgfm_dataset_shape(ds: *const VgfmDataset, num_times: *mut usize, dim: *mut usize) -> VgfmStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        *out_ptr(num_times, "num_times")? = ds.0.num_times();
        *out_ptr(dim, "dim")? = ds.0.dim();
        Ok(())
    })
}

/// Number of cells in snapshot `t`.
///
/// # Safety
/// `ds` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vgfm_dataset_count(ds: *const VgfmDataset, t: usize, out: *mut usize) -> VgfmStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let s = ds
            .0
            .snapshots()
            .get(t)
            .ok_or_else(|| Fail(VgfmStatus::InvalidArgument, format!("no snapshot {t}")))?;
        *out_ptr(out, "out")? = s.len();
        Ok(())
    })
}

/// Trains a model. `config_json` may be null (defaults) or a JSON object with
/// training configuration keys; keys it omits keep their defaults.
///
/// # Safety
/// `ds` must be a live handle, `config_json` null or nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vgfm_train(ds: *const VgfmDataset, config_json: *const c_char, out: *mut *mut VgfmModel) -> VgfmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let cfg = if config_json.is_null() {
            TrainConfig::default()
        } else {
            let s = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Fail(VgfmStatus::InvalidArgument, "config is not UTF-8".into()))?;
            TrainConfig::from_json_over(&TrainConfig::default(), s)?.0
        };
        let (model, _) = train(&ds.0, &cfg)?;
        *out = Box::into_raw(Box::new(VgfmModel(model)));
        Ok(())
    })
}

/// Randomly initialized networks for `dim`-dimensional data.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vgfm_model_init(dim: usize, width: usize, depth: usize, seed: u64, out: *mut *mut VgfmModel) -> VgfmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(VgfmModel(Model::init(dim, width, depth, seed)?)));
        Ok(())
    })
}

/// # Safety
/// `path` nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vgfm_model_load(path: *const c_char, out: *mut *mut VgfmModel) -> VgfmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = load_model(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(VgfmModel(m)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle, `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn vgfm_model_save(model: *const VgfmModel, path: *const c_char) -> VgfmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        save_model(&m.0, &path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn vgfm_model_free(model: *mut VgfmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vgfm_model_dim(model: *const VgfmModel, out: *mut usize) -> VgfmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_ptr(out, "out")? = m.0.dim();
        Ok(())
    })
}

/// Velocity at `n` points (`x` is `n x dim`) into `out` (`n x dim`).
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn vgfm_model_velocity(model: *const VgfmModel, x: *const f64, n: usize, t: f64, out: *mut f64) -> VgfmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = m.0.dim();
        let x = matrix(slice(x, n * d, "x")?, n, d)?;
        let v = m.0.velocity(x, t)?;
        slice_mut(out, n * d, "out")?.copy_from_slice(v.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Growth rate at `n` points into `out` (`n`).
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn vgfm_model_growth(model: *const VgfmModel, x: *const f64, n: usize, t: f64, out: *mut f64) -> VgfmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = m.0.dim();
        let x = matrix(slice(x, n * d, "x")?, n, d)?;
        let g = m.0.growth(x, t)?;
        slice_mut(out, n, "out")?.copy_from_slice(g.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// Integrates `n` particles from `t0` to `t1`; writes final positions
/// (`n x dim`) and log-weights (`n`, starting from 0).
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn vgfm_model_simulate(
    model: *const VgfmModel,
    x: *const f64,
    n: usize,
    t0: f64,
    t1: f64,
    steps_per_unit: usize,
    out_x: *mut f64,
    out_log_w: *mut f64,
) -> VgfmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = m.0.dim();
        let x = matrix(slice(x, n * d, "x")?, n, d)?;
        let (xf, lw) = m.0.simulate_final(x, t0, t1, steps_per_unit)?;
        slice_mut(out_x, n * d, "out_x")?.copy_from_slice(xf.as_slice().expect("standard layout"));
        slice_mut(out_log_w, n, "out_log_w")?.copy_from_slice(lw.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// Exact W1 with Euclidean cost between `a` (`na x dim`, weights `wa`, null
/// for uniform) and `b` (`nb x dim`, uniform). Weights are normalized.
///
/// # Safety
/// Buffers must hold the stated number of doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vgfm_w1(
    a: *const f64,
    na: usize,
    wa: *const f64,
    b: *const f64,
    nb: usize,
    dim: usize,
    out: *mut f64,
) -> VgfmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let pa = matrix(slice(a, na * dim, "a")?, na, dim)?;
        let pb = matrix(slice(b, nb * dim, "b")?, nb, dim)?;
        let w = if wa.is_null() { None } else { Some(ArrayView1::from(slice(wa, na, "wa")?)) };
        let obs = Snapshot::with_weights(0, pb.to_owned(), Array1::ones(nb))?;
        *out = w1_metric(pa, w, &obs)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(VgfmStatus::of(&Error::Checkpoint("x".into())), VgfmStatus::Checkpoint);
        assert_eq!(VgfmStatus::of(&Error::IntegrationBlowup { step: 3 }), VgfmStatus::Numerical);
        assert_eq!(VgfmStatus::of(&Error::InvalidArgument("x".into())), VgfmStatus::InvalidArgument);
    }

    #[test]
    fn panics_become_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, VgfmStatus::Panic);
        let msg = unsafe { CStr::from_ptr(vgfm_last_error_message()) }.to_str().unwrap();
        assert!(msg.contains("boom"));
    }
}
