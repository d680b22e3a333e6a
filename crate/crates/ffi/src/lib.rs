//! C ABI for `magsr`.
//!
//! Every function returns a [`MagsrStatus`]. On failure the message is
//! available from [`magsr_last_error`] on the same thread. Arrays are
//! row-major `double` buffers owned by the caller; their lengths are passed
//! explicitly and checked. Models and uncertainty maps are opaque handles
//! released with their `_free` functions.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use magsr::degrade::{default_size, degrade, DegradeConfig, GaussianKernel};
use magsr::inference::{decompose, sample, SampleSet, UncertaintyMaps};
use magsr::loss::{heteroskedastic_nll, heteroskedastic_nll_gradients};
use magsr::model::snapshot::load_snapshot;
use magsr::model::{predicted_variance, Model};
use magsr::{Error, Grid};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MagsrStatus {
    Ok = 0,
    InvalidArgument = 1,
    /// Unreadable, truncated or corrupt file.
    Io = 2,
    /// Well-formed input with the wrong schema or version.
    Schema = 3,
    /// Operation not valid for this object, e.g. variance from a mean-only model.
    State = 4,
    /// Numerical domain error, e.g. a non-positive variance.
    Domain = 5,
    NullPointer = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// Layers of an uncertainty-map handle.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MagsrLayer {
    Mean = 0,
    Epistemic = 1,
    Aleatoric = 2,
    Total = 3,
}

/// A trained network loaded from a weight snapshot.
pub struct MagsrModel {
    model: Model,
}

/// Predictive mean and variance maps from MC-dropout inference.
pub struct MagsrMaps {
    maps: UncertaintyMaps,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(MagsrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) => MagsrStatus::InvalidArgument,
            Error::Io { .. } | Error::Corrupt(_) => MagsrStatus::Io,
            Error::Schema(_) => MagsrStatus::Schema,
            Error::State(_) => MagsrStatus::State,
            Error::Domain(_) => MagsrStatus::Domain,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MagsrStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MagsrStatus::InvalidArgument, msg.into())
}

/// Runs `body`, recording any error or panic for `magsr_last_error`.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> MagsrStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            MagsrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal error: {msg}"));
            MagsrStatus::Panic
        }
    }
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn area(height: usize, width: usize) -> Result<usize, Failure> {
    height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("invalid grid shape {height}x{width}")))
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), Failure> {
    if got == want {
        Ok(())
    } else {
        Err(invalid(format!("{what} has length {got}, expected {want}")))
    }
}

unsafe fn grid(p: *const f64, height: usize, width: usize, what: &str) -> Result<Grid, Failure> {
    let n = area(height, width)?;
    Ok(Grid::from_vec(height, width, input(p, n, what)?.to_vec())?)
}

/// Message for the last failing call on this thread; empty after a success.
/// The pointer stays valid until the next `magsr_*` call on this thread.
#[no_mangle]
pub extern "C" fn magsr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn magsr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Normalized `size`×`size` Gaussian weights into `out` (length `size²`).
///
/// # Safety
/// `out` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn magsr_gaussian_kernel(size: usize, sigma: f64, out: *mut f64, out_len: usize) -> MagsrStatus {
    guard(|| {
        let kernel = GaussianKernel::new(size, sigma)?;
        check_len("out", out_len, kernel.weights().len())?;
        output(out, out_len, "out")?.copy_from_slice(kernel.weights());
        Ok(())
    })
}

/// Gaussian smoothing then block averaging of an HR grid.
///
/// `sigma <= 0` selects `scale_factor / 2`; `kernel_size == 0` selects
/// `2·ceil(2·sigma) + 1`. `lr_len` must equal
/// `(height / scale_factor) · (width / scale_factor)`.
///
/// # Safety
/// `hr` must point to `height·width` readable doubles and `lr` to `lr_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn magsr_degrade(
    hr: *const f64,
    height: usize,
    width: usize,
    scale_factor: usize,
    sigma: f64,
    kernel_size: usize,
    lr: *mut f64,
    lr_len: usize,
) -> MagsrStatus {
    guard(|| {
        let image = grid(hr, height, width, "hr")?;
        let sigma = if sigma > 0.0 { sigma } else { scale_factor as f64 / 2.0 };
        let size = if kernel_size == 0 { default_size(sigma) } else { kernel_size };
        let config = DegradeConfig::new(scale_factor, GaussianKernel::new(size, sigma)?)?;
        let out = degrade(&image, &config)?;
        check_len("lr", lr_len, out.len())?;
        output(lr, lr_len, "lr")?.copy_from_slice(out.as_slice());
        Ok(())
    })
}

/// Heteroskedastic Gaussian NLL averaged over `n` pixels, and optionally
/// its gradients with respect to `mean` and `variance`.
///
/// # Safety
/// The three inputs must each point to `n` readable doubles; `loss` must
/// be writable; `grad_mean` and `grad_variance` may be null, otherwise
/// they must point to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn magsr_heteroskedastic_nll(
    mean: *const f64,
    variance: *const f64,
    target: *const f64,
    n: usize,
    loss: *mut f64,
    grad_mean: *mut f64,
    grad_variance: *mut f64,
) -> MagsrStatus {
    guard(|| {
        if loss.is_null() {
            return Err(null("loss"));
        }
        let f = [grid(mean, 1, n, "mean")?];
        let v = [grid(variance, 1, n, "variance")?];
        let y = [grid(target, 1, n, "target")?];
        let value = heteroskedastic_nll(&f, &v, &y)?;
        if !grad_mean.is_null() || !grad_variance.is_null() {
            let (gm, gv) = heteroskedastic_nll_gradients(&f, &v, &y)?;
            if !grad_mean.is_null() {
                output(grad_mean, n, "grad_mean")?.copy_from_slice(gm[0].as_slice());
            }
            if !grad_variance.is_null() {
                output(grad_variance, n, "grad_variance")?.copy_from_slice(gv[0].as_slice());
            }
        }
        *loss = value.total;
        Ok(())
    })
}

fn copy_layers(maps: &UncertaintyMaps, outs: [(*mut f64, &str); 4]) -> Result<(), Failure> {
    let layers = [&maps.predictive_mean, &maps.epistemic, &maps.aleatoric, &maps.total];
    for (grid, (ptr, what)) in layers.into_iter().zip(outs) {
        if !ptr.is_null() {
            unsafe { output(ptr, grid.len(), what)? }.copy_from_slice(grid.as_slice());
        }
    }
    Ok(())
}

/// Splits `samples` (mean, variance) pairs into predictive mean, epistemic,
/// aleatoric and total variance.
///
/// `means` and `variances` hold the samples back to back, each
/// `height·width` long. Any of the four outputs may be null.
///
/// # Safety
/// `means` and `variances` must point to `samples·height·width` readable
/// doubles; non-null outputs must point to `height·width` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn magsr_decompose(
    means: *const f64,
    variances: *const f64,
    samples: usize,
    height: usize,
    width: usize,
    mean_out: *mut f64,
    epistemic_out: *mut f64,
    aleatoric_out: *mut f64,
    total_out: *mut f64,
) -> MagsrStatus {
    guard(|| {
        let n = area(height, width)?;
        if samples == 0 {
            return Err(invalid("samples must be positive"));
        }
        let total = n.checked_mul(samples).ok_or_else(|| invalid("sample buffer too large"))?;
        let m = input(means, total, "means")?;
        let v = input(variances, total, "variances")?;
        let split = |all: &[f64]| -> Result<Vec<Grid>, Failure> {
            all.chunks_exact(n)
                .map(|c| Grid::from_vec(height, width, c.to_vec()).map_err(Failure::from))
                .collect()
        };
        let set = SampleSet::new(split(m)?, split(v)?, (0..samples as u64).collect())?;
        let maps = decompose(&set)?;
        copy_layers(
            &maps,
            [
                (mean_out, "mean_out"),
                (epistemic_out, "epistemic_out"),
                (aleatoric_out, "aleatoric_out"),
                (total_out, "total_out"),
            ],
        )
    })
}

/// Loads a weight snapshot into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn magsr_model_load(path: *const c_char, out: *mut *mut MagsrModel) -> MagsrStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let model = load_snapshot(path)?;
        *out = Box::into_raw(Box::new(MagsrModel { model }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from `magsr_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn magsr_model_free(model: *mut MagsrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_ref<'a>(model: *const MagsrModel) -> Result<&'a Model, Failure> {
    model.as_ref().map(|m| &m.model).ok_or_else(|| null("model"))
}

/// Per-axis upscale factor and whether the model predicts a variance.
///
/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn magsr_model_info(
    model: *const MagsrModel,
    scale_factor: *mut usize,
    has_variance: *mut c_int,
) -> MagsrStatus {
    guard(|| {
        let m = model_ref(model)?;
        if scale_factor.is_null() || has_variance.is_null() {
            return Err(null("output"));
        }
        *scale_factor = m.config().scale_factor;
        *has_variance = c_int::from(m.config().has_logvar());
        Ok(())
    })
}

/// One forward pass. `stochastic != 0` samples dropout masks from `seed`.
///
/// Outputs are `(height·s)·(width·s)` long; `variance_out` may be null and
/// must be null for a mean-only model.
///
/// # Safety
/// `model` must be a live handle, `lr` must point to `height·width`
/// readable doubles, and non-null outputs to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn magsr_model_forward(
    model: *const MagsrModel,
    lr: *const f64,
    height: usize,
    width: usize,
    stochastic: c_int,
    seed: u64,
    mean_out: *mut f64,
    variance_out: *mut f64,
    out_len: usize,
) -> MagsrStatus {
    guard(|| {
        let m = model_ref(model)?;
        let input = grid(lr, height, width, "lr")?;
        let result = m.forward(&input, stochastic != 0, seed)?;
        check_len("output", out_len, result.mean.len())?;
        output(mean_out, out_len, "mean_out")?.copy_from_slice(result.mean.as_slice());
        if !variance_out.is_null() {
            let var = predicted_variance(&result, m.config())?;
            output(variance_out, out_len, "variance_out")?.copy_from_slice(var.as_slice());
        }
        Ok(())
    })
}

/// `samples` MC-dropout passes decomposed into uncertainty maps.
///
/// # Safety
/// `model` must be a live handle, `lr` must point to `height·width`
/// readable doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn magsr_infer(
    model: *const MagsrModel,
    lr: *const f64,
    height: usize,
    width: usize,
    samples: usize,
    base_seed: u64,
    out: *mut *mut MagsrMaps,
) -> MagsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m = model_ref(model)?;
        let input = grid(lr, height, width, "lr")?;
        let maps = decompose(&sample(m, &input, samples, base_seed)?)?;
        *out = Box::into_raw(Box::new(MagsrMaps { maps }));
        Ok(())
    })
}

/// Shape of the maps and the number of samples behind them.
///
/// # Safety
/// `maps` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn magsr_maps_info(
    maps: *const MagsrMaps,
    height: *mut usize,
    width: *mut usize,
    samples: *mut usize,
) -> MagsrStatus {
    guard(|| {
        let maps = &maps.as_ref().ok_or_else(|| null("maps"))?.maps;
        if height.is_null() || width.is_null() || samples.is_null() {
            return Err(null("output"));
        }
        (*height, *width) = maps.predictive_mean.shape();
        *samples = maps.samples;
        Ok(())
    })
}

/// Copies one layer (a [`MagsrLayer`] value) into `out`, which must hold
/// `height·width` doubles.
///
/// # Safety
/// `maps` must be a live handle and `out` must point to `out_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn magsr_maps_copy(
    maps: *const MagsrMaps,
    layer: c_int,
    out: *mut f64,
    out_len: usize,
) -> MagsrStatus {
    guard(|| {
        let maps = &maps.as_ref().ok_or_else(|| null("maps"))?.maps;
        let grid = match layer {
            l if l == MagsrLayer::Mean as c_int => &maps.predictive_mean,
            l if l == MagsrLayer::Epistemic as c_int => &maps.epistemic,
            l if l == MagsrLayer::Aleatoric as c_int => &maps.aleatoric,
            l if l == MagsrLayer::Total as c_int => &maps.total,
            other => return Err(invalid(format!("unknown layer {other}"))),
        };
        check_len("out", out_len, grid.len())?;
        output(out, out_len, "out")?.copy_from_slice(grid.as_slice());
        Ok(())
    })
}

/// Releases a maps handle. Null is ignored.
///
/// # Safety
/// `maps` must come from `magsr_infer` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn magsr_maps_free(maps: *mut MagsrMaps) {
    if !maps.is_null() {
        drop(Box::from_raw(maps));
    }
}
