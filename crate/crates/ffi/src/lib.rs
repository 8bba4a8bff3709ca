//! C ABI over the orthocl primitives.
//!
//! Every fallible call returns an [`OclStatus`]. On failure a message is kept
//! per thread and can be copied out with [`ocl_last_error_message`]. Handles
//! are opaque; each `*_new`/`*_load` pairs with a `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::{ArrayView1, ArrayView2};
use orthocl::backbone::MlpBackbone;
use orthocl::ebv::{self, BasisVectorSet, ClassRegistry};
use orthocl::projector::{AlphaSchedule, ProjectorState};
use orthocl::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Parameter = 3,
    Numerical = 4,
    Infeasible = 5,
    AlreadyBound = 6,
    Capacity = 7,
    Unbound = 8,
    Format = 9,
    Consistency = 10,
    State = 11,
    Io = 12,
    Other = 13,
    Panic = 14,
}

impl From<&Error> for OclStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) => OclStatus::InvalidInput,
            Error::Parameter(_) => OclStatus::Parameter,
            Error::Numerical { .. } => OclStatus::Numerical,
            Error::Infeasible { .. } => OclStatus::Infeasible,
            Error::AlreadyBound(_) => OclStatus::AlreadyBound,
            Error::Capacity { .. } => OclStatus::Capacity,
            Error::Unbound(_) => OclStatus::Unbound,
            Error::Format { .. } => OclStatus::Format,
            Error::Consistency(_) => OclStatus::Consistency,
            Error::State(_) | Error::Sealed { .. } => OclStatus::State,
            Error::Io { .. } => OclStatus::Io,
            _ => OclStatus::Other,
        }
    }
}

/// Opaque orthogonal projector.
pub struct OclProjector(ProjectorState);

/// Opaque equiangular basis with its class registry.
pub struct OclBasis {
    set: BasisVectorSet,
    registry: ClassRegistry,
}

/// Opaque backbone restored from a checkpoint.
pub struct OclModel(MlpBackbone);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: String) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message);
}

fn fail(status: OclStatus, message: impl Into<String>) -> OclStatus {
    set_error(message.into());
    status
}

fn guard(body: impl FnOnce() -> Result<(), OclStatus>) -> OclStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => OclStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(OclStatus::Panic, "panic inside orthocl"),
    }
}

fn lift<T>(r: orthocl::Result<T>) -> Result<T, OclStatus> {
    r.map_err(|e| fail(OclStatus::from(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), OclStatus> {
    if p.is_null() {
        Err(fail(OclStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, OclStatus> {
    non_null(p, "path")?;
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(OclStatus::InvalidInput, "path is not valid UTF-8"))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], OclStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], OclStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn matrix<'a>(data: &'a [f64], rows: usize, cols: usize) -> Result<ArrayView2<'a, f64>, OclStatus> {
    ArrayView2::from_shape((rows, cols), data).map_err(|e| fail(OclStatus::Parameter, e.to_string()))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length in bytes
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ocl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        if !buf.is_null() && len > 0 {
            let n = message.len().min(len - 1);
            ptr::copy_nonoverlapping(message.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        message.len()
    })
}

/// Creates a `dim`×`dim` projector initialised to the identity. Setting
/// `constant_alpha` disables the adaptive α schedule.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn ocl_projector_new(
    dim: usize,
    alpha0: f64,
    constant_alpha: bool,
    out: *mut *mut OclProjector,
) -> OclStatus {
    guard(|| {
        non_null(out, "out")?;
        let schedule = if constant_alpha { AlphaSchedule::Constant } else { AlphaSchedule::default() };
        let state = lift(ProjectorState::new(dim, alpha0, schedule))?;
        *out = Box::into_raw(Box::new(OclProjector(state)));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from [`ocl_projector_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ocl_projector_free(p: *mut OclProjector) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// # Safety
/// `p` must be a live projector handle.
#[no_mangle]
pub unsafe extern "C" fn ocl_projector_dim(p: *const OclProjector) -> usize {
    if p.is_null() {
        0
    } else {
        (*p).0.dim()
    }
}

/// Current α of the schedule.
///
/// # Safety
/// `p` must be a live projector handle.
#[no_mangle]
pub unsafe extern "C" fn ocl_projector_alpha(p: *const OclProjector) -> f64 {
    if p.is_null() {
        f64::NAN
    } else {
        (*p).0.alpha()
    }
}

/// Folds one activation vector `z` of length `len` into the projector.
///
/// # Safety
/// `p` must be a live handle and `z` valid for `len` reads.
#[no_mangle]
pub unsafe extern "C" fn ocl_projector_update(p: *mut OclProjector, z: *const f64, len: usize) -> OclStatus {
    guard(|| {
        non_null(p, "projector")?;
        let z = slice_arg(z, len, "z")?;
        lift((*p).0.update(ArrayView1::from(z)))
    })
}

/// Writes `P · grad` for a row-major `rows`×`cols` gradient into `out`
/// (same shape).
///
/// # Safety
/// `grad` and `out` must each be valid for `rows * cols` elements.
#[no_mangle]
pub unsafe extern "C" fn ocl_projector_apply(
    p: *const OclProjector,
    grad: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> OclStatus {
    guard(|| {
        non_null(p, "projector")?;
        let len = rows.checked_mul(cols).ok_or_else(|| fail(OclStatus::Parameter, "shape overflows"))?;
        let grad = matrix(slice_arg(grad, len, "grad")?, rows, cols)?;
        let projected = lift((*p).0.apply(grad))?;
        let dst = out_slice(out, len, "out")?;
        dst.iter_mut().zip(projected.iter()).for_each(|(d, s)| *d = *s);
        Ok(())
    })
}

/// Copies the row-major projector matrix into `out` (`len` must be dim²).
///
/// # Safety
/// `out` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ocl_projector_matrix(p: *const OclProjector, out: *mut f64, len: usize) -> OclStatus {
    guard(|| {
        non_null(p, "projector")?;
        let m = (*p).0.matrix();
        if len != m.len() {
            return Err(fail(OclStatus::Parameter, format!("buffer holds {len} values, matrix has {}", m.len())));
        }
        let dst = out_slice(out, len, "out")?;
        dst.iter_mut().zip(m.iter()).for_each(|(d, s)| *d = *s);
        Ok(())
    })
}

/// Number of eigenvalues of P above `threshold`.
///
/// # Safety
/// `p` must be a live handle and `rank` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ocl_projector_rank(p: *const OclProjector, threshold: f64, rank: *mut usize) -> OclStatus {
    guard(|| {
        non_null(p, "projector")?;
        non_null(rank, "rank")?;
        *rank = lift((*p).0.numerical_rank(threshold))?;
        Ok(())
    })
}

/// Marks a task boundary (restarts the adaptive α).
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ocl_projector_begin_task(p: *mut OclProjector) -> OclStatus {
    guard(|| {
        non_null(p, "projector")?;
        (*p).0.begin_task();
        Ok(())
    })
}

/// Records the completed fraction of the current task.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ocl_projector_set_task_progress(p: *mut OclProjector, fraction: f64) -> OclStatus {
    guard(|| {
        non_null(p, "projector")?;
        (*p).0.set_task_progress(fraction);
        Ok(())
    })
}

fn wrap_basis(set: BasisVectorSet) -> *mut OclBasis {
    let registry = ClassRegistry::new(set.capacity());
    Box::into_raw(Box::new(OclBasis { set, registry }))
}

/// Generates `capacity` unit vectors in `dim` dimensions with pairwise
/// |cos| ≤ `gamma`.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn ocl_basis_generate(
    dim: usize,
    capacity: usize,
    gamma: f64,
    seed: u64,
    out: *mut *mut OclBasis,
) -> OclStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = wrap_basis(lift(ebv::generate_basis(dim, capacity, gamma, seed))?);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ocl_basis_load(path: *const c_char, out: *mut *mut OclBasis) -> OclStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = path_arg(path)?;
        *out = wrap_basis(lift(BasisVectorSet::load(&path))?);
        Ok(())
    })
}

/// # Safety
/// `b` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ocl_basis_save(b: *const OclBasis, path: *const c_char) -> OclStatus {
    guard(|| {
        non_null(b, "basis")?;
        let path = path_arg(path)?;
        lift((*b).set.save(&path))
    })
}

/// # Safety
/// `b` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ocl_basis_free(b: *mut OclBasis) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// # Safety
/// `b` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ocl_basis_dim(b: *const OclBasis) -> usize {
    if b.is_null() {
        0
    } else {
        (*b).set.dim()
    }
}

/// # Safety
/// `b` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ocl_basis_capacity(b: *const OclBasis) -> usize {
    if b.is_null() {
        0
    } else {
        (*b).set.capacity()
    }
}

/// Largest pairwise |cos| over the whole basis.
///
/// # Safety
/// `b` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ocl_basis_max_abs_cosine(b: *const OclBasis) -> f64 {
    if b.is_null() {
        f64::NAN
    } else {
        (*b).set.max_abs_cosine().0
    }
}

/// Copies the row-major dim×capacity matrix (one unit vector per column)
/// into `out`.
///
/// # Safety
/// `out` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ocl_basis_vectors(b: *const OclBasis, out: *mut f64, len: usize) -> OclStatus {
    guard(|| {
        non_null(b, "basis")?;
        let v = (*b).set.vectors();
        if len != v.len() {
            return Err(fail(OclStatus::Parameter, format!("buffer holds {len} values, basis has {}", v.len())));
        }
        let dst = out_slice(out, len, "out")?;
        dst.iter_mut().zip(v.iter()).for_each(|(d, s)| *d = *s);
        Ok(())
    })
}

/// Binds `count` new class labels to the next free basis vectors.
///
/// # Safety
/// `labels` must be valid for `count` reads.
#[no_mangle]
pub unsafe extern "C" fn ocl_basis_bind_classes(b: *mut OclBasis, labels: *const u32, count: usize) -> OclStatus {
    guard(|| {
        non_null(b, "basis")?;
        let labels = if count == 0 {
            &[][..]
        } else {
            non_null(labels, "labels")?;
            std::slice::from_raw_parts(labels, count)
        };
        lift((*b).registry.bind_classes(labels))
    })
}

/// Predicts a label per row of the row-major `rows`×`dim` embeddings.
///
/// # Safety
/// `embeddings` must be valid for `rows * dim` reads and `out` for `rows`
/// writes.
#[no_mangle]
pub unsafe extern "C" fn ocl_basis_predict(
    b: *const OclBasis,
    embeddings: *const f64,
    rows: usize,
    dim: usize,
    out: *mut u32,
) -> OclStatus {
    guard(|| {
        non_null(b, "basis")?;
        let len = rows.checked_mul(dim).ok_or_else(|| fail(OclStatus::Parameter, "shape overflows"))?;
        let z = matrix(slice_arg(embeddings, len, "embeddings")?, rows, dim)?;
        let labels = lift(ebv::predict(z, &(*b).set, &(*b).registry))?;
        if rows > 0 {
            non_null(out, "out")?;
            std::slice::from_raw_parts_mut(out, rows).copy_from_slice(&labels);
        }
        Ok(())
    })
}

/// Restores a backbone from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ocl_model_load(path: *const c_char, out: *mut *mut OclModel) -> OclStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = path_arg(path)?;
        let model = lift(MlpBackbone::load_checkpoint(&path, 1.0, AlphaSchedule::default()))?;
        *out = Box::into_raw(Box::new(OclModel(model)));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ocl_model_free(m: *mut OclModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ocl_model_input_dim(m: *const OclModel) -> usize {
    if m.is_null() {
        0
    } else {
        (*m).0.input_dim()
    }
}

/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ocl_model_output_dim(m: *const OclModel) -> usize {
    if m.is_null() {
        0
    } else {
        (*m).0.output_dim()
    }
}

/// Embeds `rows` row-major inputs of width `input_dim` into `out`
/// (`rows`×output_dim).
///
/// # Safety
/// `inputs` must be valid for `rows * input_dim` reads and `out` for `len`
/// writes.
#[no_mangle]
pub unsafe extern "C" fn ocl_model_embed(
    m: *const OclModel,
    inputs: *const f64,
    rows: usize,
    input_dim: usize,
    out: *mut f64,
    len: usize,
) -> OclStatus {
    guard(|| {
        non_null(m, "model")?;
        let model = &(*m).0;
        let n_in = rows.checked_mul(input_dim).ok_or_else(|| fail(OclStatus::Parameter, "shape overflows"))?;
        let expected = rows * model.output_dim();
        if len != expected {
            return Err(fail(OclStatus::Parameter, format!("buffer holds {len} values, embeddings need {expected}")));
        }
        let x = matrix(slice_arg(inputs, n_in, "inputs")?, rows, input_dim)?;
        let z = lift(model.embed(x, 256))?;
        let dst = out_slice(out, len, "out")?;
        dst.iter_mut().zip(z.iter()).for_each(|(d, s)| *d = *s);
        Ok(())
    })
}
