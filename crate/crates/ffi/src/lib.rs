//! C ABI over the `icl-meanshift` library.
//!
//! Objects cross the boundary as opaque handles created by `icm_*_new` or
//! `icm_*_from_*` and released by the matching `icm_*_free`. Every fallible
//! call returns an [`IcmStatus`]; on failure a message is kept per thread and
//! [`icm_last_error`] returns it. Strings returned by the library must be
//! released with [`icm_string_free`].

#![allow(clippy::missing_safety_doc)]

use icl_meanshift::dynamics::{self, Centering, DynamicsParams, LayerParams, Mode};
use icl_meanshift::error::Error;
use icl_meanshift::linalg::Mat;
use icl_meanshift::task_gen::{sample_linear_task, sample_voronoi_task, Prompt};
use icl_meanshift::transformer::{self, embed_abstraction, AbstractedWeights, TransformerWeights};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numeric = 3,
    Precondition = 4,
    Parse = 5,
    Config = 6,
    Io = 7,
    /// An output buffer is shorter than the result; nothing was written.
    BufferTooSmall = 8,
    /// A Rust panic was caught at the boundary.
    Internal = 9,
}

/// A prompt: labeled and unlabeled context rows plus one query.
pub struct IcmPrompt(Prompt);

/// A dynamics schedule with its attention mode and centering.
pub struct IcmDynamics(DynamicsParams);

/// Transformer weights.
pub struct IcmWeights(TransformerWeights);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> IcmStatus {
    match e {
        Error::InvalidArgument(_) => IcmStatus::InvalidArgument,
        Error::Numeric { .. } => IcmStatus::Numeric,
        Error::Precondition(_) => IcmStatus::Precondition,
        Error::Parse(_) => IcmStatus::Parse,
        Error::Config(_) => IcmStatus::Config,
        Error::Io(_) => IcmStatus::Io,
    }
}

/// Failure raised inside the wrapper itself.
struct Fail(IcmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(IcmStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IcmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IcmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IcmStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(IcmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn into_handle<T>(value: T, out: &mut *mut T) {
    *out = Box::into_raw(Box::new(value));
}

fn into_c_string(s: String, out: &mut *mut c_char) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(IcmStatus::Internal, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Writes logits into `out[0..len]` and the predicted class into `class`.
unsafe fn write_logits(logits: &[f64], out: *mut f64, len: usize, class: *mut usize) -> Result<(), Fail> {
    if len < logits.len() {
        return Err(Fail(IcmStatus::BufferTooSmall, format!("logit buffer holds {len}, need {}", logits.len())));
    }
    if !logits.is_empty() {
        if out.is_null() {
            return Err(null("logits"));
        }
        std::slice::from_raw_parts_mut(out, logits.len()).copy_from_slice(logits);
    }
    if let Some(c) = class.as_mut() {
        *c = icl_meanshift::linalg::argmax(logits);
    }
    Ok(())
}

/// Message of the last failed call on this thread; empty when none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn icm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn icm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn icm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Samples a linear-classification prompt with `n` labeled context rows.
#[no_mangle]
pub unsafe extern "C" fn icm_prompt_sample_linear(d: usize, k: usize, n: usize, seed: u64, out: *mut *mut IcmPrompt) -> IcmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        into_handle(IcmPrompt(sample_linear_task(d, k, n, seed)?.1), out);
        Ok(())
    })
}

/// Samples a Voronoi-classification prompt with `n` labeled context rows.
#[no_mangle]
pub unsafe extern "C" fn icm_prompt_sample_voronoi(d: usize, k: usize, n: usize, seed: u64, out: *mut *mut IcmPrompt) -> IcmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        into_handle(IcmPrompt(sample_voronoi_task(d, k, n, seed)?.1), out);
        Ok(())
    })
}

/// Builds a prompt from row-major `x` (`n * d`), per-row `classes` (`-1`
/// marks an unlabeled row) and a query of length `d`.
#[no_mangle]
pub unsafe extern "C" fn icm_prompt_new(
    n: usize,
    d: usize,
    k: usize,
    x: *const f64,
    classes: *const i64,
    x_test: *const f64,
    c_test: usize,
    out: *mut *mut IcmPrompt,
) -> IcmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let len = n.checked_mul(d).ok_or_else(|| Fail(IcmStatus::InvalidArgument, "n * d overflows".into()))?;
        let x = Mat::from_vec(n, d, slice(x, len, "x")?.to_vec());
        let classes: Vec<Option<usize>> = slice(classes, n, "classes")?
            .iter()
            .map(|&c| match c {
                -1 => Ok(None),
                c if c >= 0 => Ok(Some(c as usize)),
                c => Err(Fail(IcmStatus::InvalidArgument, format!("class {c} is neither -1 nor a class index"))),
            })
            .collect::<Result<_, _>>()?;
        let x_test = slice(x_test, d, "x_test")?.to_vec();
        into_handle(IcmPrompt(Prompt::from_classes(x, &classes, k, x_test, c_test)?), out);
        Ok(())
    })
}

/// Parses a prompt in the library's JSON prompt format.
#[no_mangle]
pub unsafe extern "C" fn icm_prompt_from_json(json: *const c_char, out: *mut *mut IcmPrompt) -> IcmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        into_handle(IcmPrompt(Prompt::from_json(c_str(json, "json")?)?), out);
        Ok(())
    })
}

/// Serializes a prompt to JSON; release the result with [`icm_string_free`].
#[no_mangle]
pub unsafe extern "C" fn icm_prompt_to_json(prompt: *const IcmPrompt, out: *mut *mut c_char) -> IcmStatus {
    guard(|| {
        let p = deref(prompt, "prompt")?;
        into_c_string(p.0.to_json()?, out_ptr(out, "out")?)
    })
}

/// Context size, feature dimension, class count and query class.
#[no_mangle]
pub unsafe extern "C" fn icm_prompt_shape(prompt: *const IcmPrompt, n: *mut usize, d: *mut usize, k: *mut usize, c_test: *mut usize) -> IcmStatus {
    guard(|| {
        let p = &deref(prompt, "prompt")?.0;
        for (ptr, v) in [(n, p.n()), (d, p.d()), (k, p.k()), (c_test, p.c_test)] {
            if let Some(slot) = ptr.as_mut() {
                *slot = v;
            }
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn icm_prompt_free(prompt: *mut IcmPrompt) {
    if !prompt.is_null() {
        drop(Box::from_raw(prompt));
    }
}

/// Attention mode of the dynamics.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcmMode {
    FullSoftmax = 0,
    LabelDominated = 1,
}

/// Whether label values are centered before aggregation.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcmCentering {
    Centered = 0,
    Uncentered = 1,
}

/// Creates a schedule from `layers` rows of `(alpha, gamma, alpha', gamma')`
/// stored contiguously in `schedule`.
#[no_mangle]
pub unsafe extern "C" fn icm_dynamics_new(
    layers: usize,
    schedule: *const f64,
    mode: IcmMode,
    centering: IcmCentering,
    out: *mut *mut IcmDynamics,
) -> IcmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let len = layers.checked_mul(4).ok_or_else(|| Fail(IcmStatus::InvalidArgument, "layer count overflows".into()))?;
        let s = slice(schedule, len, "schedule")?;
        let layers = s.chunks_exact(4).map(|c| LayerParams::new(c[0], c[1], c[2], c[3])).collect();
        let params = DynamicsParams::new(layers)
            .with_mode(match mode {
                IcmMode::FullSoftmax => Mode::FullSoftmax,
                IcmMode::LabelDominated => Mode::LabelDominated,
            })
            .with_centering(match centering {
                IcmCentering::Centered => Centering::Centered,
                IcmCentering::Uncentered => Centering::Uncentered,
            });
        params.validate()?;
        into_handle(IcmDynamics(params), out);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn icm_dynamics_free(params: *mut IcmDynamics) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Runs the dynamics; writes the `K` final query logits and the argmax.
/// `class` may be null.
#[no_mangle]
pub unsafe extern "C" fn icm_dynamics_predict(
    params: *const IcmDynamics,
    prompt: *const IcmPrompt,
    logits: *mut f64,
    len: usize,
    class: *mut usize,
) -> IcmStatus {
    guard(|| {
        let (params, prompt) = (&deref(params, "params")?.0, &deref(prompt, "prompt")?.0);
        let (_, s) = dynamics::predict_prompt(prompt, params)?;
        write_logits(&s, logits, len, class)
    })
}

/// Full trajectory (every state and attention matrix) as JSON; release the
/// result with [`icm_string_free`].
#[no_mangle]
pub unsafe extern "C" fn icm_dynamics_run_json(params: *const IcmDynamics, prompt: *const IcmPrompt, out: *mut *mut c_char) -> IcmStatus {
    guard(|| {
        let (params, prompt) = (&deref(params, "params")?.0, &deref(prompt, "prompt")?.0);
        into_c_string(dynamics::run(prompt, params)?.to_json()?, out_ptr(out, "out")?)
    })
}

/// Parses weights in the library's JSON weight format.
#[no_mangle]
pub unsafe extern "C" fn icm_weights_from_json(json: *const c_char, out: *mut *mut IcmWeights) -> IcmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        into_handle(IcmWeights(TransformerWeights::from_json(c_str(json, "json")?)?), out);
        Ok(())
    })
}

/// Parses weights in the library's binary weight format.
#[no_mangle]
pub unsafe extern "C" fn icm_weights_from_bytes(bytes: *const u8, len: usize, out: *mut *mut IcmWeights) -> IcmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        into_handle(IcmWeights(TransformerWeights::from_bytes(slice(bytes, len, "bytes")?)?), out);
        Ok(())
    })
}

/// The transformer whose forward pass equals the centered dynamics.
#[no_mangle]
pub unsafe extern "C" fn icm_weights_from_dynamics(params: *const IcmDynamics, d: usize, k: usize, out: *mut *mut IcmWeights) -> IcmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let params = &deref(params, "params")?.0;
        if params.centering != Centering::Centered || params.mode != Mode::FullSoftmax {
            return Err(Fail(IcmStatus::InvalidArgument, "only centered full-softmax dynamics have a transformer form".into()));
        }
        if d == 0 || k < 2 {
            return Err(Fail(IcmStatus::InvalidArgument, "need d >= 1 and K >= 2".into()));
        }
        into_handle(IcmWeights(embed_abstraction(&AbstractedWeights::from_dynamics(params, k), d, k)), out);
        Ok(())
    })
}

/// Serializes weights to JSON; release the result with [`icm_string_free`].
#[no_mangle]
pub unsafe extern "C" fn icm_weights_to_json(weights: *const IcmWeights, out: *mut *mut c_char) -> IcmStatus {
    guard(|| {
        let w = deref(weights, "weights")?;
        into_c_string(w.0.to_json()?, out_ptr(out, "out")?)
    })
}

/// Forward pass; writes the `K` query logits and the argmax. `class` may be
/// null.
#[no_mangle]
pub unsafe extern "C" fn icm_weights_forward(
    weights: *const IcmWeights,
    prompt: *const IcmPrompt,
    logits: *mut f64,
    len: usize,
    class: *mut usize,
) -> IcmStatus {
    guard(|| {
        let (w, prompt) = (&deref(weights, "weights")?.0, &deref(prompt, "prompt")?.0);
        let out = transformer::forward(prompt, w, None)?;
        write_logits(&out.logits, logits, len, class)
    })
}

#[no_mangle]
pub unsafe extern "C" fn icm_weights_free(weights: *mut IcmWeights) {
    if !weights.is_null() {
        drop(Box::from_raw(weights));
    }
}

/// [`icm_last_error`] as an owned Rust string.
pub fn last_error_string() -> String {
    unsafe { CStr::from_ptr(icm_last_error()) }.to_string_lossy().into_owned()
}
