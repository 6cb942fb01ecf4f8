//! C interface to `sbd`.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `*_new`/`*_load` call and released with the matching `*_free`. Fallible
//! calls return an `SBD_*` status code; on failure the message is available
//! from [`sbd_last_error`] on the same thread until the next failing call.
//! Panics are caught and reported as `SBD_ERR_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sbd::checkpoint::Checkpoint;
use sbd::data::MarkovSpec;
use sbd::eval::{gen_ppl, MarkovScorer};
use sbd::model::{DenoiserConfig, Transformer};
use sbd::sampler::{
    self, Generation, RemaskPolicy, SamplerOptions, StageConfig, StagePlan, UnmaskPolicy,
};
use sbd::Error;

pub const SBD_OK: i32 = 0;
pub const SBD_ERR_NULL: i32 = 1;
pub const SBD_ERR_CONFIG: i32 = 2;
pub const SBD_ERR_IO: i32 = 3;
pub const SBD_ERR_DATA: i32 = 4;
pub const SBD_ERR_STATE: i32 = 5;
pub const SBD_ERR_CHECKPOINT: i32 = 6;
pub const SBD_ERR_BUFFER: i32 = 7;
pub const SBD_ERR_INTERNAL: i32 = 8;

pub const SBD_REMASK_SNAPSHOT: i32 = 0;
pub const SBD_REMASK_POSTHOC: i32 = 1;
pub const SBD_REMASK_RANDOM: i32 = 2;

pub const SBD_POLICY_ANCESTRAL: i32 = 0;
pub const SBD_POLICY_CONFIDENCE_TOPK: i32 = 1;

/// A denoiser loaded from a checkpoint or freshly initialised.
pub struct SbdModel {
    inner: Transformer<f32>,
}

/// An ordered list of sampling stages.
pub struct SbdPlan {
    inner: StagePlan,
}

/// Output of one generation: tokens, confidences and per-stage NFEs.
pub struct SbdGeneration {
    inner: Generation,
}

/// A Markov source usable as an exact scorer.
pub struct SbdMarkov {
    inner: MarkovSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_of(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Layout { .. } | Error::Capacity { .. } | Error::Spec(_) => {
            SBD_ERR_CONFIG
        }
        Error::Io(_) => SBD_ERR_IO,
        Error::Data(_) | Error::Vocab(_) | Error::Index(_) => SBD_ERR_DATA,
        Error::State(_) | Error::Usage(_) => SBD_ERR_STATE,
        Error::Checkpoint(_) => SBD_ERR_CHECKPOINT,
        _ => SBD_ERR_INTERNAL,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Buffer(usize),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SBD_OK,
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            code_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("{what} is null"));
            SBD_ERR_NULL
        }
        Ok(Err(Fail::Buffer(need))) => {
            set_error(&format!("buffer too small, need {need} elements"));
            SBD_ERR_BUFFER
        }
        Err(_) => {
            set_error("internal panic");
            SBD_ERR_INTERNAL
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::Config("path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

/// Message for the last failed call on this thread; never null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sbd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_model_load(path: *const c_char, out: *mut *mut SbdModel) -> i32 {
    guard(|| {
        let ck = Checkpoint::load(path_arg(path)?)?;
        put(
            out,
            SbdModel {
                inner: ck.to_model()?,
            },
        )
    })
}

/// Randomly initialised model, mainly for testing bindings.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_model_init(
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    vocab_size: usize,
    max_len: usize,
    seed: u64,
    out: *mut *mut SbdModel,
) -> i32 {
    guard(|| {
        let cfg = DenoiserConfig {
            n_layers,
            n_heads,
            d_model,
            vocab_size,
            max_len,
        };
        put(
            out,
            SbdModel {
                inner: Transformer::init(cfg, seed)?,
            },
        )
    })
}

/// # Safety
/// `model` and `path` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sbd_model_save(model: *const SbdModel, path: *const c_char) -> i32 {
    guard(|| {
        let m = as_ref(model, "model")?;
        let step = m.inner.params().step_count();
        Checkpoint::from_model(&m.inner, step, &[]).save(path_arg(path)?)?;
        Ok(())
    })
}

/// Data vocabulary size `V`; the MASK id is `V`. Returns 0 for null.
///
/// # Safety
/// `model` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn sbd_model_vocab_size(model: *const SbdModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().vocab_size)
}

/// # Safety
/// `model` must be null or a pointer from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbd_model_free(model: *mut SbdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_plan_new(out: *mut *mut SbdPlan) -> i32 {
    guard(|| {
        put(
            out,
            SbdPlan {
                inner: StagePlan::new(Vec::new()),
            },
        )
    })
}

/// Appends a stage. `steps_per_block` of 0 selects the default; `gamma` is
/// ignored for the first stage.
///
/// # Safety
/// `plan` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sbd_plan_add_stage(
    plan: *mut SbdPlan,
    block_size: usize,
    gamma: f64,
    steps_per_block: usize,
    policy: i32,
    remask: i32,
    temperature: f64,
    nucleus_p: f64,
) -> i32 {
    guard(|| {
        let p = as_mut(plan, "plan")?;
        let policy = match policy {
            SBD_POLICY_ANCESTRAL => UnmaskPolicy::Ancestral,
            SBD_POLICY_CONFIDENCE_TOPK => UnmaskPolicy::ConfidenceTopk,
            v => return Err(Error::Config(format!("unknown policy {v}")).into()),
        };
        let remask = match remask {
            SBD_REMASK_SNAPSHOT => RemaskPolicy::Snapshot,
            SBD_REMASK_POSTHOC => RemaskPolicy::Posthoc,
            SBD_REMASK_RANDOM => RemaskPolicy::Random,
            v => return Err(Error::Config(format!("unknown remask policy {v}")).into()),
        };
        p.inner.stages.push(StageConfig {
            block_size,
            gamma,
            steps_per_block: (steps_per_block > 0).then_some(steps_per_block),
            policy,
            remask,
            temperature,
            nucleus_p,
        });
        Ok(())
    })
}

/// # Safety
/// `plan` must be null or a pointer from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbd_plan_free(plan: *mut SbdPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Generates `len` tokens. The result depends only on model, plan, `len`
/// and `seed`.
///
/// # Safety
/// `model` and `plan` must be valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_generate(
    model: *const SbdModel,
    plan: *const SbdPlan,
    len: usize,
    seed: u64,
    out: *mut *mut SbdGeneration,
) -> i32 {
    guard(|| {
        let m = as_ref(model, "model")?;
        let p = as_ref(plan, "plan")?;
        let g = sampler::generate(&m.inner, &p.inner, len, seed, SamplerOptions::default())?;
        put(out, SbdGeneration { inner: g })
    })
}

/// # Safety
/// `generation` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn sbd_generation_len(generation: *const SbdGeneration) -> usize {
    generation.as_ref().map_or(0, |g| g.inner.x.len())
}

/// Copies the tokens into `buf` (capacity `cap`).
///
/// # Safety
/// `buf` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn sbd_generation_tokens(
    generation: *const SbdGeneration,
    buf: *mut u32,
    cap: usize,
) -> i32 {
    guard(|| {
        let g = as_ref(generation, "generation")?;
        copy_out(&g.inner.x, buf, cap)
    })
}

/// Copies the final snapshot confidences into `buf` (capacity `cap`).
///
/// # Safety
/// `buf` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn sbd_generation_confidences(
    generation: *const SbdGeneration,
    buf: *mut f64,
    cap: usize,
) -> i32 {
    guard(|| {
        let g = as_ref(generation, "generation")?;
        let conf = g
            .inner
            .trace
            .complete()
            .ok_or_else(|| Error::State("confidence trace is incomplete".into()))?;
        copy_out(&conf, buf, cap)
    })
}

/// Number of stages run.
///
/// # Safety
/// `generation` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn sbd_generation_stage_count(generation: *const SbdGeneration) -> usize {
    generation.as_ref().map_or(0, |g| g.inner.metrics.len())
}

/// Forwards issued by stage `stage` (0-based), or 0 if out of range.
///
/// # Safety
/// `generation` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn sbd_generation_stage_nfes(
    generation: *const SbdGeneration,
    stage: usize,
) -> usize {
    generation
        .as_ref()
        .and_then(|g| g.inner.metrics.get(stage))
        .map_or(0, |m| m.nfes)
}

/// # Safety
/// `generation` must be null or a pointer from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbd_generation_free(generation: *mut SbdGeneration) {
    if !generation.is_null() {
        drop(Box::from_raw(generation));
    }
}

/// Loads a transition matrix file (dimension line, then rows).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_markov_load(path: *const c_char, out: *mut *mut SbdMarkov) -> i32 {
    guard(|| {
        put(
            out,
            SbdMarkov {
                inner: MarkovSpec::load(path_arg(path)?)?,
            },
        )
    })
}

/// Entropy rate in nats per token, NaN for null.
///
/// # Safety
/// `markov` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn sbd_markov_entropy_rate(markov: *const SbdMarkov) -> f64 {
    markov.as_ref().map_or(f64::NAN, |m| m.inner.entropy_rate())
}

/// Generative perplexity of `n_seqs` row-major sequences of length `len`
/// under the chain.
///
/// # Safety
/// `tokens` must hold `n_seqs * len` elements; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbd_markov_gen_ppl(
    markov: *const SbdMarkov,
    tokens: *const u32,
    n_seqs: usize,
    len: usize,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let m = as_ref(markov, "markov")?;
        if tokens.is_null() {
            return Err(Fail::Null("tokens"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let flat = std::slice::from_raw_parts(tokens, n_seqs * len);
        let seqs: Vec<Vec<u32>> = flat.chunks(len.max(1)).map(<[u32]>::to_vec).collect();
        *out = gen_ppl(&MarkovScorer::new(m.inner.clone()), &seqs)?.value;
        Ok(())
    })
}

/// # Safety
/// `markov` must be null or a pointer from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbd_markov_free(markov: *mut SbdMarkov) {
    if !markov.is_null() {
        drop(Box::from_raw(markov));
    }
}

unsafe fn copy_out<T: Copy>(src: &[T], buf: *mut T, cap: usize) -> Result<(), Fail> {
    if cap < src.len() {
        return Err(Fail::Buffer(src.len()));
    }
    if buf.is_null() {
        return Err(Fail::Null("buf"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}
