//! C ABI over the vesdn library.
//!
//! Every fallible function returns a [`VesdnStatus`]; on failure the message
//! is available from [`vesdn_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::{Array2, ArrayView2};
use vesdn::evaluation::{build_templates, evaluate_view, zero_shot_predict};
use vesdn::feature_io::{generate_synthetic, split_seen_unseen, FeaturePack, SynthConfig};
use vesdn::training::{fit, TrainConfig, TrainState};

/// Result codes. Values 1 to 3 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VesdnStatus {
    Ok = 0,
    Config = 1,
    Data = 2,
    Numerical = 3,
    NullPointer = 4,
    BufferSize = 5,
    Panic = 6,
}

/// A paired feature pack.
pub struct VesdnPack {
    inner: FeaturePack,
}

/// A trained model (full training state).
pub struct VesdnModel {
    inner: TrainState,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VesdnSynthParams {
    pub k_seen: usize,
    pub k_unseen: usize,
    pub n_per_class: usize,
    pub d_sem: usize,
    pub d_dom: usize,
    pub d_v: usize,
    pub d_b: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct VesdnPackShape {
    pub rows: usize,
    pub num_classes: usize,
    pub num_unseen: usize,
    pub visual_dim: usize,
    pub neural_dim: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct VesdnModelDims {
    pub visual_dim: usize,
    pub neural_dim: usize,
    pub semantic_dim: usize,
    pub num_classes: usize,
}

enum Failure {
    Core(vesdn::Error),
    Null(&'static str),
    Buffer(String),
    Arg(String),
}

impl From<vesdn::Error> for Failure {
    fn from(e: vesdn::Error) -> Self {
        Failure::Core(e)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VesdnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VesdnStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            match e.exit_code() {
                1 => VesdnStatus::Config,
                3 => VesdnStatus::Numerical,
                _ => VesdnStatus::Data,
            }
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            VesdnStatus::NullPointer
        }
        Ok(Err(Failure::Buffer(msg))) => {
            set_error(msg);
            VesdnStatus::BufferSize
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            VesdnStatus::Config
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            VesdnStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn matrix<'a>(p: *const f32, rows: usize, cols: usize, what: &'static str) -> Result<ArrayView2<'a, f32>, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure::Buffer(format!("{what}: size overflow")))?;
    let data = std::slice::from_raw_parts(p, len);
    ArrayView2::from_shape((rows, cols), data).map_err(|e| Failure::Buffer(format!("{what}: {e}")))
}

unsafe fn write_out(values: &Array2<f64>, out: *mut f32, out_len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    if out_len < values.len() {
        return Err(Failure::Buffer(format!("output holds {out_len} values, {} needed", values.len())));
    }
    let dst = std::slice::from_raw_parts_mut(out, values.len());
    for (d, &v) in dst.iter_mut().zip(values.iter()) {
        *d = v as f32;
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vesdn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn vesdn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn vesdn_synth_params_default() -> VesdnSynthParams {
    let d = SynthConfig::default();
    VesdnSynthParams {
        k_seen: d.k_seen,
        k_unseen: d.k_unseen,
        n_per_class: d.n_per_class,
        d_sem: d.d_sem,
        d_dom: d.d_dom,
        d_v: d.d_v,
        d_b: d.d_b,
        noise_sigma: d.noise_sigma,
        seed: d.seed,
    }
}

/// # Safety
/// `params` must point to a valid struct and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn vesdn_pack_synth(params: *const VesdnSynthParams, out: *mut *mut VesdnPack) -> VesdnStatus {
    guard(|| {
        let p = as_ref(params, "params")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let pack = generate_synthetic(&SynthConfig {
            k_seen: p.k_seen,
            k_unseen: p.k_unseen,
            n_per_class: p.n_per_class,
            d_sem: p.d_sem,
            d_dom: p.d_dom,
            d_v: p.d_v,
            d_b: p.d_b,
            noise_sigma: p.noise_sigma,
            seed: p.seed,
        })?;
        *out = Box::into_raw(Box::new(VesdnPack { inner: pack }));
        Ok(())
    })
}

/// # Safety
/// `dir` must be a NUL-terminated path and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vesdn_pack_load(dir: *const c_char, out: *mut *mut VesdnPack) -> VesdnStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let pack = FeaturePack::load(&dir)?;
        *out = Box::into_raw(Box::new(VesdnPack { inner: pack }));
        Ok(())
    })
}

/// # Safety
/// `pack` must come from this library; `dir` must be a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn vesdn_pack_save(pack: *const VesdnPack, dir: *const c_char) -> VesdnStatus {
    guard(|| {
        let pack = as_ref(pack, "pack")?;
        pack.inner.save(&path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// # Safety
/// `pack` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn vesdn_pack_shape(pack: *const VesdnPack, out: *mut VesdnPackShape) -> VesdnStatus {
    guard(|| {
        let p = &as_ref(pack, "pack")?.inner;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = VesdnPackShape {
            rows: p.len(),
            num_classes: p.num_classes,
            num_unseen: p.unseen_classes.len(),
            visual_dim: p.visual_dim(),
            neural_dim: p.neural_dim(),
        };
        Ok(())
    })
}

/// # Safety
/// `pack` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vesdn_pack_free(pack: *mut VesdnPack) {
    if !pack.is_null() {
        drop(Box::from_raw(pack));
    }
}

/// Trains on the seen classes of `pack`. `config_json` holds training
/// options (missing keys take defaults) and may be NULL. When
/// `checkpoint_dir` is non-NULL the latest state is written there after
/// every epoch.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vesdn_model_train(
    pack: *const VesdnPack,
    config_json: *const c_char,
    checkpoint_dir: *const c_char,
    out: *mut *mut VesdnModel,
) -> VesdnStatus {
    guard(|| {
        let pack = &as_ref(pack, "pack")?.inner;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let cfg: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Failure::Arg("config_json is not valid UTF-8".into()))?;
            serde_json::from_str(text).map_err(|e| Failure::Arg(format!("config_json: {e}")))?
        };
        let ckpt = if checkpoint_dir.is_null() {
            None
        } else {
            Some(path_arg(checkpoint_dir, "checkpoint_dir")?)
        };
        let (state, _) = fit(&cfg, pack, ckpt.as_deref())?;
        *out = Box::into_raw(Box::new(VesdnModel { inner: state }));
        Ok(())
    })
}

/// # Safety
/// `dir` must be a NUL-terminated path and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vesdn_model_load(dir: *const c_char, out: *mut *mut VesdnModel) -> VesdnStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let state = vesdn::checkpoint::load(&dir)?;
        *out = Box::into_raw(Box::new(VesdnModel { inner: state }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `dir` must be a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn vesdn_model_save(model: *const VesdnModel, dir: *const c_char) -> VesdnStatus {
    guard(|| {
        let model = as_ref(model, "model")?;
        vesdn::checkpoint::save(&model.inner, &path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn vesdn_model_dims(model: *const VesdnModel, out: *mut VesdnModelDims) -> VesdnStatus {
    guard(|| {
        let s = &as_ref(model, "model")?.inner;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = VesdnModelDims {
            visual_dim: s.visual_dim,
            neural_dim: s.neural_dim,
            semantic_dim: s.config.semantic_dim(s.visual_dim),
            num_classes: s.bank.num_classes(),
        };
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vesdn_model_free(model: *mut VesdnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Semantic features of `n` visual rows (row-major `n × dim`) into `out`
/// (`n × semantic_dim`).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn vesdn_encode_visual(
    model: *const VesdnModel,
    rows: *const f32,
    n: usize,
    dim: usize,
    out: *mut f32,
    out_len: usize,
) -> VesdnStatus {
    guard(|| {
        let s = &as_ref(model, "model")?.inner;
        let x = matrix(rows, n, dim, "rows")?.mapv(f64::from);
        let z = s.net.encode_visual(x.view())?;
        write_out(&z, out, out_len)
    })
}

/// Semantic features of `n` neural rows into `out` (`n × semantic_dim`).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn vesdn_encode_neural(
    model: *const VesdnModel,
    rows: *const f32,
    n: usize,
    dim: usize,
    out: *mut f32,
    out_len: usize,
) -> VesdnStatus {
    guard(|| {
        let s = &as_ref(model, "model")?.inner;
        let x = matrix(rows, n, dim, "rows")?.mapv(f64::from);
        let z = s.net.encode_neural(x.view())?;
        write_out(&z, out, out_len)
    })
}

/// Zero-shot classification of `n` neural rows against `u` visual template
/// rows labelled by `class_ids`. Writes one class id per row to
/// `predictions`; if `scores` is non-NULL it receives the `n × u` cosine
/// scores with columns in ascending class-id order.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn vesdn_zero_shot_predict(
    model: *const VesdnModel,
    neural: *const f32,
    n: usize,
    neural_dim: usize,
    templates: *const f32,
    class_ids: *const i32,
    u: usize,
    visual_dim: usize,
    predictions: *mut i32,
    scores: *mut f32,
) -> VesdnStatus {
    guard(|| {
        let s = &as_ref(model, "model")?.inner;
        let x_b = matrix(neural, n, neural_dim, "neural")?.mapv(f64::from);
        let h_v = matrix(templates, u, visual_dim, "templates")?.mapv(f64::from);
        if class_ids.is_null() {
            return Err(Failure::Null("class_ids"));
        }
        let ids = std::slice::from_raw_parts(class_ids, u)
            .iter()
            .map(|&c| usize::try_from(c).map_err(|_| Failure::Arg(format!("negative class id {c}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if predictions.is_null() {
            return Err(Failure::Null("predictions"));
        }
        let t = build_templates(&s.net, h_v.view(), &ids)?;
        let (pred, sc) = zero_shot_predict(&s.net, x_b.view(), &t)?;
        let dst = std::slice::from_raw_parts_mut(predictions, n);
        for (d, p) in dst.iter_mut().zip(pred) {
            *d = p as i32;
        }
        if !scores.is_null() {
            write_out(&sc, scores, n * u)?;
        }
        Ok(())
    })
}

/// Unseen-class top-1 and top-5 accuracy of `model` on `pack`.
///
/// # Safety
/// Handles must come from this library; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn vesdn_model_evaluate(
    model: *const VesdnModel,
    pack: *const VesdnPack,
    top1: *mut f64,
    top5: *mut f64,
) -> VesdnStatus {
    guard(|| {
        let s = &as_ref(model, "model")?.inner;
        let p = &as_ref(pack, "pack")?.inner;
        if top1.is_null() || top5.is_null() {
            return Err(Failure::Null("top1/top5"));
        }
        let (_, test) = split_seen_unseen(p)?;
        let report = evaluate_view(s, &test)?;
        *top1 = report.top1;
        *top5 = report.top5;
        Ok(())
    })
}
