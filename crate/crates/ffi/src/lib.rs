//! C ABI over `slr-core`.
//!
//! Every fallible call returns an [`SlrStatus`]; on failure the message is
//! kept per thread and read back with [`slr_last_error`]. Models are opaque
//! [`SlrModel`] handles released with [`slr_model_free`]. Images are passed
//! as contiguous NHWC `double` arrays in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use ndarray::{ArrayView1, ArrayView3, ArrayView4};
use slr_core::eval::{aggregate, confusion_matrix, per_class_metrics, MetricsReport, Strategy};
use slr_core::explain::{attribute, BackgroundSet};
use slr_core::model::{assemble_model, build_backbone, Architecture, BackboneSpec, HeadSpec, ModelHandle, Weights};
use slr_core::train::{cross_entropy_lsr, softmax};
use slr_core::{Error, ErrorKind};

/// Status codes. The nonzero values match the `slr` command's exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlrStatus {
    Ok = 0,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
    NullArgument = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlrAverage {
    Macro = 0,
    Micro = 1,
    Weighted = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SlrMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SlrAttribution {
    pub base_value: f64,
    pub explained_output: f64,
    pub residual: f64,
}

/// Opaque model handle.
pub struct SlrModel {
    inner: ModelHandle,
    class_names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Failure {
    Core(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SlrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SlrStatus::Ok,
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("{name} is null"));
            SlrStatus::NullArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            match e.kind() {
                ErrorKind::Config => SlrStatus::Config,
                ErrorKind::Data => SlrStatus::Data,
                ErrorKind::Numeric => SlrStatus::Numeric,
                ErrorKind::Io => SlrStatus::Io,
            }
        }
        Err(_) => {
            set_error("internal panic".into());
            SlrStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, name: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(name))
    } else {
        Ok(p)
    }
}

unsafe fn out<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(name))
}

unsafe fn model<'a>(p: *const SlrModel) -> Result<&'a SlrModel, Failure> {
    p.as_ref().ok_or(Failure::Null("model"))
}

unsafe fn string<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    let p = nonnull(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::Config(format!("{name} is not valid UTF-8")).into())
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    Ok(slice::from_raw_parts(nonnull(p, name)?, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, name: &'static str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    Ok(slice::from_raw_parts_mut(nonnull(p, name)? as *mut f64, len))
}

fn wrap(inner: ModelHandle, names: Vec<String>) -> *mut SlrModel {
    let class_names = names
        .into_iter()
        .map(|n| CString::new(n.replace('\0', " ")).unwrap_or_default())
        .collect();
    Box::into_raw(Box::new(SlrModel { inner, class_names }))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next `slr_*` call on the same thread.
#[no_mangle]
pub extern "C" fn slr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn slr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory written by `slr train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn slr_model_load(dir: *const c_char, out_model: *mut *mut SlrModel) -> SlrStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        *slot = ptr::null_mut();
        let (inner, names) = ModelHandle::load_checkpoint(Path::new(string(dir, "dir")?))?;
        *slot = wrap(inner, names);
        Ok(())
    })
}

/// Builds an untrained model: a random-weight backbone of `architecture`
/// at `side` x `side` plus a freshly initialised head, both from `seed`.
///
/// # Safety
/// `architecture` must be a NUL-terminated string and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn slr_model_build(
    architecture: *const c_char,
    side: usize,
    classes: usize,
    seed: u64,
    out_model: *mut *mut SlrModel,
) -> SlrStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        *slot = ptr::null_mut();
        let arch: Architecture = string(architecture, "architecture")?.parse()?;
        let mut spec = BackboneSpec::new(arch, Weights::Random { seed });
        spec.input_shape = [side, side, 3];
        let inner = assemble_model(build_backbone(&spec)?, HeadSpec::new(classes), seed)?;
        let names = (0..classes).map(|c| c.to_string()).collect();
        *slot = wrap(inner, names);
        Ok(())
    })
}

/// Releases a model. Null is accepted.
///
/// # Safety
/// `model` must come from `slr_model_load` or `slr_model_build` and not have
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn slr_model_free(model: *mut SlrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn slr_model_classes(model: *const SlrModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.classes())
}

/// Name of class `k`, or null when out of range. Owned by the handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn slr_model_class_name(model: *const SlrModel, k: usize) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.class_names.get(k))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Expected image shape (height, width, channels).
///
/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn slr_model_input_shape(
    model: *const SlrModel,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> SlrStatus {
    guard(|| {
        let s = self::model(model)?.inner.input_shape();
        *out(height, "height")? = s.height;
        *out(width, "width")? = s.width;
        *out(channels, "channels")? = s.channels;
        Ok(())
    })
}

/// Trainable (head) and non-trainable (backbone) parameter counts.
///
/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn slr_model_param_counts(
    model: *const SlrModel,
    trainable: *mut usize,
    non_trainable: *mut usize,
) -> SlrStatus {
    guard(|| {
        let m = &self::model(model)?.inner;
        *out(trainable, "trainable")? = m.trainable_param_count();
        *out(non_trainable, "non_trainable")? = m.nontrainable_param_count();
        Ok(())
    })
}

unsafe fn images<'a>(model: &SlrModel, data: *const f64, n: usize) -> Result<ArrayView4<'a, f64>, Failure> {
    let s = model.inner.input_shape();
    let shape = (n, s.height, s.width, s.channels);
    let flat = input(data, n * s.height * s.width * s.channels, "images")?;
    Ok(ArrayView4::from_shape(shape, flat).expect("length matches shape"))
}

/// Class probabilities for `n` images into `probs` (`n * classes` doubles,
/// row-major).
///
/// # Safety
/// `images` must hold `n * height * width * channels` doubles and `probs`
/// must have room for `probs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn slr_model_predict(
    model: *const SlrModel,
    images: *const f64,
    n: usize,
    probs: *mut f64,
    probs_len: usize,
) -> SlrStatus {
    guard(|| {
        let m = self::model(model)?;
        let need = n * m.inner.classes();
        if probs_len != need {
            return Err(Error::Shape(format!("probs holds {probs_len} values, need {need}")).into());
        }
        let x = self::images(m, images, n)?;
        let dst = output(probs, need, "probs")?;
        if n > 0 {
            let p = m.inner.predict_proba(x)?;
            dst.iter_mut().zip(p.iter()).for_each(|(d, v)| *d = *v);
        }
        Ok(())
    })
}

/// Expected-gradients attribution of class `class` for one image against
/// `background_n` background images. `values` receives one double per input
/// element.
///
/// # Safety
/// `image` holds one image, `background` holds `background_n` images,
/// `values` has room for `values_len` doubles and `result` is writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn slr_model_attribute(
    model: *const SlrModel,
    image: *const f64,
    background: *const f64,
    background_n: usize,
    class: usize,
    n_samples: usize,
    seed: u64,
    values: *mut f64,
    values_len: usize,
    result: *mut SlrAttribution,
) -> SlrStatus {
    guard(|| {
        let m = self::model(model)?;
        let s = m.inner.input_shape();
        let len = s.height * s.width * s.channels;
        if values_len != len {
            return Err(Error::Shape(format!("values holds {values_len} values, need {len}")).into());
        }
        let result = out(result, "result")?;
        let x = ArrayView3::from_shape((s.height, s.width, s.channels), input(image, len, "image")?)
            .expect("length matches shape");
        let bg = BackgroundSet::from_images(self::images(m, background, background_n)?.to_owned());
        let a = attribute(&m.inner, x, &bg, class, n_samples, seed)?;
        let dst = output(values, len, "values")?;
        dst.iter_mut().zip(a.values.iter()).for_each(|(d, v)| *d = *v);
        *result = SlrAttribution {
            base_value: a.base_value,
            explained_output: a.explained_output,
            residual: a.residual(),
        };
        Ok(())
    })
}

/// Softmax of `k` logits into `probs`.
///
/// # Safety
/// Both arrays must hold `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn slr_softmax(logits: *const f64, k: usize, probs: *mut f64) -> SlrStatus {
    guard(|| {
        let p = softmax(ArrayView1::from(input(logits, k, "logits")?))?;
        output(probs, k, "probs")?.copy_from_slice(p.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// Cross entropy of `probs` against the label-smoothed target for `label`.
///
/// # Safety
/// `probs` must hold `k` doubles and `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slr_cross_entropy_lsr(
    probs: *const f64,
    k: usize,
    label: usize,
    epsilon: f64,
    loss: *mut f64,
) -> SlrStatus {
    guard(|| {
        let v = cross_entropy_lsr(ArrayView1::from(input(probs, k, "probs")?), label, epsilon, k)?;
        *out(loss, "loss")? = v;
        Ok(())
    })
}

/// Accuracy and averaged precision, recall and F1 for `n` label pairs.
///
/// # Safety
/// `y_true` and `y_pred` must hold `n` values and `metrics` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slr_metrics(
    y_true: *const usize,
    y_pred: *const usize,
    n: usize,
    classes: usize,
    average: SlrAverage,
    metrics: *mut SlrMetrics,
) -> SlrStatus {
    guard(|| {
        let dst = out(metrics, "metrics")?;
        let cm = confusion_matrix(input(y_true, n, "y_true")?, input(y_pred, n, "y_pred")?, classes)?;
        let strategy = match average {
            SlrAverage::Macro => Strategy::Macro,
            SlrAverage::Micro => Strategy::Micro,
            SlrAverage::Weighted => Strategy::Weighted,
        };
        let agg = aggregate(&per_class_metrics(&cm), strategy);
        *dst = SlrMetrics {
            accuracy: MetricsReport::from_confusion(&cm).accuracy,
            precision: agg.precision,
            recall: agg.recall,
            f1: agg.f1,
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = slr_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    #[test]
    fn softmax_and_loss() {
        let logits = [1.0, 2.0, 3.0];
        let mut p = [0.0; 3];
        assert_eq!(
            unsafe { slr_softmax(logits.as_ptr(), 3, p.as_mut_ptr()) },
            SlrStatus::Ok
        );
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let mut loss = 0.0;
        let st = unsafe { slr_cross_entropy_lsr(p.as_ptr(), 3, 2, 0.0, &mut loss) };
        assert_eq!(st, SlrStatus::Ok);
        assert!((loss + p[2].ln()).abs() < 1e-15);
        assert!(slr_last_error().is_null());
    }

    #[test]
    fn errors_carry_a_message() {
        let p = [0.5, 0.5];
        let mut loss = 0.0;
        let st = unsafe { slr_cross_entropy_lsr(p.as_ptr(), 2, 5, 0.0, &mut loss) };
        assert_eq!(st, SlrStatus::Data);
        assert!(last_error().contains('5'));
        let st = unsafe { slr_cross_entropy_lsr(p.as_ptr(), 2, 0, 0.0, ptr::null_mut()) };
        assert_eq!(st, SlrStatus::NullArgument);
        assert_eq!(last_error(), "loss is null");
    }

    #[test]
    fn metrics_match_core() {
        let t = [0usize, 0, 1, 2, 2, 2];
        let p = [0usize, 1, 1, 2, 0, 2];
        let mut m = SlrMetrics::default();
        let st = unsafe { slr_metrics(t.as_ptr(), p.as_ptr(), 6, 3, SlrAverage::Micro, &mut m) };
        assert_eq!(st, SlrStatus::Ok);
        assert_eq!(m.accuracy, 4.0 / 6.0);
        assert_eq!(m.recall, m.accuracy);
        let st = unsafe { slr_metrics(t.as_ptr(), p.as_ptr(), 6, 2, SlrAverage::Macro, &mut m) };
        assert_eq!(st, SlrStatus::Data);
    }

    #[test]
    fn model_round_trip() {
        let arch = CString::new("tiny").unwrap();
        let mut h = ptr::null_mut();
        assert_eq!(
            unsafe { slr_model_build(arch.as_ptr(), 32, 3, 1, &mut h) },
            SlrStatus::Ok
        );
        let (mut hh, mut ww, mut cc) = (0, 0, 0);
        unsafe { slr_model_input_shape(h, &mut hh, &mut ww, &mut cc) };
        assert_eq!((hh, ww, cc), (32, 32, 3));
        assert_eq!(unsafe { slr_model_classes(h) }, 3);
        let name = unsafe { CStr::from_ptr(slr_model_class_name(h, 2)) };
        assert_eq!(name.to_str().unwrap(), "2");
        assert!(unsafe { slr_model_class_name(h, 3) }.is_null());

        let (mut tr, mut fr) = (0, 0);
        unsafe { slr_model_param_counts(h, &mut tr, &mut fr) };
        assert!(tr > 0 && fr > 0);

        let len = 32 * 32 * 3;
        let imgs: Vec<f64> = (0..2 * len).map(|i| (i % 255) as f64 / 255.0).collect();
        let mut probs = [0.0; 6];
        let st = unsafe { slr_model_predict(h, imgs.as_ptr(), 2, probs.as_mut_ptr(), 6) };
        assert_eq!(st, SlrStatus::Ok);
        assert!((probs[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let st = unsafe { slr_model_predict(h, imgs.as_ptr(), 2, probs.as_mut_ptr(), 5) };
        assert_eq!(st, SlrStatus::Data);

        let mut values = vec![0.0; len];
        let mut r = SlrAttribution::default();
        let st = unsafe {
            slr_model_attribute(
                h,
                imgs.as_ptr(),
                imgs.as_ptr(),
                2,
                1,
                4,
                0,
                values.as_mut_ptr(),
                len,
                &mut r,
            )
        };
        assert_eq!(st, SlrStatus::Ok, "{}", last_error());
        assert!((r.explained_output - probs[1]).abs() < 1e-12);
        assert!(r.residual.is_finite());
        unsafe { slr_model_free(h) };
        unsafe { slr_model_free(ptr::null_mut()) };
    }

    #[test]
    fn unknown_architecture_and_missing_checkpoint() {
        let arch = CString::new("alexnet").unwrap();
        let mut h = ptr::null_mut();
        assert_eq!(
            unsafe { slr_model_build(arch.as_ptr(), 32, 3, 1, &mut h) },
            SlrStatus::Config
        );
        assert!(h.is_null());
        let dir = CString::new("/nonexistent/checkpoint").unwrap();
        assert_eq!(unsafe { slr_model_load(dir.as_ptr(), &mut h) }, SlrStatus::Io);
        assert!(h.is_null());
        assert_eq!(
            unsafe { slr_model_predict(ptr::null(), ptr::null(), 0, ptr::null_mut(), 0) },
            SlrStatus::NullArgument
        );
    }
}
