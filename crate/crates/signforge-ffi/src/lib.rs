//! C ABI over the attack and evaluation library.
//!
//! Handles are opaque pointers created and destroyed here; callers never
//! see the layout of a pipeline or an image. Every fallible call returns
//! an [`sf_status`] code and, on failure, stores a message retrievable
//! with [`sf_last_error_message`]. Panics are caught at the boundary and
//! reported as [`sf_status::SF_PANIC`] instead of unwinding into C.

#![allow(non_camel_case_types)]
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use signforge::detection::{DetectorBackend, TemplateDetector};
use signforge::diffusion::{
    ddim_invert, generate, DiffusionBackend, InversionConfig, NullSchedule, ToyDiffusion,
};
use signforge::embedding::HashedProjectionEmbedder;
use signforge::error::Error;
use signforge::image::{Grid, ImageTensor};
use signforge::optimizer::{run_attack, AttackConfig};
use signforge::prompts::{PromptSegment, StructuredPrompt};
use signforge::simulate::{evaluate, make_cases, JudgeParams};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum sf_status {
    /// The call succeeded.
    SF_OK = 0,
    /// A required pointer argument was null.
    SF_NULL_ARGUMENT = 1,
    /// An argument failed validation; the message names it.
    SF_INVALID_ARGUMENT = 2,
    /// The operation itself failed.
    SF_RUNTIME_ERROR = 3,
    /// An internal panic was caught at the boundary.
    SF_PANIC = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized: String = message.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("nul bytes stripped");
    });
}

fn fail(err: &Error) -> sf_status {
    set_error(&err.to_string());
    match err {
        Error::Config(_)
        | Error::InvalidStrength(_)
        | Error::InvalidPrompt(_)
        | Error::InvalidImage(_)
        | Error::InvalidBox(_)
        | Error::InvalidSchedule(_)
        | Error::NoAdversarialSegment => sf_status::SF_INVALID_ARGUMENT,
        _ => sf_status::SF_RUNTIME_ERROR,
    }
}

fn fail_null(name: &str) -> sf_status {
    set_error(&format!("argument `{name}` is null"));
    sf_status::SF_NULL_ARGUMENT
}

fn fail_invalid(message: &str) -> sf_status {
    set_error(message);
    sf_status::SF_INVALID_ARGUMENT
}

/// Runs a body with panics converted to `SF_PANIC`.
fn guarded(body: impl FnOnce() -> sf_status) -> sf_status {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {message}"));
            sf_status::SF_PANIC
        }
    }
}

unsafe fn read_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, sf_status> {
    if ptr.is_null() {
        return Err(fail_null(name));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail_invalid(&format!("argument `{name}` is not valid UTF-8")))
}

/// Message of the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread. Empty string
/// when nothing has failed yet.
#[no_mangle]
pub extern "C" fn sf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string; never freed by the caller.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque bundle of the diffusion backend, the detector, and the
/// embedder, all at their default settings.
pub struct sf_pipeline {
    backend: ToyDiffusion,
    detector: TemplateDetector,
    embedder: HashedProjectionEmbedder,
}

/// Creates a pipeline with the default backends. Free with
/// [`sf_pipeline_free`].
#[no_mangle]
pub extern "C" fn sf_pipeline_new() -> *mut sf_pipeline {
    Box::into_raw(Box::new(sf_pipeline {
        backend: ToyDiffusion::default(),
        detector: TemplateDetector::default(),
        embedder: HashedProjectionEmbedder::default(),
    }))
}

/// Frees a pipeline; a null pointer is ignored.
#[no_mangle]
pub unsafe extern "C" fn sf_pipeline_free(pipeline: *mut sf_pipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Number of sign classes the pipeline's detector scores.
#[no_mangle]
pub unsafe extern "C" fn sf_pipeline_class_count(pipeline: *const sf_pipeline) -> usize {
    if pipeline.is_null() {
        return 0;
    }
    (*pipeline).detector.class_count()
}

/// Opaque RGB image with values in `[0,1]`.
pub struct sf_image {
    inner: ImageTensor,
}

fn image_out(out: *mut *mut sf_image, inner: ImageTensor) -> sf_status {
    unsafe { *out = Box::into_raw(Box::new(sf_image { inner })) };
    sf_status::SF_OK
}

/// Builds an image from row-major interleaved RGB doubles of length
/// `height * width * 3`. Values must already lie in `[0,1]`.
#[no_mangle]
pub unsafe extern "C" fn sf_image_new(
    data: *const f64,
    height: usize,
    width: usize,
    out: *mut *mut sf_image,
) -> sf_status {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        if data.is_null() {
            return fail_null("data");
        }
        let len = height * width * 3;
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let grid = match Grid::from_shape_vec((height, width, 3), values) {
            Ok(grid) => grid,
            Err(e) => return fail_invalid(&format!("bad image dimensions: {e}")),
        };
        match ImageTensor::new(grid) {
            Ok(inner) => image_out(out, inner),
            Err(e) => fail(&e),
        }
    })
}

/// Loads a PNG or JPEG file into a new image handle.
#[no_mangle]
pub unsafe extern "C" fn sf_image_read(
    path: *const c_char,
    out: *mut *mut sf_image,
) -> sf_status {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let path = match read_str(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match ImageTensor::read(Path::new(path)) {
            Ok(inner) => image_out(out, inner),
            Err(e) => fail(&e),
        }
    })
}

/// Writes an image as PNG.
#[no_mangle]
pub unsafe extern "C" fn sf_image_write_png(
    image: *const sf_image,
    path: *const c_char,
) -> sf_status {
    guarded(|| {
        if image.is_null() {
            return fail_null("image");
        }
        let path = match read_str(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match (*image).inner.write_png(Path::new(path)) {
            Ok(()) => sf_status::SF_OK,
            Err(e) => fail(&e),
        }
    })
}

/// Image height in pixels; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn sf_image_height(image: *const sf_image) -> usize {
    if image.is_null() {
        return 0;
    }
    (*image).inner.height()
}

/// Image width in pixels; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn sf_image_width(image: *const sf_image) -> usize {
    if image.is_null() {
        return 0;
    }
    (*image).inner.width()
}

/// Copies the image into `out` as row-major interleaved RGB doubles.
/// `len` must equal `height * width * 3`.
#[no_mangle]
pub unsafe extern "C" fn sf_image_copy_data(
    image: *const sf_image,
    out: *mut f64,
    len: usize,
) -> sf_status {
    guarded(|| {
        if image.is_null() {
            return fail_null("image");
        }
        if out.is_null() {
            return fail_null("out");
        }
        let inner = &(*image).inner;
        let needed = inner.height() * inner.width() * 3;
        if len != needed {
            return fail_invalid(&format!("buffer length {len} does not match image size {needed}"));
        }
        let dst = std::slice::from_raw_parts_mut(out, len);
        for (d, s) in dst.iter_mut().zip(inner.data().iter()) {
            *d = *s;
        }
        sf_status::SF_OK
    })
}

/// Frees an image; a null pointer is ignored.
#[no_mangle]
pub unsafe extern "C" fn sf_image_free(image: *mut sf_image) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// One detection after class-wise non-maximum suppression.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct sf_detection {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    /// Score of the predicted class, in `[0,1]`.
    pub score: f64,
    pub class_index: u32,
}

/// Runs the detector on an image. Always writes the total number of
/// detections to `count`; copies at most `capacity` of them into `out`,
/// which may be null to query the count alone.
#[no_mangle]
pub unsafe extern "C" fn sf_detect(
    pipeline: *const sf_pipeline,
    image: *const sf_image,
    score_thresh: f64,
    iou_thresh: f64,
    out: *mut sf_detection,
    capacity: usize,
    count: *mut usize,
) -> sf_status {
    guarded(|| {
        if pipeline.is_null() {
            return fail_null("pipeline");
        }
        if image.is_null() {
            return fail_null("image");
        }
        if count.is_null() {
            return fail_null("count");
        }
        let detections =
            match (*pipeline).detector.detect_nms(&(*image).inner, score_thresh, iou_thresh) {
                Ok(d) => d,
                Err(e) => return fail(&e),
            };
        *count = detections.proposals.len();
        if !out.is_null() {
            let n = detections.proposals.len().min(capacity);
            let dst = std::slice::from_raw_parts_mut(out, n);
            for (slot, p) in dst.iter_mut().zip(&detections.proposals) {
                *slot = sf_detection {
                    x_min: p.bbox.x_min,
                    y_min: p.bbox.y_min,
                    x_max: p.bbox.x_max,
                    y_max: p.bbox.y_max,
                    score: p.score(),
                    class_index: p.predicted_class as u32,
                };
            }
        }
        sf_status::SF_OK
    })
}

/// Attack hyperparameters. Get defaults from
/// [`sf_attack_params_default`] and override fields as needed.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct sf_attack_params {
    pub target_class: u32,
    pub seed: u64,
    pub iterations: u32,
    /// Proposals kept by the anchor-overlap filter.
    pub top_k: u32,
    /// Weight of the detection loss.
    pub lambda: f64,
    /// Step size on the initial latent.
    pub beta: f64,
    /// Step size on the null-text embedding.
    pub gamma: f64,
    /// Placement draws averaged per iteration.
    pub eot_samples: u32,
}

/// The library's default attack settings for class 0, seed 0.
#[no_mangle]
pub extern "C" fn sf_attack_params_default() -> sf_attack_params {
    sf_attack_params {
        target_class: 0,
        seed: 0,
        iterations: 200,
        top_k: 10,
        lambda: 1.0,
        beta: 0.05,
        gamma: 0.01,
        eot_samples: 4,
    }
}

fn parse_prompt(text: &str) -> signforge::Result<StructuredPrompt> {
    if text.trim_start().starts_with('{') {
        StructuredPrompt::from_json_str(text)
    } else {
        StructuredPrompt::new(vec![PromptSegment::adversarial(text)?])
    }
}

/// Optimizes a patch against the pipeline's detector over the given
/// backgrounds and returns the best image found. The prompt is either a
/// plain string, used as a single adversarial segment, or a JSON
/// document with explicit tagged segments.
#[no_mangle]
pub unsafe extern "C" fn sf_attack(
    pipeline: *const sf_pipeline,
    params: *const sf_attack_params,
    prompt: *const c_char,
    backgrounds: *const *const sf_image,
    background_count: usize,
    out: *mut *mut sf_image,
) -> sf_status {
    guarded(|| {
        if pipeline.is_null() {
            return fail_null("pipeline");
        }
        if params.is_null() {
            return fail_null("params");
        }
        if out.is_null() {
            return fail_null("out");
        }
        if backgrounds.is_null() {
            return fail_null("backgrounds");
        }
        let prompt = match read_str(prompt, "prompt") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let structured = match parse_prompt(prompt) {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        let handles = std::slice::from_raw_parts(backgrounds, background_count);
        let mut images = Vec::with_capacity(background_count);
        for (i, handle) in handles.iter().enumerate() {
            if handle.is_null() {
                return fail_null(&format!("backgrounds[{i}]"));
            }
            images.push((**handle).inner.clone());
        }
        let p = &*params;
        let mut config = AttackConfig::new(p.target_class as usize, structured);
        config.seed = p.seed;
        config.iterations = p.iterations as usize;
        config.top_k = p.top_k as usize;
        config.lambda = p.lambda;
        config.beta = p.beta;
        config.gamma = p.gamma;
        config.eot_samples = p.eot_samples as usize;
        let pipe = &*pipeline;
        match run_attack(&pipe.backend, &pipe.detector, &pipe.embedder, &images, &config) {
            Ok(run) => image_out(out, run.best_image),
            Err(e) => fail(&e),
        }
    })
}

/// Measures the attack success rate of a patch over `case_count`
/// randomized placements onto the backgrounds, judged against
/// `target_class` at the default thresholds. Writes a value in `[0,1]`.
#[no_mangle]
pub unsafe extern "C" fn sf_evaluate_asr(
    pipeline: *const sf_pipeline,
    patch: *const sf_image,
    backgrounds: *const *const sf_image,
    background_count: usize,
    target_class: u32,
    case_count: usize,
    seed: u64,
    asr: *mut f64,
) -> sf_status {
    guarded(|| {
        if pipeline.is_null() {
            return fail_null("pipeline");
        }
        if patch.is_null() {
            return fail_null("patch");
        }
        if backgrounds.is_null() {
            return fail_null("backgrounds");
        }
        if asr.is_null() {
            return fail_null("asr");
        }
        let handles = std::slice::from_raw_parts(backgrounds, background_count);
        let mut images = Vec::with_capacity(background_count);
        for (i, handle) in handles.iter().enumerate() {
            if handle.is_null() {
                return fail_null(&format!("backgrounds[{i}]"));
            }
            images.push((**handle).inner.clone());
        }
        let patch = &(*patch).inner;
        let cases = match make_cases(
            &images,
            patch.height(),
            patch.width(),
            case_count,
            (0.4, 1.0),
            (-15.0, 15.0),
            seed,
        ) {
            Ok(cases) => cases,
            Err(e) => return fail(&e),
        };
        let judge = JudgeParams {
            target_class: target_class as usize,
            score_thresh: 0.25,
            iou_thresh: 0.45,
        };
        let detector: &dyn DetectorBackend = &(*pipeline).detector;
        match evaluate(patch, &images, &cases, &[detector], &judge) {
            Ok(report) => {
                *asr = report.per_detector[0].asr;
                sf_status::SF_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Recovers the initial latent and per-step null texts that reproduce an
/// image under the pipeline's chain, then reconstructs from them.
/// Writes the reconstruction error to `recon_mse` and, when
/// `reconstruction` is non-null, a new image handle.
#[no_mangle]
pub unsafe extern "C" fn sf_invert(
    pipeline: *const sf_pipeline,
    image: *const sf_image,
    prompt: *const c_char,
    recon_mse: *mut f64,
    reconstruction: *mut *mut sf_image,
) -> sf_status {
    guarded(|| {
        if pipeline.is_null() {
            return fail_null("pipeline");
        }
        if image.is_null() {
            return fail_null("image");
        }
        if recon_mse.is_null() {
            return fail_null("recon_mse");
        }
        let prompt = match read_str(prompt, "prompt") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let structured = match parse_prompt(prompt) {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        let pipe = &*pipeline;
        let cond = match pipe.backend.prompt_embedding(&structured.render()) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        let inversion =
            match ddim_invert(&pipe.backend, &(*image).inner, &cond, &InversionConfig::default()) {
                Ok(inv) => inv,
                Err(e) => return fail(&e),
            };
        *recon_mse = inversion.recon_mse;
        if reconstruction.is_null() {
            return sf_status::SF_OK;
        }
        let schedule = NullSchedule::PerStep(inversion.null_texts);
        match generate(&pipe.backend, &inversion.x_big_t, &cond, &schedule) {
            Ok(generated) => image_out(reconstruction, generated.image),
            Err(e) => fail(&e),
        }
    })
}
