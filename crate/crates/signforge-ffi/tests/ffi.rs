//! Exercises the C ABI from Rust and, when a C compiler is available,
//! from an actual C program linked against the shared library.

use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use signforge_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sf_last_error_message()).to_string_lossy().into_owned() }
}

#[test]
fn version_is_a_nonempty_static_string() {
    let version = unsafe { CStr::from_ptr(sf_version()) }.to_str().unwrap();
    assert!(!version.is_empty());
}

#[test]
fn pipeline_reports_class_count() {
    let pipeline = sf_pipeline_new();
    assert!(!pipeline.is_null());
    unsafe {
        assert_eq!(sf_pipeline_class_count(pipeline), 3);
        assert_eq!(sf_pipeline_class_count(ptr::null()), 0);
        sf_pipeline_free(pipeline);
        sf_pipeline_free(ptr::null_mut());
    }
}

#[test]
fn image_data_roundtrips() {
    let (h, w) = (5usize, 7usize);
    let data: Vec<f64> = (0..h * w * 3).map(|i| (i % 11) as f64 / 10.0).collect();
    let mut image = ptr::null_mut();
    unsafe {
        assert_eq!(sf_image_new(data.as_ptr(), h, w, &mut image), sf_status::SF_OK);
        assert_eq!(sf_image_height(image), h);
        assert_eq!(sf_image_width(image), w);
        let mut out = vec![0.0; h * w * 3];
        assert_eq!(sf_image_copy_data(image, out.as_mut_ptr(), out.len()), sf_status::SF_OK);
        assert_eq!(out, data);
        assert_eq!(
            sf_image_copy_data(image, out.as_mut_ptr(), 1),
            sf_status::SF_INVALID_ARGUMENT
        );
        assert!(last_error().contains("length"));
        sf_image_free(image);
    }
}

#[test]
fn png_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("img.png").to_str().unwrap()).unwrap();
    let data = vec![0.5f64; 6 * 6 * 3];
    let mut image = ptr::null_mut();
    let mut loaded = ptr::null_mut();
    unsafe {
        assert_eq!(sf_image_new(data.as_ptr(), 6, 6, &mut image), sf_status::SF_OK);
        assert_eq!(sf_image_write_png(image, path.as_ptr()), sf_status::SF_OK);
        assert_eq!(sf_image_read(path.as_ptr(), &mut loaded), sf_status::SF_OK);
        assert_eq!(sf_image_height(loaded), 6);
        sf_image_free(image);
        sf_image_free(loaded);
    }
}

#[test]
fn null_arguments_are_reported_by_name() {
    let mut image = ptr::null_mut();
    unsafe {
        assert_eq!(sf_image_new(ptr::null(), 4, 4, &mut image), sf_status::SF_NULL_ARGUMENT);
        assert!(last_error().contains("data"), "{}", last_error());
        assert_eq!(
            sf_image_read(ptr::null(), &mut image),
            sf_status::SF_NULL_ARGUMENT
        );
        assert!(last_error().contains("path"), "{}", last_error());
    }
}

#[test]
fn out_of_range_pixels_are_invalid_arguments() {
    let mut data = vec![0.5f64; 4 * 4 * 3];
    data[0] = 2.0;
    let mut image = ptr::null_mut();
    unsafe {
        assert_eq!(
            sf_image_new(data.as_ptr(), 4, 4, &mut image),
            sf_status::SF_INVALID_ARGUMENT
        );
    }
    assert!(last_error().contains("invalid image"), "{}", last_error());
}

#[test]
fn detector_finds_a_canonical_sign() {
    let sign = signforge::detection::render_sign(0, 48).unwrap();
    let flat: Vec<f64> = sign.data().iter().copied().collect();
    let pipeline = sf_pipeline_new();
    let mut image = ptr::null_mut();
    unsafe {
        assert_eq!(sf_image_new(flat.as_ptr(), 48, 48, &mut image), sf_status::SF_OK);
        let mut count = 0usize;
        assert_eq!(
            sf_detect(pipeline, image, 0.25, 0.45, ptr::null_mut(), 0, &mut count),
            sf_status::SF_OK
        );
        assert!(count >= 1, "canonical sign not detected");
        let mut hits = vec![
            sf_detection {
                x_min: 0.0,
                y_min: 0.0,
                x_max: 0.0,
                y_max: 0.0,
                score: 0.0,
                class_index: 99,
            };
            count
        ];
        assert_eq!(
            sf_detect(pipeline, image, 0.25, 0.45, hits.as_mut_ptr(), hits.len(), &mut count),
            sf_status::SF_OK
        );
        let best = hits.iter().max_by(|a, b| a.score.total_cmp(&b.score)).unwrap();
        assert_eq!(best.class_index, 0);
        assert!(best.score > 0.9, "weak detection: {}", best.score);
        sf_image_free(image);
        sf_pipeline_free(pipeline);
    }
}

#[test]
fn flat_images_yield_no_detections() {
    let data = vec![0.5f64; 48 * 48 * 3];
    let pipeline = sf_pipeline_new();
    let mut image = ptr::null_mut();
    unsafe {
        assert_eq!(sf_image_new(data.as_ptr(), 48, 48, &mut image), sf_status::SF_OK);
        let mut count = 7usize;
        assert_eq!(
            sf_detect(pipeline, image, 0.25, 0.45, ptr::null_mut(), 0, &mut count),
            sf_status::SF_OK
        );
        assert_eq!(count, 0);
        sf_image_free(image);
        sf_pipeline_free(pipeline);
    }
}

#[test]
fn attack_evaluate_and_invert_compose() {
    let pipeline = sf_pipeline_new();
    let bg_data = vec![0.45f64; 72 * 72 * 3];
    let mut background = ptr::null_mut();
    let prompt = CString::new("a weathered red octagon").unwrap();
    unsafe {
        assert_eq!(sf_image_new(bg_data.as_ptr(), 72, 72, &mut background), sf_status::SF_OK);
        let backgrounds = [background as *const sf_image];

        let mut params = sf_attack_params_default();
        assert_eq!(params.iterations, 200);
        assert_eq!(params.lambda, 1.0);
        params.iterations = 3;
        params.eot_samples = 2;
        let mut patch = ptr::null_mut();
        assert_eq!(
            sf_attack(pipeline, &params, prompt.as_ptr(), backgrounds.as_ptr(), 1, &mut patch),
            sf_status::SF_OK
        );
        assert_eq!(sf_image_height(patch), 48);
        assert_eq!(sf_image_width(patch), 48);

        let mut asr = -1.0f64;
        assert_eq!(
            sf_evaluate_asr(pipeline, patch, backgrounds.as_ptr(), 1, 0, 5, 3, &mut asr),
            sf_status::SF_OK
        );
        assert!((0.0..=1.0).contains(&asr), "asr out of range: {asr}");

        let mut recon_mse = f64::NAN;
        let mut reconstruction = ptr::null_mut();
        assert_eq!(
            sf_invert(pipeline, patch, prompt.as_ptr(), &mut recon_mse, &mut reconstruction),
            sf_status::SF_OK
        );
        assert!(recon_mse <= 1e-3, "poor reconstruction: {recon_mse}");
        assert_eq!(sf_image_height(reconstruction), 48);

        sf_image_free(reconstruction);
        sf_image_free(patch);
        sf_image_free(background);
        sf_pipeline_free(pipeline);
    }
}

#[test]
fn structured_json_prompts_are_accepted() {
    let pipeline = sf_pipeline_new();
    let bg_data = vec![0.45f64; 72 * 72 * 3];
    let mut background = ptr::null_mut();
    let prompt = CString::new(
        r#"{"segments": [{"text": "a street scene with", "tag": "benign"},
                         {"text": "a red octagon", "tag": "adversarial"}]}"#,
    )
    .unwrap();
    unsafe {
        assert_eq!(sf_image_new(bg_data.as_ptr(), 72, 72, &mut background), sf_status::SF_OK);
        let backgrounds = [background as *const sf_image];
        let mut params = sf_attack_params_default();
        params.iterations = 1;
        params.eot_samples = 1;
        let mut patch = ptr::null_mut();
        assert_eq!(
            sf_attack(pipeline, &params, prompt.as_ptr(), backgrounds.as_ptr(), 1, &mut patch),
            sf_status::SF_OK
        );
        sf_image_free(patch);
        sf_image_free(background);
        sf_pipeline_free(pipeline);
    }
}

#[test]
fn prompts_without_tokens_are_invalid() {
    let pipeline = sf_pipeline_new();
    let bg_data = vec![0.45f64; 72 * 72 * 3];
    let mut background = ptr::null_mut();
    let prompt = CString::new("   ").unwrap();
    unsafe {
        assert_eq!(sf_image_new(bg_data.as_ptr(), 72, 72, &mut background), sf_status::SF_OK);
        let backgrounds = [background as *const sf_image];
        let params = sf_attack_params_default();
        let mut patch = ptr::null_mut();
        assert_eq!(
            sf_attack(pipeline, &params, prompt.as_ptr(), backgrounds.as_ptr(), 1, &mut patch),
            sf_status::SF_INVALID_ARGUMENT
        );
        sf_image_free(background);
        sf_pipeline_free(pipeline);
    }
}

#[test]
fn header_declares_the_full_surface() {
    let header = std::fs::read_to_string(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/signforge.h"),
    )
    .expect("build script generated the header");
    for needle in [
        "typedef struct sf_image sf_image;",
        "typedef struct sf_pipeline sf_pipeline;",
        "sf_status",
        "sf_attack_params sf_attack_params_default(void);",
        "sf_status sf_attack(",
        "sf_status sf_detect(",
        "sf_status sf_invert(",
        "sf_status sf_evaluate_asr(",
        "const char *sf_last_error_message(void);",
    ] {
        assert!(header.contains(needle), "header missing: {needle}");
    }
}

/// Compiles and runs a small C client against the generated header and
/// the built shared library. Skipped when no C compiler is installed.
#[test]
fn c_client_compiles_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler on PATH");
        return;
    }
    let manifest_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let include_dir = manifest_dir.join("include");
    // target/debug/deps/<test-bin> -> target/debug
    let lib_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    assert!(
        lib_dir.join("libsignforge_ffi.so").exists() || lib_dir.join("libsignforge_ffi.a").exists(),
        "built library not found in {}",
        lib_dir.display()
    );

    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("client.c");
    std::fs::write(
        &source,
        r#"
#include "signforge.h"
#include <assert.h>
#include <stdio.h>
#include <string.h>

int main(void) {
    assert(strlen(sf_version()) > 0);
    sf_pipeline *pipeline = sf_pipeline_new();
    assert(pipeline != NULL);
    assert(sf_pipeline_class_count(pipeline) == 3);

    double data[48 * 48 * 3];
    for (int i = 0; i < 48 * 48 * 3; i++) data[i] = 0.5;
    sf_image *image = NULL;
    assert(sf_image_new(data, 48, 48, &image) == SF_OK);
    assert(sf_image_height(image) == 48);
    assert(sf_image_width(image) == 48);

    size_t count = 123;
    assert(sf_detect(pipeline, image, 0.25, 0.45, NULL, 0, &count) == SF_OK);
    assert(count == 0);

    sf_image *bad = NULL;
    assert(sf_image_new(NULL, 4, 4, &bad) == SF_NULL_ARGUMENT);
    assert(strlen(sf_last_error_message()) > 0);

    sf_image_free(image);
    sf_pipeline_free(pipeline);
    printf("ok\n");
    return 0;
}
"#,
    )
    .unwrap();

    let binary = dir.path().join("client");
    let compile = Command::new("cc")
        .arg(&source)
        .arg("-I")
        .arg(&include_dir)
        .arg("-L")
        .arg(&lib_dir)
        .arg("-lsignforge_ffi")
        .arg("-lm")
        .arg("-o")
        .arg(&binary)
        .output()
        .unwrap();
    assert!(
        compile.status.success(),
        "compile failed: {}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&binary).env("LD_LIBRARY_PATH", &lib_dir).output().unwrap();
    assert!(run.status.success(), "client failed: {}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
