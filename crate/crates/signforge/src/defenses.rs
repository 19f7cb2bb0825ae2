//! Input-transform defenses and their strength sweeps.
//!
//! Five classical preprocessing transforms can sit between the camera
//! and the detector: JPEG re-encoding, bit-depth reduction, additive
//! Gaussian noise, per-channel median blur, and non-local means
//! denoising. [`defense_sweep`] measures both sides of each transform at
//! every strength: how much attack success rate it suppresses and how
//! much benign average precision it costs.
//!
//! Defended evaluation quantizes every composite to 8 bits before the
//! transform, since a deployed defense consumes camera frames rather
//! than the renderer's real-valued output. Quantizing first also makes
//! the 8-bit depth setting an exact no-op, the identity end of its
//! strength grid.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{mean_average_precision, DetectionSet, DetectorBackend, GroundTruth};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::simulate::{evaluate_transformed, CompositeCase, EvalReport, JudgeParams};

/// Transform family applied to camera frames before detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Jpeg,
    BitDepth,
    GaussianNoise,
    MedianBlur,
    NonlocalMeans,
}

impl DefenseKind {
    /// Stable lower-case label used in CSV output and manifests.
    pub fn label(&self) -> &'static str {
        match self {
            DefenseKind::Jpeg => "jpeg",
            DefenseKind::BitDepth => "bit_depth",
            DefenseKind::GaussianNoise => "gaussian_noise",
            DefenseKind::MedianBlur => "median_blur",
            DefenseKind::NonlocalMeans => "nonlocal_means",
        }
    }
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One defense at one strength. The strength parameter means, per kind:
/// JPEG quality (integer 1..=100), bit count (integer 1..=8), noise
/// standard deviation (>= 0), median kernel size (odd integer >= 3), or
/// non-local means filter strength on the 8-bit scale (> 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    pub strength: f64,
}

impl DefenseSpec {
    pub fn new(kind: DefenseKind, strength: f64) -> Result<Self> {
        let spec = Self { kind, strength };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the strength against the documented per-kind bounds.
    pub fn validate(&self) -> Result<()> {
        let s = self.strength;
        let fail = |expected: &str| {
            Err(Error::InvalidStrength(format!("{} needs {expected}, got {s}", self.kind)))
        };
        if !s.is_finite() {
            return fail("a finite strength");
        }
        match self.kind {
            DefenseKind::Jpeg if s.fract() != 0.0 || !(1.0..=100.0).contains(&s) => {
                fail("an integer quality in 1..=100")
            }
            DefenseKind::BitDepth if s.fract() != 0.0 || !(1.0..=8.0).contains(&s) => {
                fail("an integer bit count in 1..=8")
            }
            DefenseKind::GaussianNoise if s < 0.0 => fail("a standard deviation >= 0"),
            DefenseKind::MedianBlur if s.fract() != 0.0 || s < 3.0 || (s as u64).is_multiple_of(2) => {
                fail("an odd integer kernel size >= 3")
            }
            DefenseKind::NonlocalMeans if s <= 0.0 => fail("a filter strength > 0"),
            _ => Ok(()),
        }
    }
}

/// The sweep grid recorded in run manifests: JPEG quality
/// {90,70,50,30,10}, bits {8,6,4,2,1}, noise sigma 0.01 to 0.1 in steps
/// of 0.01, median kernel {3,5,7,9}, filter strength {5,10,15,20}.
pub fn standard_grid() -> Vec<DefenseSpec> {
    let mut specs = Vec::new();
    for quality in [90.0, 70.0, 50.0, 30.0, 10.0] {
        specs.push(DefenseSpec { kind: DefenseKind::Jpeg, strength: quality });
    }
    for bits in [8.0, 6.0, 4.0, 2.0, 1.0] {
        specs.push(DefenseSpec { kind: DefenseKind::BitDepth, strength: bits });
    }
    for step in 1..=10 {
        specs.push(DefenseSpec {
            kind: DefenseKind::GaussianNoise,
            strength: step as f64 / 100.0,
        });
    }
    for kernel in [3.0, 5.0, 7.0, 9.0] {
        specs.push(DefenseSpec { kind: DefenseKind::MedianBlur, strength: kernel });
    }
    for strength in [5.0, 10.0, 15.0, 20.0] {
        specs.push(DefenseSpec { kind: DefenseKind::NonlocalMeans, strength });
    }
    specs
}

/// Applies one defense to one image. The output keeps the input's
/// dimensions and stays in `[0,1]`. Only gaussian_noise reads the seed;
/// the other transforms are deterministic.
pub fn apply_defense(img: &ImageTensor, spec: &DefenseSpec, seed: u64) -> Result<ImageTensor> {
    spec.validate()?;
    match spec.kind {
        DefenseKind::Jpeg => jpeg_roundtrip(img, spec.strength as u8),
        DefenseKind::BitDepth => Ok(bit_depth(img, spec.strength as u32)),
        DefenseKind::GaussianNoise => gaussian_noise(img, spec.strength, seed),
        DefenseKind::MedianBlur => Ok(median_blur(img, spec.strength as usize)),
        DefenseKind::NonlocalMeans => Ok(nonlocal_means(img, spec.strength / 255.0)),
    }
}

fn jpeg_bytes(img: &ImageTensor, quality: u8) -> Result<Vec<u8>> {
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    rgb.write_with_encoder(encoder)?;
    Ok(buf)
}

fn jpeg_roundtrip(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let bytes = jpeg_bytes(img, quality)?;
    let decoded = image::load_from_memory(&bytes)?.to_rgb8();
    Ok(ImageTensor::from_rgb8(&decoded))
}

/// `round(x * (2^b - 1)) / (2^b - 1)` with halves rounding up.
fn bit_depth(img: &ImageTensor, bits: u32) -> ImageTensor {
    let levels = ((1u32 << bits) - 1) as f64;
    let mut data = img.data().clone();
    data.mapv_inplace(|v| (v * levels + 0.5).floor() / levels);
    ImageTensor::from_clamped(data)
}

fn gaussian_noise(img: &ImageTensor, sigma: f64, seed: u64) -> Result<ImageTensor> {
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidStrength(format!("gaussian_noise: {e}")))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut data = img.data().clone();
    for v in data.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(ImageTensor::from_clamped(data))
}

/// Per-channel k-by-k median with replicate borders.
fn median_blur(img: &ImageTensor, kernel: usize) -> ImageTensor {
    let (h, w, _) = img.data().dim();
    let half = kernel / 2;
    let src = img.data();
    let mut out = src.clone();
    let mut window = Vec::with_capacity(kernel * kernel);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                window.clear();
                for dy in 0..kernel {
                    let sy = (y + dy).saturating_sub(half).min(h - 1);
                    for dx in 0..kernel {
                        let sx = (x + dx).saturating_sub(half).min(w - 1);
                        window.push(src[[sy, sx, c]]);
                    }
                }
                let mid = window.len() / 2;
                window.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
                out[[y, x, c]] = window[mid];
            }
        }
    }
    ImageTensor::from_clamped(out)
}

/// Joint-color non-local means: each pixel becomes a weighted mean over
/// a 21x21 search window, weighted by the similarity of 7x7 patches
/// summed across channels, with replicate borders. Weights are a convex
/// combination, so the output never leaves the input's value range.
fn nonlocal_means(img: &ImageTensor, h_param: f64) -> ImageTensor {
    const PATCH_RADIUS: isize = 3;
    const SEARCH_RADIUS: isize = 10;
    let (height, width, _) = img.data().dim();
    let src = img.data();
    let hh = height as isize;
    let ww = width as isize;
    let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
    let patch_pixels = (2 * PATCH_RADIUS + 1) * (2 * PATCH_RADIUS + 1);
    let inv_norm = 1.0 / (patch_pixels as f64 * 3.0 * h_param * h_param);

    let mut out = src.clone();
    for y in 0..hh {
        for x in 0..ww {
            let mut weight_sum = 0.0;
            let mut acc = [0.0f64; 3];
            for qy in (y - SEARCH_RADIUS)..=(y + SEARCH_RADIUS) {
                for qx in (x - SEARCH_RADIUS)..=(x + SEARCH_RADIUS) {
                    let mut d2 = 0.0;
                    for py in -PATCH_RADIUS..=PATCH_RADIUS {
                        for px in -PATCH_RADIUS..=PATCH_RADIUS {
                            let ay = clamp(y + py, hh);
                            let ax = clamp(x + px, ww);
                            let by = clamp(qy + py, hh);
                            let bx = clamp(qx + px, ww);
                            for c in 0..3 {
                                let diff = src[[ay, ax, c]] - src[[by, bx, c]];
                                d2 += diff * diff;
                            }
                        }
                    }
                    let weight = (-d2 * inv_norm).exp();
                    let sy = clamp(qy, hh);
                    let sx = clamp(qx, ww);
                    weight_sum += weight;
                    for c in 0..3 {
                        acc[c] += weight * src[[sy, sx, c]];
                    }
                }
            }
            for c in 0..3 {
                out[[y as usize, x as usize, c]] = acc[c] / weight_sum;
            }
        }
    }
    ImageTensor::from_clamped(out)
}

/// Quantizes to the 8-bit frame a camera hands the detector.
pub fn quantize_frame(img: &ImageTensor) -> ImageTensor {
    ImageTensor::from_rgb8(&img.to_rgb8())
}

/// Splitmix finalizer deriving one noise seed per image. The stream
/// separates attack composites from benign images so their noise draws
/// never alias.
fn image_seed(seed: u64, index: usize, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xd1b5_4a32_d192_ed03))
        .wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Attack success rate with the defense applied to every composite.
/// Each composite is quantized to 8 bits first; `None` runs the same
/// camera pipeline with no defense.
pub fn evaluate_defended(
    patch: &ImageTensor,
    backgrounds: &[ImageTensor],
    cases: &[CompositeCase],
    detector: &dyn DetectorBackend,
    params: &JudgeParams,
    defense: Option<&DefenseSpec>,
    seed: u64,
) -> Result<EvalReport> {
    let detectors: [&dyn DetectorBackend; 1] = [detector];
    evaluate_transformed(patch, backgrounds, cases, &detectors, params, &|index, img| {
        let frame = quantize_frame(&img);
        match defense {
            Some(spec) => apply_defense(&frame, spec, image_seed(seed, index, 0)),
            None => Ok(frame),
        }
    })
}

/// Mean average precision of the detector on the defended benign set,
/// through the same 8-bit camera pipeline as [`evaluate_defended`].
pub fn benign_ap(
    detector: &dyn DetectorBackend,
    benign: &[(ImageTensor, GroundTruth)],
    params: &JudgeParams,
    map_iou: f64,
    defense: Option<&DefenseSpec>,
    seed: u64,
) -> Result<f64> {
    if benign.is_empty() {
        return Err(Error::Config("benign evaluation needs at least one image".into()));
    }
    let samples: Vec<(DetectionSet, GroundTruth)> = benign
        .par_iter()
        .enumerate()
        .map(|(index, (img, gt))| {
            let frame = quantize_frame(img);
            let defended = match defense {
                Some(spec) => apply_defense(&frame, spec, image_seed(seed, index, 1))?,
                None => frame,
            };
            let detections =
                detector.detect_nms(&defended, params.score_thresh, params.iou_thresh)?;
            Ok((detections, gt.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_average_precision(&samples, detector.class_count(), map_iou)
}

/// One sweep row: a defense setting with its attack and benign scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub spec: DefenseSpec,
    pub asr: f64,
    pub ap: f64,
}

/// Runs every spec over the attack cases and the benign set.
#[allow(clippy::too_many_arguments)]
pub fn defense_sweep(
    patch: &ImageTensor,
    backgrounds: &[ImageTensor],
    cases: &[CompositeCase],
    detector: &dyn DetectorBackend,
    params: &JudgeParams,
    specs: &[DefenseSpec],
    benign: &[(ImageTensor, GroundTruth)],
    map_iou: f64,
    seed: u64,
) -> Result<Vec<DefenseRow>> {
    if specs.is_empty() {
        return Err(Error::Config("defense sweep needs at least one spec".into()));
    }
    specs
        .iter()
        .map(|spec| {
            let report =
                evaluate_defended(patch, backgrounds, cases, detector, params, Some(spec), seed)?;
            let ap = benign_ap(detector, benign, params, map_iou, Some(spec), seed)?;
            Ok(DefenseRow { spec: *spec, asr: report.per_detector[0].asr, ap })
        })
        .collect()
}

/// Renders sweep rows as CSV with columns kind, strength, asr, ap.
pub fn sweep_csv(rows: &[DefenseRow]) -> String {
    let mut out = String::from("kind,strength,asr,ap\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.spec.kind, row.spec.strength, row.asr, row.ap
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{render_sign, TemplateDetector};
    use crate::image::Grid;
    use crate::simulate::{make_cases, synthesize_backgrounds, synthesize_benign_set};
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(kind: DefenseKind, strength: f64) -> DefenseSpec {
        DefenseSpec { kind, strength }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ImageTensor::from_clamped(Grid::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0)))
    }

    #[test]
    fn validation_accepts_documented_grids() {
        for s in standard_grid() {
            s.validate().unwrap();
        }
    }

    #[test]
    fn validation_rejects_out_of_bounds_strengths() {
        let bad = [
            spec(DefenseKind::Jpeg, 0.0),
            spec(DefenseKind::Jpeg, 101.0),
            spec(DefenseKind::Jpeg, 50.5),
            spec(DefenseKind::BitDepth, 0.0),
            spec(DefenseKind::BitDepth, 9.0),
            spec(DefenseKind::BitDepth, 2.5),
            spec(DefenseKind::GaussianNoise, -0.1),
            spec(DefenseKind::GaussianNoise, f64::NAN),
            spec(DefenseKind::MedianBlur, 1.0),
            spec(DefenseKind::MedianBlur, 4.0),
            spec(DefenseKind::MedianBlur, 3.5),
            spec(DefenseKind::NonlocalMeans, 0.0),
            spec(DefenseKind::NonlocalMeans, -5.0),
        ];
        for s in bad {
            assert!(
                matches!(s.validate(), Err(Error::InvalidStrength(_))),
                "expected rejection for {s:?}"
            );
            assert!(matches!(
                apply_defense(&random_image(4, 4, 0), &s, 0),
                Err(Error::InvalidStrength(_))
            ));
        }
        assert!(DefenseSpec::new(DefenseKind::GaussianNoise, 0.0).is_ok());
    }

    #[test]
    fn bit_depth_matches_hand_rounding() {
        let mut data = Grid::zeros((1, 2, 3));
        data[[0, 0, 0]] = 0.4;
        data[[0, 1, 0]] = 0.6;
        data[[0, 0, 1]] = 0.5;
        let img = ImageTensor::new(data).unwrap();
        let one_bit = apply_defense(&img, &spec(DefenseKind::BitDepth, 1.0), 0).unwrap();
        assert_eq!(one_bit.data()[[0, 0, 0]], 0.0);
        assert_eq!(one_bit.data()[[0, 1, 0]], 1.0);
        assert_eq!(one_bit.data()[[0, 0, 1]], 1.0);
    }

    #[test]
    fn bit_depth_eight_is_identity_on_quantized_frames() {
        let frame = quantize_frame(&random_image(9, 7, 5));
        let defended = apply_defense(&frame, &spec(DefenseKind::BitDepth, 8.0), 0).unwrap();
        assert_eq!(frame, defended);
    }

    #[test]
    fn quantize_frame_is_idempotent() {
        let once = quantize_frame(&random_image(6, 6, 9));
        assert_eq!(once, quantize_frame(&once));
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let img = random_image(8, 8, 3);
        let out = apply_defense(&img, &spec(DefenseKind::GaussianNoise, 0.0), 7).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn noise_is_seeded_and_clamped() {
        let img = random_image(8, 8, 4);
        let s = spec(DefenseKind::GaussianNoise, 0.05);
        let a = apply_defense(&img, &s, 11).unwrap();
        let b = apply_defense(&img, &s, 11).unwrap();
        let c = apply_defense(&img, &s, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.mse(&img) > 0.0);
    }

    #[test]
    fn median_blur_matches_brute_force() {
        let img = random_image(6, 5, 8);
        let out = apply_defense(&img, &spec(DefenseKind::MedianBlur, 3.0), 0).unwrap();
        let (h, w, _) = img.data().dim();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut vals = Vec::new();
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                            let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                            vals.push(img.data()[[sy, sx, c]]);
                        }
                    }
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    assert_eq!(out.data()[[y, x, c]], vals[4]);
                }
            }
        }
    }

    #[test]
    fn median_blur_keeps_constant_images() {
        let img = ImageTensor::constant(7, 7, 0.42).unwrap();
        for kernel in [3.0, 5.0, 7.0, 9.0] {
            let out = apply_defense(&img, &spec(DefenseKind::MedianBlur, kernel), 0).unwrap();
            assert_eq!(img, out);
        }
    }

    #[test]
    fn median_blur_removes_impulse() {
        let mut data = Grid::from_elem((5, 5, 3), 0.3);
        data[[2, 2, 0]] = 1.0;
        let img = ImageTensor::new(data).unwrap();
        let out = apply_defense(&img, &spec(DefenseKind::MedianBlur, 3.0), 0).unwrap();
        assert_eq!(out.data()[[2, 2, 0]], 0.3);
    }

    #[test]
    fn jpeg_file_size_shrinks_with_quality() {
        let img = random_image(32, 32, 15);
        let sizes: Vec<usize> = [90u8, 70, 50, 30, 10]
            .iter()
            .map(|&q| jpeg_bytes(&img, q).unwrap().len())
            .collect();
        for pair in sizes.windows(2) {
            assert!(pair[1] <= pair[0], "sizes not monotone: {sizes:?}");
        }
    }

    #[test]
    fn jpeg_high_quality_stays_close() {
        let img = ImageTensor::constant(16, 16, 0.5).unwrap();
        let out = apply_defense(&img, &spec(DefenseKind::Jpeg, 90.0), 0).unwrap();
        assert!(out.mse(&img) < 1e-3);
    }

    #[test]
    fn nonlocal_means_keeps_constant_images_and_denoises() {
        let flat = ImageTensor::constant(9, 9, 0.6).unwrap();
        let out = apply_defense(&flat, &spec(DefenseKind::NonlocalMeans, 10.0), 0).unwrap();
        for (&a, &b) in flat.data().iter().zip(out.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let noisy =
            apply_defense(&flat, &spec(DefenseKind::GaussianNoise, 0.05), 21).unwrap();
        let denoised =
            apply_defense(&noisy, &spec(DefenseKind::NonlocalMeans, 20.0), 0).unwrap();
        assert!(denoised.mse(&flat) < noisy.mse(&flat));
    }

    #[test]
    fn defended_baseline_matches_no_op_specs() {
        let detector = TemplateDetector::default();
        let backgrounds = synthesize_backgrounds(2, 64, 64, 31).unwrap();
        let patch = render_sign(0, 32).unwrap();
        let cases =
            make_cases(&backgrounds, 32, 32, 12, (0.7, 1.0), (-10.0, 10.0), 32).unwrap();
        let params = JudgeParams { target_class: 0, score_thresh: 0.25, iou_thresh: 0.45 };
        let benign =
            synthesize_benign_set(&backgrounds, 3, 32, 9, (0.7, 1.0), (-10.0, 10.0), 1, 33)
                .unwrap();

        let base = evaluate_defended(&patch, &backgrounds, &cases, &detector, &params, None, 5)
            .unwrap();
        let base_ap = benign_ap(&detector, &benign, &params, 0.5, None, 5).unwrap();
        assert!(base.per_detector[0].asr > 0.5, "sign patch should be detected");

        for s in [spec(DefenseKind::GaussianNoise, 0.0), spec(DefenseKind::BitDepth, 8.0)] {
            let defended = evaluate_defended(
                &patch,
                &backgrounds,
                &cases,
                &detector,
                &params,
                Some(&s),
                5,
            )
            .unwrap();
            let ap = benign_ap(&detector, &benign, &params, 0.5, Some(&s), 5).unwrap();
            assert_eq!(base, defended, "no-op {s:?} changed the report");
            assert_eq!(base_ap, ap, "no-op {s:?} changed AP");
        }
    }

    #[test]
    fn benign_fixture_scores_perfect_ap_undefended() {
        let detector = TemplateDetector::default();
        let backgrounds = synthesize_backgrounds(3, 64, 64, 41).unwrap();
        let benign = synthesize_benign_set(
            &backgrounds,
            3,
            32,
            12,
            (1.0, 1.0),
            (0.0, 0.0),
            detector.stride(),
            42,
        )
        .unwrap();
        let params = JudgeParams { target_class: 0, score_thresh: 0.25, iou_thresh: 0.45 };
        let ap = benign_ap(&detector, &benign, &params, 0.5, None, 0).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn sweep_reports_one_row_per_spec() {
        let detector = TemplateDetector::default();
        let backgrounds = synthesize_backgrounds(2, 48, 48, 51).unwrap();
        let patch = render_sign(1, 24).unwrap();
        let cases = make_cases(&backgrounds, 24, 24, 6, (0.8, 1.0), (-5.0, 5.0), 52).unwrap();
        let params = JudgeParams { target_class: 1, score_thresh: 0.25, iou_thresh: 0.45 };
        let benign =
            synthesize_benign_set(&backgrounds, 3, 24, 6, (0.8, 1.0), (-5.0, 5.0), 1, 53).unwrap();
        let specs = [
            spec(DefenseKind::BitDepth, 8.0),
            spec(DefenseKind::GaussianNoise, 0.0),
            spec(DefenseKind::MedianBlur, 3.0),
        ];

        let rows =
            defense_sweep(&patch, &backgrounds, &cases, &detector, &params, &specs, &benign, 0.5, 7)
                .unwrap();
        assert_eq!(rows.len(), specs.len());
        for (row, s) in rows.iter().zip(&specs) {
            assert_eq!(row.spec, *s);
            assert!((0.0..=1.0).contains(&row.asr));
            assert!((0.0..=1.0).contains(&row.ap));
        }

        let csv = sweep_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "kind,strength,asr,ap");
        assert_eq!(lines.len(), specs.len() + 1);
        assert!(lines[1].starts_with("bit_depth,8,"));
        assert!(lines[3].starts_with("median_blur,3,"));
    }

    #[test]
    fn empty_sweep_inputs_are_config_errors() {
        let detector = TemplateDetector::default();
        let backgrounds = synthesize_backgrounds(1, 48, 48, 61).unwrap();
        let patch = render_sign(0, 24).unwrap();
        let cases = make_cases(&backgrounds, 24, 24, 2, (0.8, 1.0), (0.0, 0.0), 62).unwrap();
        let params = JudgeParams { target_class: 0, score_thresh: 0.25, iou_thresh: 0.45 };
        let benign =
            synthesize_benign_set(&backgrounds, 1, 24, 2, (0.8, 1.0), (0.0, 0.0), 1, 63).unwrap();

        assert!(matches!(
            defense_sweep(
                &patch,
                &backgrounds,
                &cases,
                &detector,
                &params,
                &[],
                &benign,
                0.5,
                0
            ),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            benign_ap(&detector, &[], &params, 0.5, None, 0),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn every_defense_preserves_shape_and_range(
            seed in 0u64..1000,
            h in 4usize..11,
            w in 4usize..11,
        ) {
            let img = random_image(h, w, seed);
            for s in [
                spec(DefenseKind::Jpeg, 30.0),
                spec(DefenseKind::BitDepth, 2.0),
                spec(DefenseKind::GaussianNoise, 0.08),
                spec(DefenseKind::MedianBlur, 5.0),
                spec(DefenseKind::NonlocalMeans, 15.0),
            ] {
                let out = apply_defense(&img, &s, seed).unwrap();
                prop_assert_eq!(out.height(), h);
                prop_assert_eq!(out.width(), w);
                prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
