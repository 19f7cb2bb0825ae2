//! Randomized digital-simulation protocol: placement sampling, background
//! corpora, composite judging, and attack-success-rate reports.
//!
//! A simulation case fixes one background and one placement. Evaluating a
//! patch composites it per case and asks each detector whether it fires on
//! the pasted region with the target class. The same case list is reused
//! across detectors so their success rates are comparable.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::{self, DetectorBackend, GroundTruth};
use crate::diffusion::DiffusionBackend;
use crate::embedding::SimilarityBackend;
use crate::error::{Error, Result};
use crate::geometry::{self, iou, BBox, Placement};
use crate::image::{Grid, ImageTensor};
use crate::optimizer::{run_attack, AttackConfig};
use crate::prompts::PromptSegment;

/// Environment variable naming the cache directory for corpus filtering
/// verdicts.
pub const CACHE_ENV: &str = "SIGNFORGE_CACHE";

/// Minimum IOU between a detection and the pasted region for the
/// detection to count as a success. Inclusive.
pub const SUCCESS_IOU: f64 = 0.5;

const PLACEMENT_ATTEMPTS: usize = 64;

fn uniform_draw(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        Uniform::new(lo, hi).sample(rng)
    } else {
        lo
    }
}

/// Draws one placement: scale and rotation uniform over their ranges, the
/// pasted envelope's center uniform over every position that keeps the
/// envelope inside the background. Scale-rotation pairs whose envelope
/// cannot fit are redrawn; the error is returned only when no feasible
/// pair turns up within the attempt budget.
pub fn sample_placement(
    rng: &mut ChaCha20Rng,
    bg_h: usize,
    bg_w: usize,
    patch_h: usize,
    patch_w: usize,
    scale_range: (f64, f64),
    rotation_range_deg: (f64, f64),
) -> Result<Placement> {
    let (s_lo, s_hi) = scale_range;
    let (r_lo, r_hi) = rotation_range_deg;
    if !(s_lo > 0.0 && s_lo <= s_hi && s_hi.is_finite()) {
        return Err(Error::Config(format!("bad scale range {s_lo}..{s_hi}")));
    }
    if !(r_lo <= r_hi && r_lo.is_finite() && r_hi.is_finite()) {
        return Err(Error::Config(format!("bad rotation range {r_lo}..{r_hi}")));
    }
    for _ in 0..PLACEMENT_ATTEMPTS {
        let scale = uniform_draw(rng, s_lo, s_hi);
        let rotation_deg = uniform_draw(rng, r_lo, r_hi);
        let (sh, sw) = geometry::scaled_dims(patch_h, patch_w, scale);
        let (rh, rw) = geometry::rotated_dims(sh, sw, rotation_deg);
        if rh > bg_h || rw > bg_w {
            continue;
        }
        let cx = uniform_draw(rng, rw as f64 / 2.0, bg_w as f64 - rw as f64 / 2.0);
        let cy = uniform_draw(rng, rh as f64 / 2.0, bg_h as f64 - rh as f64 / 2.0);
        let target_box = BBox::new(
            cx - sw as f64 / 2.0,
            cy - sh as f64 / 2.0,
            cx + sw as f64 / 2.0,
            cy + sh as f64 / 2.0,
        )?;
        return Placement::new(target_box, scale, rotation_deg);
    }
    Err(Error::PlacementOutOfBounds(format!(
        "no {patch_w}x{patch_h} patch placement at scales {s_lo}..{s_hi} fits a \
         {bg_w}x{bg_h} background after {PLACEMENT_ATTEMPTS} attempts"
    )))
}

/// One simulation case: a background pick plus a placement inside it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositeCase {
    pub background_index: usize,
    pub placement: Placement,
}

/// Samples `count` cases over a corpus. Backgrounds are drawn uniformly
/// and may differ in size; each placement is sampled to fit its own
/// background.
pub fn make_cases(
    backgrounds: &[ImageTensor],
    patch_h: usize,
    patch_w: usize,
    count: usize,
    scale_range: (f64, f64),
    rotation_range_deg: (f64, f64),
    seed: u64,
) -> Result<Vec<CompositeCase>> {
    if backgrounds.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(count);
    for _ in 0..count {
        let background_index = rng.gen_range(0..backgrounds.len());
        let bg = &backgrounds[background_index];
        let placement = sample_placement(
            &mut rng,
            bg.height(),
            bg.width(),
            patch_h,
            patch_w,
            scale_range,
            rotation_range_deg,
        )?;
        cases.push(CompositeCase { background_index, placement });
    }
    Ok(cases)
}

/// Success criteria for judging one composite.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JudgeParams {
    pub target_class: usize,
    /// Score threshold fed to the detector's suppression stage.
    pub score_thresh: f64,
    /// IOU threshold fed to the detector's suppression stage.
    pub iou_thresh: f64,
}

/// Whether the detector reads the pasted region as the target class.
/// Among surviving detections whose IOU with the paste anchor reaches
/// [`SUCCESS_IOU`], the top-scoring one must predict the target class;
/// a score tie counts in the target's favor. Partial views of a sign can
/// fire lower-scored boxes of a confusable class next to it, and those
/// must not decide what the region reads as.
pub fn judge_success(
    detector: &dyn DetectorBackend,
    composite: &ImageTensor,
    anchor: &BBox,
    params: &JudgeParams,
) -> Result<bool> {
    let detections = detector.detect_nms(composite, params.score_thresh, params.iou_thresh)?;
    let mut best_target = f64::NEG_INFINITY;
    let mut best_other = f64::NEG_INFINITY;
    for p in &detections.proposals {
        if iou(&p.bbox, anchor) < SUCCESS_IOU {
            continue;
        }
        if p.predicted_class == params.target_class {
            best_target = best_target.max(p.score());
        } else {
            best_other = best_other.max(p.score());
        }
    }
    Ok(best_target.is_finite() && best_target >= best_other)
}

/// Success rate of one detector over a case list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub detector: String,
    pub total: usize,
    pub successes: usize,
    pub asr: f64,
}

/// Per-detector success rates plus their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_detector: Vec<DetectorReport>,
    pub aasr: f64,
}

/// Composites the patch for every case and judges each detector on the
/// identical composites. Cases run in parallel; the report is independent
/// of thread scheduling.
pub fn evaluate(
    patch: &ImageTensor,
    backgrounds: &[ImageTensor],
    cases: &[CompositeCase],
    detectors: &[&dyn DetectorBackend],
    params: &JudgeParams,
) -> Result<EvalReport> {
    evaluate_transformed(patch, backgrounds, cases, detectors, params, &|_, img| Ok(img))
}

/// [`evaluate`] with a hook that rewrites each composite before any
/// detector sees it, the insertion point for input-transform defenses.
/// The hook receives the case index so seeded transforms can derive one
/// noise stream per case and stay deterministic under parallel
/// scheduling.
pub fn evaluate_transformed(
    patch: &ImageTensor,
    backgrounds: &[ImageTensor],
    cases: &[CompositeCase],
    detectors: &[&dyn DetectorBackend],
    params: &JudgeParams,
    transform: &(dyn Fn(usize, ImageTensor) -> Result<ImageTensor> + Sync),
) -> Result<EvalReport> {
    Ok(evaluate_verdicts(patch, backgrounds, cases, detectors, params, transform)?.report)
}

/// Per-case verdict matrix alongside the aggregated report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseVerdicts {
    /// Indexed `[case][detector]`, matching the input orders.
    pub per_case: Vec<Vec<bool>>,
    pub report: EvalReport,
}

/// [`evaluate_transformed`] keeping each case's per-detector verdict.
pub fn evaluate_verdicts(
    patch: &ImageTensor,
    backgrounds: &[ImageTensor],
    cases: &[CompositeCase],
    detectors: &[&dyn DetectorBackend],
    params: &JudgeParams,
    transform: &(dyn Fn(usize, ImageTensor) -> Result<ImageTensor> + Sync),
) -> Result<CaseVerdicts> {
    if cases.is_empty() {
        return Err(Error::Config("evaluation needs at least one case".into()));
    }
    if detectors.is_empty() {
        return Err(Error::Config("evaluation needs at least one detector".into()));
    }
    let verdicts: Vec<Vec<bool>> = cases
        .par_iter()
        .enumerate()
        .map(|(index, case)| {
            let bg = backgrounds.get(case.background_index).ok_or_else(|| {
                Error::Config(format!(
                    "case references background {} but corpus has {}",
                    case.background_index,
                    backgrounds.len()
                ))
            })?;
            let embedded = geometry::emb(bg, patch, &case.placement)?;
            let frame = transform(index, embedded.composite)?;
            detectors
                .iter()
                .map(|d| judge_success(*d, &frame, &embedded.anchor, params))
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let per_detector: Vec<DetectorReport> = detectors
        .iter()
        .enumerate()
        .map(|(di, d)| {
            let successes = verdicts.iter().filter(|v| v[di]).count();
            DetectorReport {
                detector: d.name().to_string(),
                total: cases.len(),
                successes,
                asr: successes as f64 / cases.len() as f64,
            }
        })
        .collect();
    let aasr = per_detector.iter().map(|r| r.asr).sum::<f64>() / per_detector.len() as f64;
    Ok(CaseVerdicts { per_case: verdicts, report: EvalReport { per_detector, aasr } })
}

pub(crate) fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            let e = e.to_ascii_lowercase();
            e == "png" || e == "jpg" || e == "jpeg"
        })
        .unwrap_or(false)
}

fn verdict_key(file_bytes: &[u8], detector: &dyn DetectorBackend, params: &JudgeParams) -> String {
    let mut hasher = Sha256::new();
    hasher.update(detector.name().as_bytes());
    hasher.update(params.score_thresh.to_le_bytes());
    hasher.update(params.iou_thresh.to_le_bytes());
    hasher.update(file_bytes);
    hex::encode(hasher.finalize())
}

/// Loads every PNG or JPEG under `dir` in file-name order. With a filter
/// detector, images on which it already fires any detection are dropped so
/// later successes cannot be credited to the background itself. Verdicts
/// are memoized in `cache_dir`, keyed by detector name, thresholds, and
/// file content.
pub fn load_backgrounds_cached(
    dir: &Path,
    filter: Option<(&dyn DetectorBackend, &JudgeParams)>,
    cache_dir: Option<&Path>,
) -> Result<Vec<ImageTensor>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();

    if let Some(cache) = cache_dir {
        fs::create_dir_all(cache)?;
    }
    let mut kept = Vec::new();
    for path in files {
        let img = ImageTensor::read(&path)?;
        let keep = match filter {
            None => true,
            Some((detector, params)) => {
                let cached = cache_dir.and_then(|cache| {
                    let bytes = fs::read(&path).ok()?;
                    let file = cache.join(format!("{}.verdict", verdict_key(&bytes, detector, params)));
                    match fs::read_to_string(&file).ok()?.trim() {
                        "keep" => Some(true),
                        "drop" => Some(false),
                        _ => None,
                    }
                });
                match cached {
                    Some(keep) => keep,
                    None => {
                        let clean = detector
                            .detect_nms(&img, params.score_thresh, params.iou_thresh)?
                            .is_empty();
                        if let Some(cache) = cache_dir {
                            let bytes = fs::read(&path)?;
                            let file = cache
                                .join(format!("{}.verdict", verdict_key(&bytes, detector, params)));
                            fs::write(file, if clean { "keep" } else { "drop" })?;
                        }
                        clean
                    }
                }
            }
        };
        if keep {
            kept.push(img);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(kept)
}

/// [`load_backgrounds_cached`] with the cache directory taken from the
/// `SIGNFORGE_CACHE` environment variable when set.
pub fn load_backgrounds(
    dir: &Path,
    filter: Option<(&dyn DetectorBackend, &JudgeParams)>,
) -> Result<Vec<ImageTensor>> {
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    load_backgrounds_cached(dir, filter, cache.as_deref())
}

/// Deterministic smooth background fields: a per-channel base tone plus a
/// gentle linear gradient and one low-frequency wave. Amplitudes are kept
/// small enough that template detectors stay silent on them.
pub fn synthesize_backgrounds(
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidImage("background dimensions must be positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut base = [0.0; 3];
        let mut gx = [0.0; 3];
        let mut gy = [0.0; 3];
        let mut amp = [0.0; 3];
        let mut fx = [0.0; 3];
        let mut fy = [0.0; 3];
        let mut phase = [0.0; 3];
        for c in 0..3 {
            base[c] = rng.gen_range(0.35..0.65);
            gx[c] = rng.gen_range(-0.06..0.06);
            gy[c] = rng.gen_range(-0.06..0.06);
            amp[c] = rng.gen_range(0.0..0.02);
            fx[c] = rng.gen_range(-1.5..1.5);
            fy[c] = rng.gen_range(-1.5..1.5);
            phase[c] = rng.gen_range(0.0..1.0);
        }
        let data = Grid::from_shape_fn((height, width, 3), |(y, x, c)| {
            let u = x as f64 / width as f64 - 0.5;
            let v = y as f64 / height as f64 - 0.5;
            let wave = (std::f64::consts::TAU * (fx[c] * u + fy[c] * v + phase[c])).sin();
            base[c] + gx[c] * u + gy[c] * v + amp[c] * wave
        });
        out.push(ImageTensor::from_clamped(data));
    }
    Ok(out)
}

/// Pastes one canonical sign per case onto the backgrounds, cycling the
/// class, and returns each composite with its ground-truth box. This is
/// the benign fixture for measuring what a defense costs in ordinary
/// detection quality.
///
/// `align` snaps each paste origin up-left onto that pixel grid; 1
/// leaves origins free. A fixture aligned to the detector's window
/// stride gives every unrotated full-scale sign an exactly aligned
/// candidate window, so the undefended baseline starts from perfect
/// average precision.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_benign_set(
    backgrounds: &[ImageTensor],
    class_count: usize,
    sign_size: usize,
    count: usize,
    scale_range: (f64, f64),
    rotation_range_deg: (f64, f64),
    align: usize,
    seed: u64,
) -> Result<Vec<(ImageTensor, GroundTruth)>> {
    if class_count == 0 {
        return Err(Error::Config("benign set needs at least one class".into()));
    }
    if align == 0 {
        return Err(Error::Config("alignment grid must be positive".into()));
    }
    let signs: Vec<ImageTensor> = (0..class_count)
        .map(|class| detection::render_sign(class, sign_size))
        .collect::<Result<_>>()?;
    let cases = make_cases(
        backgrounds,
        sign_size,
        sign_size,
        count,
        scale_range,
        rotation_range_deg,
        seed,
    )?;
    cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let class = i % class_count;
            let bg = &backgrounds[case.background_index];
            let mut place = case.placement;
            if align > 1 {
                let geom = geometry::placement_geometry(
                    bg.height(),
                    bg.width(),
                    sign_size,
                    sign_size,
                    &place,
                )?;
                let dy = (geom.paste_y % align) as f64;
                let dx = (geom.paste_x % align) as f64;
                place.target_box.y_min -= dy;
                place.target_box.y_max -= dy;
                place.target_box.x_min -= dx;
                place.target_box.x_max -= dx;
            }
            let embedded = geometry::emb(bg, &signs[class], &place)?;
            Ok((embedded.composite, vec![(embedded.anchor, class)]))
        })
        .collect()
}

/// Outcome of one benign-text variant in a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct PromptSweepEntry {
    pub benign_text: String,
    pub rendered_prompt: String,
    pub best_loss: f64,
    pub best_iteration: usize,
    pub report: EvalReport,
}

/// Reruns the attack once per benign-text variant, swapping the variant
/// into the base prompt's benign slots, then evaluates each best patch on
/// the shared case list.
#[allow(clippy::too_many_arguments)]
pub fn prompt_sweep(
    backend: &dyn DiffusionBackend,
    detector: &dyn DetectorBackend,
    embedder: &dyn SimilarityBackend,
    backgrounds: &[ImageTensor],
    config: &AttackConfig,
    variants: &[String],
    cases: &[CompositeCase],
    eval_detectors: &[&dyn DetectorBackend],
    judge: &JudgeParams,
) -> Result<Vec<PromptSweepEntry>> {
    if variants.is_empty() {
        return Err(Error::Config("prompt sweep needs at least one variant".into()));
    }
    let mut entries = Vec::with_capacity(variants.len());
    for text in variants {
        let mut cfg = config.clone();
        cfg.prompt = config.prompt.with_benign_replaced(&[PromptSegment::benign(text.clone())?])?;
        let run = run_attack(backend, detector, embedder, backgrounds, &cfg)?;
        let report = evaluate(&run.best_image, backgrounds, cases, eval_detectors, judge)?;
        entries.push(PromptSweepEntry {
            benign_text: text.clone(),
            rendered_prompt: cfg.prompt.render(),
            best_loss: run.best_loss,
            best_iteration: run.best_iteration,
            report,
        });
    }
    Ok(entries)
}

/// Delegating detector that counts `detect_raw` calls. Useful for
/// verifying that corpus caching skips repeat work.
pub struct CountingDetector<D: DetectorBackend> {
    inner: D,
    calls: AtomicUsize,
}

impl<D: DetectorBackend> CountingDetector<D> {
    pub fn new(inner: D) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<D: DetectorBackend> DetectorBackend for CountingDetector<D> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    fn detect_raw(&self, img: &ImageTensor) -> Result<crate::detection::DetectionSet> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.detect_raw(img)
    }

    fn differentiable(&self) -> bool {
        self.inner.differentiable()
    }

    fn score_backward(
        &self,
        img: &ImageTensor,
        seeds: &[crate::detection::ScoreSeed],
    ) -> Result<Grid> {
        self.inner.score_backward(img, seeds)
    }
}
