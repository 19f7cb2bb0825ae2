//! The attack loop: optimizes the chain's initial latent and final-step
//! null text so the decoded patch, pasted into backgrounds under random
//! scale and rotation, draws target-class detections.
//!
//! Each iteration decodes the current patch, picks the crop or
//! whole-image branch, samples expectation-over-transforms placements,
//! and chains the loss gradients backwards by hand: detector score
//! adjoint, composite adjoint, patch transform adjoint, decoder adjoint,
//! then the one-step chain approximations for the two optimized inputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detection::{DetectionSet, DetectorBackend, ScoreSeed};
use crate::diffusion::{
    ddim_invert, generate, grad_phi_big_t_approx, grad_x_big_t_approx, DiffusionBackend,
    InversionConfig, NullSchedule,
};
use crate::embedding::SimilarityBackend;
use crate::error::{Error, Result};
use crate::geometry::{crop, crop_backward, emb, emb_backward, top_k_indices};
use crate::image::{Grid, ImageTensor};
use crate::losses::{detection_loss, similarity_loss, total_loss};
use crate::prompts::StructuredPrompt;
use crate::simulate::sample_placement;

/// How the initial latent and null texts are seeded.
#[derive(Debug, Clone)]
pub enum InitStrategy {
    /// Latent centered on the chain preimage of mid-gray with Gaussian
    /// jitter; null texts start at zero.
    Gaussian { sigma: f64 },
    /// Inversion of a given image.
    FromImage(ImageTensor),
    /// Inversion of the canonical rendering of the target class.
    FromPrompt,
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub target_class: usize,
    pub prompt: StructuredPrompt,
    pub iterations: usize,
    /// Proposals kept by the anchor-IOU filter.
    pub top_k: usize,
    /// Weight of the detection loss in the total.
    pub lambda: f64,
    /// Learning rate on the initial latent.
    pub beta: f64,
    /// Learning rate on the final-step null text.
    pub gamma: f64,
    /// Placements sampled per iteration.
    pub eot_samples: usize,
    /// Score every filtered proposal is pushed to reach.
    pub t_score: f64,
    /// Suppression thresholds for branch decisions and evaluation.
    pub score_thresh: f64,
    pub iou_thresh: f64,
    pub scale_range: (f64, f64),
    pub rotation_range_deg: (f64, f64),
    pub use_detection_loss: bool,
    pub use_similarity_loss: bool,
    /// When off, the detection loss runs over every raw proposal
    /// instead of the anchor-filtered top k.
    pub use_bbox_filter: bool,
    pub init: InitStrategy,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(target_class: usize, prompt: StructuredPrompt) -> Self {
        Self {
            target_class,
            prompt,
            iterations: 200,
            top_k: 10,
            lambda: 1.0,
            beta: 0.05,
            gamma: 0.01,
            eot_samples: 4,
            t_score: 0.5,
            score_thresh: 0.25,
            iou_thresh: 0.45,
            scale_range: (0.4, 1.0),
            rotation_range_deg: (-15.0, 15.0),
            use_detection_loss: true,
            use_similarity_loss: true,
            use_bbox_filter: true,
            init: InitStrategy::Gaussian { sigma: 0.02 },
            seed: 0,
        }
    }

    fn validate(&self, detector: &dyn DetectorBackend) -> Result<()> {
        if self.target_class >= detector.class_count() {
            return Err(Error::Config(format!(
                "target class {} outside detector's {} classes",
                self.target_class,
                detector.class_count()
            )));
        }
        if self.iterations == 0 || self.top_k == 0 || self.eot_samples == 0 {
            return Err(Error::Config(
                "iterations, top_k, and eot_samples must be positive".into(),
            ));
        }
        if !(self.beta > 0.0 && self.gamma >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("learning rates and lambda must not be negative".into()));
        }
        if !(self.t_score > 0.0 && self.t_score <= 1.0) {
            return Err(Error::Config(format!("t_score {} outside (0,1]", self.t_score)));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("bad scale range {lo}..{hi}")));
        }
        if self.rotation_range_deg.0 > self.rotation_range_deg.1 {
            return Err(Error::Config("bad rotation range".into()));
        }
        if self.use_detection_loss && !detector.differentiable() {
            return Err(Error::BackendFailure(format!(
                "detection loss needs score gradients, {} has none",
                detector.name()
            )));
        }
        Ok(())
    }
}

/// Which piece of the decoded image fed the transform pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// A detected target-class region was cropped out.
    Crop,
    /// The whole decoded image was used.
    Whole,
}

/// One row of the optimization trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub similarity: f64,
    pub detection: f64,
    pub total: f64,
    pub branch: Branch,
    pub grad_latent_norm: f64,
    pub grad_null_norm: f64,
}

/// Mutable optimization state, checkpointable mid-run.
#[derive(Debug, Clone)]
pub struct AttackState {
    pub x_big_t: Grid,
    /// Null text per step; only the final step's entry is optimized.
    pub null_texts: Vec<Array1<f64>>,
    /// Prompt conditioning, fixed during the attack.
    pub cond: Array1<f64>,
    /// Next iteration index.
    pub iteration: usize,
    /// Consumed position of the placement RNG stream.
    pub rng_word_pos: u128,
    pub best_total: f64,
    pub best_iteration: usize,
    pub best_image: Option<ImageTensor>,
}

/// Finished attack: the best and final decoded patches plus the trace.
#[derive(Debug, Clone)]
pub struct AttackRun {
    pub best_image: ImageTensor,
    pub best_loss: f64,
    pub best_iteration: usize,
    pub final_image: ImageTensor,
    pub history: Vec<IterationRecord>,
    pub state: AttackState,
}

fn l2(grid: &Grid) -> f64 {
    grid.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Builds the initial state for a configuration.
pub fn init_attack(
    backend: &dyn DiffusionBackend,
    config: &AttackConfig,
) -> Result<AttackState> {
    let schedule = backend.schedule();
    let steps = schedule.steps();
    let dim = backend.embedding_dim();
    let cond = backend.prompt_embedding(&config.prompt.render())?;
    let (x_big_t, null_texts) = match &config.init {
        InitStrategy::Gaussian { sigma } => {
            let mut rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0xa5a5_5a5a_1234_8765);
            // Mid-gray pulls the zero-noise chain output to 0.5, keeping
            // the decoded start unsaturated.
            let base = 0.5 * schedule.alpha(steps).sqrt();
            let x = Grid::from_shape_fn(backend.latent_shape(), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                base + sigma * z
            });
            (x, vec![Array1::zeros(dim); steps])
        }
        InitStrategy::FromImage(img) => {
            let inv = ddim_invert(backend, img, &cond, &InversionConfig::default())?;
            (inv.x_big_t, inv.null_texts)
        }
        InitStrategy::FromPrompt => {
            let (h, w, _) = backend.latent_shape();
            let sign = crate::detection::render_sign(config.target_class, h.min(w))?;
            let inv = ddim_invert(backend, &sign, &cond, &InversionConfig::default())?;
            (inv.x_big_t, inv.null_texts)
        }
    };
    Ok(AttackState {
        x_big_t,
        null_texts,
        cond,
        iteration: 0,
        rng_word_pos: 0,
        best_total: f64::INFINITY,
        best_iteration: 0,
        best_image: None,
    })
}

/// Runs a fresh attack to `config.iterations`.
pub fn run_attack(
    backend: &dyn DiffusionBackend,
    detector: &dyn DetectorBackend,
    embedder: &dyn SimilarityBackend,
    backgrounds: &[ImageTensor],
    config: &AttackConfig,
) -> Result<AttackRun> {
    let state = init_attack(backend, config)?;
    continue_attack(backend, detector, embedder, backgrounds, config, state)
}

/// Advances an attack state to `config.iterations`. Resuming a loaded
/// checkpoint reproduces an uninterrupted run bit for bit.
pub fn continue_attack(
    backend: &dyn DiffusionBackend,
    detector: &dyn DetectorBackend,
    embedder: &dyn SimilarityBackend,
    backgrounds: &[ImageTensor],
    config: &AttackConfig,
    mut state: AttackState,
) -> Result<AttackRun> {
    config.validate(detector)?;
    if backgrounds.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let text_target = if config.use_similarity_loss {
        Some(embedder.embed_text(&config.prompt.masked()?.render())?)
    } else {
        None
    };
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_word_pos(state.rng_word_pos);

    let mut history = Vec::new();
    let mut final_image = None;
    while state.iteration < config.iterations {
        let record = attack_step(
            backend,
            detector,
            embedder,
            backgrounds,
            config,
            text_target.as_ref(),
            &mut state,
            &mut rng,
            &mut final_image,
        )?;
        history.push(record);
        state.rng_word_pos = rng.get_word_pos();
    }

    let final_image = match final_image {
        Some(img) => img,
        // Zero remaining iterations: decode the current state.
        None => {
            let null = NullSchedule::PerStep(state.null_texts.clone());
            generate(backend, &state.x_big_t, &state.cond, &null)?.image
        }
    };
    let best_image = state.best_image.clone().unwrap_or_else(|| final_image.clone());
    Ok(AttackRun {
        best_image,
        best_loss: state.best_total,
        best_iteration: state.best_iteration,
        final_image,
        history,
        state,
    })
}

/// One iteration: evaluate the objective at the current state, record
/// it, then take the gradient step.
#[allow(clippy::too_many_arguments)]
fn attack_step(
    backend: &dyn DiffusionBackend,
    detector: &dyn DetectorBackend,
    embedder: &dyn SimilarityBackend,
    backgrounds: &[ImageTensor],
    config: &AttackConfig,
    text_target: Option<&Array1<f64>>,
    state: &mut AttackState,
    rng: &mut ChaCha20Rng,
    final_image: &mut Option<ImageTensor>,
) -> Result<IterationRecord> {
    let null = NullSchedule::PerStep(state.null_texts.clone());
    let generated = generate(backend, &state.x_big_t, &state.cond, &null)?;
    let image = &generated.image;

    // Crop branch when the decoded image already contains a target-class
    // detection; otherwise the whole image is the patch.
    let self_dets = detector.detect_nms(image, config.score_thresh, config.iou_thresh)?;
    let crop_box = self_dets
        .proposals
        .iter()
        .filter(|p| p.predicted_class == config.target_class)
        .max_by(|a, b| a.score().partial_cmp(&b.score()).unwrap())
        .map(|p| p.bbox);
    let (patch, branch, region) = match crop_box {
        Some(bbox) => {
            let (patch, region) = crop(image, &bbox)?;
            (patch, Branch::Crop, Some(region))
        }
        None => (image.clone(), Branch::Whole, None),
    };

    let mut grad_patch = Grid::zeros(patch.data().dim());
    let mut detection_total = 0.0;
    let sample_weight = 1.0 / config.eot_samples as f64;
    for _ in 0..config.eot_samples {
        let bg = &backgrounds[rng.gen_range(0..backgrounds.len())];
        let place = sample_placement(
            rng,
            bg.height(),
            bg.width(),
            patch.height(),
            patch.width(),
            config.scale_range,
            config.rotation_range_deg,
        )?;
        let embedded = emb(bg, &patch, &place)?;
        let raw = detector.detect_raw(&embedded.composite)?;

        let (loss_d, seeds) = if raw.is_empty() {
            // No proposals to push; constant fallback with no gradient.
            (config.t_score * config.t_score, Vec::new())
        } else {
            let kept: Vec<usize> = if config.use_bbox_filter {
                top_k_indices(&raw, &embedded.anchor, config.top_k)?
            } else {
                (0..raw.len()).collect()
            };
            let filtered = DetectionSet {
                proposals: kept.iter().map(|&i| raw.proposals[i].clone()).collect(),
                source: raw.source,
            };
            let (loss_d, score_grads) =
                detection_loss(&filtered, config.target_class, config.t_score)?;
            let seeds: Vec<ScoreSeed> = kept
                .iter()
                .zip(score_grads.iter())
                .filter(|(_, g)| **g != 0.0)
                .map(|(&proposal, &g)| ScoreSeed {
                    proposal,
                    class: config.target_class,
                    weight: g * sample_weight,
                })
                .collect();
            (loss_d, seeds)
        };
        detection_total += loss_d * sample_weight;

        if config.use_detection_loss && !seeds.is_empty() {
            let grad_composite = detector.score_backward(&embedded.composite, &seeds)?;
            grad_patch = grad_patch + emb_backward(&embedded.ctx, &grad_composite);
        }
    }

    let mut similarity = 0.0;
    let mut grad_patch_total = if config.use_detection_loss {
        grad_patch.mapv(|g| config.lambda * g)
    } else {
        Grid::zeros(patch.data().dim())
    };
    if let Some(target) = text_target {
        let image_emb = embedder.embed_image(&patch)?;
        let (loss_s, grad_emb) = similarity_loss(&image_emb, target)?;
        similarity = loss_s;
        grad_patch_total = grad_patch_total + embedder.embed_image_backward(&patch, &grad_emb)?;
    }

    let losses = total_loss(
        similarity,
        if config.use_detection_loss { detection_total } else { 0.0 },
        if config.use_detection_loss { config.lambda } else { 0.0 },
    );

    // Patch gradient back to the image, then through decoder and chain.
    let grad_image = match (branch, region) {
        (Branch::Crop, Some(region)) => {
            crop_backward(&region, image.height(), image.width(), &grad_patch_total)
        }
        _ => grad_patch_total,
    };
    let grad_x0 = backend.decode_backward(generated.x0(), &grad_image)?;
    let grad_latent = grad_x_big_t_approx(backend.schedule(), &grad_x0);
    let steps = backend.schedule().steps();
    let phi_big_t = &state.null_texts[steps - 1];
    let grad_null =
        grad_phi_big_t_approx(backend, &state.x_big_t, &state.cond, phi_big_t, &grad_x0)?;

    let record = IterationRecord {
        iteration: state.iteration,
        similarity: losses.similarity,
        detection: losses.detection,
        total: losses.total,
        branch,
        grad_latent_norm: l2(&grad_latent),
        grad_null_norm: grad_null.dot(&grad_null).sqrt(),
    };

    if losses.total < state.best_total {
        state.best_total = losses.total;
        state.best_iteration = state.iteration;
        state.best_image = Some(image.clone());
    }
    *final_image = Some(image.clone());

    state.x_big_t = &state.x_big_t - &grad_latent.mapv(|g| config.beta * g);
    state.null_texts[steps - 1] =
        &state.null_texts[steps - 1] - &grad_null.mapv(|g| config.gamma * g);
    state.iteration += 1;
    Ok(record)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SGFORGE1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    latent_shape: (usize, usize, usize),
    emb_dim: usize,
    steps: usize,
    iteration: usize,
    rng_word_pos: String,
    best_total: f64,
    best_iteration: usize,
    has_best_image: bool,
}

fn write_f64s<W: Write>(w: &mut W, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated payload: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes the optimization state with bit-exact float payloads: a magic
/// tag, a JSON header, then little-endian doubles for the latent, the
/// conditioning, the null texts, and the best image when present.
pub fn save_checkpoint(path: &Path, state: &AttackState) -> Result<()> {
    let (h, w, c) = state.x_big_t.dim();
    let header = CheckpointHeader {
        latent_shape: (h, w, c),
        emb_dim: state.cond.len(),
        steps: state.null_texts.len(),
        iteration: state.iteration,
        rng_word_pos: state.rng_word_pos.to_string(),
        best_total: state.best_total,
        best_iteration: state.best_iteration,
        has_best_image: state.best_image.is_some(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;
    write_f64s(&mut out, state.x_big_t.iter().cloned())?;
    write_f64s(&mut out, state.cond.iter().cloned())?;
    for phi in &state.null_texts {
        if phi.len() != state.cond.len() {
            return Err(Error::Checkpoint("ragged null-text dimensions".into()));
        }
        write_f64s(&mut out, phi.iter().cloned())?;
    }
    if let Some(img) = &state.best_image {
        write_f64s(&mut out, img.data().iter().cloned())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AttackState> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("missing magic: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    input
        .read_exact(&mut len_bytes)
        .map_err(|e| Error::Checkpoint(format!("missing header length: {e}")))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 20 {
        return Err(Error::Checkpoint(format!("implausible header length {header_len}")));
    }
    let mut header_json = vec![0u8; header_len];
    input
        .read_exact(&mut header_json)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let rng_word_pos: u128 = header
        .rng_word_pos
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad rng position: {e}")))?;
    let (h, w, c) = header.latent_shape;
    let latent = read_f64s(&mut input, h * w * c)?;
    let x_big_t = Grid::from_shape_vec((h, w, c), latent)
        .map_err(|e| Error::Checkpoint(format!("latent shape: {e}")))?;
    let cond = Array1::from(read_f64s(&mut input, header.emb_dim)?);
    let mut null_texts = Vec::with_capacity(header.steps);
    for _ in 0..header.steps {
        null_texts.push(Array1::from(read_f64s(&mut input, header.emb_dim)?));
    }
    let best_image = if header.has_best_image {
        let data = read_f64s(&mut input, h * w * c)?;
        let grid = Grid::from_shape_vec((h, w, c), data)
            .map_err(|e| Error::Checkpoint(format!("image shape: {e}")))?;
        Some(ImageTensor::new(grid).map_err(|_| {
            Error::Checkpoint("best image payload outside [0,1]".into())
        })?)
    } else {
        None
    };
    Ok(AttackState {
        x_big_t,
        null_texts,
        cond,
        iteration: header.iteration,
        rng_word_pos,
        best_total: header.best_total,
        best_iteration: header.best_iteration,
        best_image,
    })
}
