//! Per-command configuration documents, TOML or JSON by file extension.
//!
//! Every command takes one document. All randomness flows from named
//! seed fields in that document; nothing is seeded from the clock and
//! there is no hidden global state. Defaults mirror the library's
//! attack and protocol defaults, so a minimal document only names what
//! the run is about. The fully resolved configuration, defaults
//! included, lands in the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::defenses::DefenseSpec;
use crate::detection::TemplateDetector;
use crate::diffusion::InversionConfig;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::optimizer::{AttackConfig, InitStrategy};
use crate::prompts::StructuredPrompt;
use crate::simulate::JudgeParams;

/// Parses a configuration document, dispatching on the `.json`
/// extension and treating everything else as TOML.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().and_then(|e| e.to_str()) == Some("json");
    if is_json {
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Serializes a resolved configuration for embedding in a manifest.
pub fn resolved_json<T: Serialize>(config: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(config)?)
}

/// Sliding-window detector settings. Defaults mirror
/// [`TemplateDetector::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub window_sizes: Vec<usize>,
    pub stride: usize,
    pub sharpness: f64,
    pub margin: f64,
    pub contrast_floor: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window_sizes: vec![20, 26, 32, 48],
            stride: 4,
            sharpness: 10.0,
            margin: 0.35,
            contrast_floor: 0.1,
        }
    }
}

impl DetectorConfig {
    pub fn build(&self) -> Result<TemplateDetector> {
        Ok(TemplateDetector::new(
            self.window_sizes.clone(),
            self.stride,
            self.sharpness,
            self.margin,
        )?
        .with_contrast_floor(self.contrast_floor))
    }
}

/// Parameters for a synthesized background corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeConfig {
    #[serde(default = "default_synth_count")]
    pub count: usize,
    #[serde(default = "default_synth_side")]
    pub height: usize,
    #[serde(default = "default_synth_side")]
    pub width: usize,
    pub seed: u64,
}

fn default_synth_count() -> usize {
    6
}

fn default_synth_side() -> usize {
    96
}

/// Where backgrounds come from: a directory of images or a synthesized
/// set. Exactly one source must be given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub dir: Option<PathBuf>,
    /// Drop directory images the evaluation detector already fires on.
    pub filter: bool,
    pub synthesize: Option<SynthesizeConfig>,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.dir, &self.synthesize) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::Config(
                "corpus needs exactly one of `dir` or `synthesize`".into(),
            )),
        }
    }
}

/// Randomized placement protocol for evaluation cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CasesConfig {
    pub count: usize,
    #[serde(default = "default_scale_range")]
    pub scale_range: (f64, f64),
    #[serde(default = "default_rotation_range")]
    pub rotation_range_deg: (f64, f64),
    pub seed: u64,
}

fn default_scale_range() -> (f64, f64) {
    (0.4, 1.0)
}

fn default_rotation_range() -> (f64, f64) {
    (-15.0, 15.0)
}

/// Success judgment thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeConfig {
    pub target_class: usize,
    #[serde(default = "default_score_thresh")]
    pub score_thresh: f64,
    #[serde(default = "default_iou_thresh")]
    pub iou_thresh: f64,
}

fn default_score_thresh() -> f64 {
    0.25
}

fn default_iou_thresh() -> f64 {
    0.45
}

impl JudgeConfig {
    pub fn to_params(&self) -> JudgeParams {
        JudgeParams {
            target_class: self.target_class,
            score_thresh: self.score_thresh,
            iou_thresh: self.iou_thresh,
        }
    }
}

/// How the attack's latent and null text start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// Mid-gray chain preimage with Gaussian jitter.
    Gaussian,
    /// NULL-text inversion of a given image.
    FromImage,
    /// NULL-text inversion of the target class's canonical sign.
    FromPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    pub kind: InitKind,
    /// Jitter for `gaussian` initialization.
    pub sigma: f64,
    /// Image path for `from-image` initialization.
    pub image: Option<PathBuf>,
}

impl Default for InitSection {
    fn default() -> Self {
        Self { kind: InitKind::Gaussian, sigma: 0.02, image: None }
    }
}

impl InitSection {
    pub fn to_strategy(&self) -> Result<InitStrategy> {
        match self.kind {
            InitKind::Gaussian => Ok(InitStrategy::Gaussian { sigma: self.sigma }),
            InitKind::FromImage => {
                let path = self.image.as_ref().ok_or_else(|| {
                    Error::Config("init kind `from-image` needs `init.image`".into())
                })?;
                Ok(InitStrategy::FromImage(ImageTensor::read(path)?))
            }
            InitKind::FromPrompt => Ok(InitStrategy::FromPrompt),
        }
    }
}

/// Attack hyperparameters. Defaults mirror [`AttackConfig::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub target_class: usize,
    pub seed: u64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_eot_samples")]
    pub eot_samples: usize,
    #[serde(default = "default_t_score")]
    pub t_score: f64,
    #[serde(default = "default_score_thresh")]
    pub score_thresh: f64,
    #[serde(default = "default_iou_thresh")]
    pub iou_thresh: f64,
    #[serde(default = "default_scale_range")]
    pub scale_range: (f64, f64),
    #[serde(default = "default_rotation_range")]
    pub rotation_range_deg: (f64, f64),
    #[serde(default = "default_true")]
    pub use_detection_loss: bool,
    #[serde(default = "default_true")]
    pub use_similarity_loss: bool,
    #[serde(default = "default_true")]
    pub use_bbox_filter: bool,
    #[serde(default)]
    pub init: InitSection,
}

fn default_iterations() -> usize {
    200
}

fn default_top_k() -> usize {
    10
}

fn default_lambda() -> f64 {
    1.0
}

fn default_beta() -> f64 {
    0.05
}

fn default_gamma() -> f64 {
    0.01
}

fn default_eot_samples() -> usize {
    4
}

fn default_t_score() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

impl AttackSection {
    pub fn to_attack_config(&self, prompt: &StructuredPrompt) -> Result<AttackConfig> {
        let mut config = AttackConfig::new(self.target_class, prompt.clone());
        config.iterations = self.iterations;
        config.top_k = self.top_k;
        config.lambda = self.lambda;
        config.beta = self.beta;
        config.gamma = self.gamma;
        config.eot_samples = self.eot_samples;
        config.t_score = self.t_score;
        config.score_thresh = self.score_thresh;
        config.iou_thresh = self.iou_thresh;
        config.scale_range = self.scale_range;
        config.rotation_range_deg = self.rotation_range_deg;
        config.use_detection_loss = self.use_detection_loss;
        config.use_similarity_loss = self.use_similarity_loss;
        config.use_bbox_filter = self.use_bbox_filter;
        config.init = self.init.to_strategy()?;
        config.seed = self.seed;
        Ok(config)
    }
}

/// `generate` command: run the attack, emit the best patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub prompt: StructuredPrompt,
    pub attack: AttackSection,
    #[serde(default)]
    pub detector: DetectorConfig,
}

/// `simulate` command: evaluate a patch under the randomized protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub output_dir: PathBuf,
    /// Patch image to evaluate.
    pub patch: PathBuf,
    pub corpus: CorpusConfig,
    pub cases: CasesConfig,
    pub judge: JudgeConfig,
    #[serde(default = "default_detectors")]
    pub detectors: Vec<DetectorConfig>,
}

fn default_detectors() -> Vec<DetectorConfig> {
    vec![DetectorConfig::default()]
}

/// Benign fixture for average-precision measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenignConfig {
    #[serde(default = "default_benign_count")]
    pub count: usize,
    #[serde(default = "default_benign_sign_size")]
    pub sign_size: usize,
    #[serde(default = "default_canonical_range")]
    pub scale_range: (f64, f64),
    #[serde(default = "default_zero_range")]
    pub rotation_range_deg: (f64, f64),
    /// Paste-origin grid; the detector stride gives every canonical
    /// sign an exactly aligned window.
    #[serde(default = "default_benign_align")]
    pub align: usize,
    pub seed: u64,
}

fn default_benign_count() -> usize {
    12
}

fn default_benign_sign_size() -> usize {
    32
}

fn default_canonical_range() -> (f64, f64) {
    (1.0, 1.0)
}

fn default_zero_range() -> (f64, f64) {
    (0.0, 0.0)
}

fn default_benign_align() -> usize {
    4
}

/// `defend` command: sweep input-transform defenses over a patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefendConfig {
    pub output_dir: PathBuf,
    pub patch: PathBuf,
    pub corpus: CorpusConfig,
    pub cases: CasesConfig,
    pub judge: JudgeConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    /// Omitted entirely, the standard strength grid runs; present but
    /// empty is a configuration error.
    pub defenses: Option<Vec<DefenseSpec>>,
    pub benign: BenignConfig,
    #[serde(default = "default_map_iou")]
    pub map_iou: f64,
    /// Seed for defense noise streams.
    pub seed: u64,
}

fn default_map_iou() -> f64 {
    0.5
}

/// `ablate` command: rerun the attack with components removed or
/// customizations added, shared seeds throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub prompt: StructuredPrompt,
    pub attack: AttackSection,
    pub cases: CasesConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    /// Adds a with-image-customization row when given.
    #[serde(default)]
    pub customization_image: Option<PathBuf>,
    /// Adds a with-prompt-customization row.
    #[serde(default = "default_true")]
    pub prompt_customization: bool,
}

/// `invert` command: NULL-text inversion of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertConfig {
    pub output_dir: PathBuf,
    pub image: PathBuf,
    pub prompt: StructuredPrompt,
    #[serde(default)]
    pub inversion: InversionSection,
}

/// Inversion settings. Defaults mirror [`InversionConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSection {
    pub fixed_point_iters: usize,
    pub null_opt_steps: usize,
    pub null_opt_lr: f64,
    pub null_opt_target_mse: f64,
    pub null_opt_patience: usize,
    pub max_recon_mse: f64,
}

impl Default for InversionSection {
    fn default() -> Self {
        let d = InversionConfig::default();
        Self {
            fixed_point_iters: d.fixed_point_iters,
            null_opt_steps: d.null_opt_steps,
            null_opt_lr: d.null_opt_lr,
            null_opt_target_mse: d.null_opt_target_mse,
            null_opt_patience: d.null_opt_patience,
            max_recon_mse: d.max_recon_mse,
        }
    }
}

impl InversionSection {
    pub fn to_inversion_config(&self) -> InversionConfig {
        InversionConfig {
            fixed_point_iters: self.fixed_point_iters,
            null_opt_steps: self.null_opt_steps,
            null_opt_lr: self.null_opt_lr,
            null_opt_target_mse: self.null_opt_target_mse,
            null_opt_patience: self.null_opt_patience,
            max_recon_mse: self.max_recon_mse,
        }
    }
}

/// `report` command: audit run directories and combine their tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub output_dir: PathBuf,
    pub runs: Vec<PathBuf>,
}
