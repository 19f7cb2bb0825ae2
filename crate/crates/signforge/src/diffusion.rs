//! Deterministic denoising chain: schedule, reverse steps, gradient
//! approximations for the chain endpoints, and fixed-point inversion
//! with per-step null-text refinement.
//!
//! A reverse step from `t` to `t-1` is
//! `x_{t-1} = c1 * x_t + c2 * eps(x_t, t, cond, null_t)` with
//! `c1 = sqrt(a_{t-1}/a_t)` and
//! `c2 = sqrt(a_{t-1}) * (sqrt(1/a_{t-1} - 1) - sqrt(1/a_t - 1))`,
//! where `a_t` is the cumulative signal level at step `t`. Backends
//! supply the noise predictor, its adjoints, and the latent codec.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::embedding::{HashedProjectionEmbedder, SimilarityBackend};
use crate::error::{Error, Result};
use crate::image::{Grid, ImageTensor};

/// Cumulative signal levels `a_0..a_T`, with `a_0 = 1` for clean data,
/// strictly positive, non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    alphas: Vec<f64>,
}

impl Schedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::ChainTooShort(alphas.len().saturating_sub(1)));
        }
        if (alphas[0] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSchedule(format!(
                "signal level at step 0 must be 1, got {}",
                alphas[0]
            )));
        }
        for (t, pair) in alphas.windows(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            if !b.is_finite() || b <= 0.0 || b > 1.0 {
                return Err(Error::InvalidSchedule(format!(
                    "signal level at step {} is {b}, want (0,1]",
                    t + 1
                )));
            }
            if b > a {
                return Err(Error::InvalidSchedule(format!(
                    "signal levels must not increase, step {} has {b} > {a}",
                    t + 1
                )));
            }
        }
        Ok(Self { alphas })
    }

    /// Levels interpolated linearly from `first` (at step 1) to `last`
    /// (at step `steps`).
    pub fn linear(steps: usize, first: f64, last: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::ChainTooShort(0));
        }
        let mut alphas = vec![1.0];
        for t in 0..steps {
            let frac = if steps == 1 { 0.0 } else { t as f64 / (steps - 1) as f64 };
            alphas.push(first + (last - first) * frac);
        }
        Self::new(alphas)
    }

    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    /// Signal level at step `t`, `t` in `0..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Multipliers `(c1, c2)` of the step from `t` to `t-1`.
    pub fn step_coefficients(&self, t: usize) -> (f64, f64) {
        let a_prev = self.alphas[t - 1];
        let a_t = self.alphas[t];
        let c1 = (a_prev / a_t).sqrt();
        let c2 = a_prev.sqrt() * ((1.0 / a_prev - 1.0).sqrt() - (1.0 / a_t - 1.0).sqrt());
        (c1, c2)
    }
}

/// One reverse step of the deterministic chain.
pub fn ddim_step(x_t: &Grid, eps: &Grid, alpha_prev: f64, alpha_t: f64) -> Grid {
    let c1 = (alpha_prev / alpha_t).sqrt();
    let c2 = alpha_prev.sqrt() * ((1.0 / alpha_prev - 1.0).sqrt() - (1.0 / alpha_t - 1.0).sqrt());
    x_t.mapv(|v| c1 * v) + eps.mapv(|v| c2 * v)
}

/// Multiplier mapping a clean-latent gradient onto the chain's noise
/// input: `grad(eps_T) = grad(x_0) * eq7_coefficient(a_{T-1}, a_T)`,
/// before the predictor's own adjoint.
pub fn eq7_coefficient(alpha_prev: f64, alpha_t: f64) -> f64 {
    (1.0 / alpha_prev - 1.0).sqrt() - (1.0 / alpha_t - 1.0).sqrt()
}

/// Null-text conditioning: one embedding shared across steps, or one per
/// step (index `t-1` for step `t`).
#[derive(Debug, Clone, PartialEq)]
pub enum NullSchedule {
    Shared(Array1<f64>),
    PerStep(Vec<Array1<f64>>),
}

impl NullSchedule {
    pub fn at(&self, t: usize) -> &Array1<f64> {
        match self {
            NullSchedule::Shared(phi) => phi,
            NullSchedule::PerStep(phis) => &phis[t - 1],
        }
    }

    pub fn validate(&self, steps: usize, dim: usize) -> Result<()> {
        match self {
            NullSchedule::Shared(phi) if phi.len() == dim => Ok(()),
            NullSchedule::PerStep(phis)
                if phis.len() == steps && phis.iter().all(|p| p.len() == dim) =>
            {
                Ok(())
            }
            _ => Err(Error::Config(format!(
                "null-text conditioning does not match {steps} steps of dim {dim}"
            ))),
        }
    }
}

/// Noise-predicting backend with adjoints and a latent codec.
pub trait DiffusionBackend: Send + Sync {
    fn latent_shape(&self) -> (usize, usize, usize);

    fn embedding_dim(&self) -> usize;

    fn schedule(&self) -> &Schedule;

    /// Predicted noise at step `t` given the latent, the prompt
    /// conditioning, and the null-text embedding for that step.
    fn epsilon(&self, x_t: &Grid, t: usize, cond: &Array1<f64>, null_text: &Array1<f64>)
        -> Result<Grid>;

    /// Adjoint of [`Self::epsilon`]: gradients of
    /// `sum(grad_eps * epsilon)` with respect to `x_t` and `null_text`.
    fn epsilon_backward(
        &self,
        x_t: &Grid,
        t: usize,
        cond: &Array1<f64>,
        null_text: &Array1<f64>,
        grad_eps: &Grid,
    ) -> Result<(Grid, Array1<f64>)>;

    /// Clean latent to image.
    fn decode(&self, x0: &Grid) -> Result<ImageTensor>;

    /// Adjoint of [`Self::decode`].
    fn decode_backward(&self, x0: &Grid, grad_img: &Grid) -> Result<Grid>;

    /// Image to clean latent, inverse of [`Self::decode`] up to pixel
    /// saturation.
    fn encode(&self, img: &ImageTensor) -> Result<Grid>;

    /// Prompt text to conditioning embedding.
    fn prompt_embedding(&self, text: &str) -> Result<Array1<f64>>;
}

/// Output of a full reverse chain.
#[derive(Debug, Clone)]
pub struct Generated {
    /// Latents `x_0..x_T`; `trajectory[t]` is the latent at step `t`.
    pub trajectory: Vec<Grid>,
    pub image: ImageTensor,
}

impl Generated {
    pub fn x0(&self) -> &Grid {
        &self.trajectory[0]
    }
}

/// Runs the reverse chain from the initial latent down to the decoded
/// image, keeping the trajectory for backward passes.
pub fn generate(
    backend: &dyn DiffusionBackend,
    x_big_t: &Grid,
    cond: &Array1<f64>,
    null: &NullSchedule,
) -> Result<Generated> {
    let schedule = backend.schedule();
    let steps = schedule.steps();
    null.validate(steps, backend.embedding_dim())?;
    let mut trajectory = vec![Grid::zeros(x_big_t.dim()); steps + 1];
    trajectory[steps] = x_big_t.clone();
    for t in (1..=steps).rev() {
        let eps = backend.epsilon(&trajectory[t], t, cond, null.at(t))?;
        trajectory[t - 1] = ddim_step(&trajectory[t], &eps, schedule.alpha(t - 1), schedule.alpha(t));
    }
    let image = backend.decode(&trajectory[0])?;
    Ok(Generated { trajectory, image })
}

/// Exact chain gradients, by reverse accumulation through every step.
#[derive(Debug, Clone)]
pub struct ChainGradients {
    pub x_big_t: Grid,
    /// Per-step null-text gradients, index `t-1` for step `t`.
    pub null_texts: Vec<Array1<f64>>,
}

/// Backpropagates a clean-latent gradient through the recorded
/// trajectory, yielding exact gradients for the initial latent and each
/// step's null text.
pub fn generate_backward(
    backend: &dyn DiffusionBackend,
    generated: &Generated,
    cond: &Array1<f64>,
    null: &NullSchedule,
    grad_x0: &Grid,
) -> Result<ChainGradients> {
    let schedule = backend.schedule();
    let steps = schedule.steps();
    let mut null_grads = vec![Array1::zeros(backend.embedding_dim()); steps];
    let mut grad = grad_x0.clone();
    for t in 1..=steps {
        let (c1, c2) = schedule.step_coefficients(t);
        let grad_eps = grad.mapv(|g| c2 * g);
        let (gx, gphi) =
            backend.epsilon_backward(&generated.trajectory[t], t, cond, null.at(t), &grad_eps)?;
        null_grads[t - 1] = gphi;
        grad = grad.mapv(|g| c1 * g) + gx;
    }
    Ok(ChainGradients { x_big_t: grad, null_texts: null_grads })
}

/// One-step approximation of the initial-latent gradient:
/// `grad(x_T) ~= grad(x_0) / sqrt(a_T)`.
pub fn grad_x_big_t_approx(schedule: &Schedule, grad_x0: &Grid) -> Grid {
    let scale = 1.0 / schedule.alpha(schedule.steps()).sqrt();
    grad_x0.mapv(|g| scale * g)
}

/// One-step approximation of the null-text gradient: the clean-latent
/// gradient scaled by [`eq7_coefficient`] for the final step, pulled
/// through the noise predictor's adjoint at `t = T`.
pub fn grad_phi_big_t_approx(
    backend: &dyn DiffusionBackend,
    x_big_t: &Grid,
    cond: &Array1<f64>,
    phi_big_t: &Array1<f64>,
    grad_x0: &Grid,
) -> Result<Array1<f64>> {
    let schedule = backend.schedule();
    let steps = schedule.steps();
    let kappa = eq7_coefficient(schedule.alpha(steps - 1), schedule.alpha(steps));
    let grad_eps = grad_x0.mapv(|g| kappa * g);
    let (_, gphi) = backend.epsilon_backward(x_big_t, steps, cond, phi_big_t, &grad_eps)?;
    Ok(gphi)
}

/// Knobs of [`ddim_invert`].
#[derive(Debug, Clone)]
pub struct InversionConfig {
    /// Fixed-point iterations per inversion step. One iteration is the
    /// usual crude approximation that reuses the lower latent's noise
    /// prediction; more iterations converge to the exact preimage.
    pub fixed_point_iters: usize,
    /// Gradient steps refining each step's null text.
    pub null_opt_steps: usize,
    pub null_opt_lr: f64,
    /// Per-step reconstruction MSE below which refinement stops early.
    pub null_opt_target_mse: f64,
    /// Refinement steps without improvement before giving up on a step.
    pub null_opt_patience: usize,
    /// Ceiling on the final image round-trip MSE; worse is an error.
    pub max_recon_mse: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            fixed_point_iters: 30,
            null_opt_steps: 100,
            null_opt_lr: 1e-2,
            null_opt_target_mse: 1e-5,
            null_opt_patience: 10,
            max_recon_mse: 1e-3,
        }
    }
}

/// Result of inverting an image into chain inputs.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub x_big_t: Grid,
    /// Refined null text per step, index `t-1` for step `t`.
    pub null_texts: Vec<Array1<f64>>,
    /// Mean squared error between the input image and the image the
    /// chain reproduces from `x_big_t` with the refined null texts.
    pub recon_mse: f64,
    /// Refinement iterations spent per step.
    pub null_opt_iters: Vec<usize>,
}

fn mean_sq(grid: &Grid) -> f64 {
    grid.iter().map(|v| v * v).sum::<f64>() / grid.len() as f64
}

/// Inverts an image into an initial latent and per-step null texts that
/// reproduce it through [`generate`].
///
/// The upward pass solves each step's preimage by fixed-point iteration;
/// the downward pass re-runs the chain and nudges each step's null text
/// so the running reconstruction tracks the inversion trajectory.
pub fn ddim_invert(
    backend: &dyn DiffusionBackend,
    image: &ImageTensor,
    cond: &Array1<f64>,
    config: &InversionConfig,
) -> Result<Inversion> {
    let schedule = backend.schedule();
    let steps = schedule.steps();
    let dim = backend.embedding_dim();
    let x0 = backend.encode(image)?;

    let mut null_texts: Vec<Array1<f64>> = vec![Array1::zeros(dim); steps];

    // Upward pass: recover x_t from x_{t-1} by iterating
    // x_t <- (x_{t-1} - c2 * eps(x_t)) / c1.
    let mut trajectory = vec![x0.clone()];
    for t in 1..=steps {
        let (c1, c2) = schedule.step_coefficients(t);
        let below = trajectory[t - 1].clone();
        let mut x_t = below.clone();
        for _ in 0..config.fixed_point_iters.max(1) {
            let eps = backend.epsilon(&x_t, t, cond, &null_texts[t - 1])?;
            x_t = (below.clone() - eps.mapv(|v| c2 * v)).mapv(|v| v / c1);
            if x_t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InversionDiverged { step: t, mse: f64::INFINITY });
            }
        }
        trajectory.push(x_t);
    }

    // Downward pass: refine each step's null text so the running
    // reconstruction lands on the trajectory latent below it.
    let mut null_opt_iters = vec![0usize; steps];
    let mut current = trajectory[steps].clone();
    for t in (1..=steps).rev() {
        let (_, c2) = schedule.step_coefficients(t);
        let target = &trajectory[t - 1];
        let mut phi = null_texts[t - 1].clone();
        let mut best_phi = phi.clone();
        let step_out = |phi: &Array1<f64>| -> Result<Grid> {
            let eps = backend.epsilon(&current, t, cond, phi)?;
            Ok(ddim_step(&current, &eps, schedule.alpha(t - 1), schedule.alpha(t)))
        };
        let mut best_mse = mean_sq(&(step_out(&phi)? - target));
        let mut since_best = 0usize;
        let mut used = 0usize;
        for _ in 0..config.null_opt_steps {
            if best_mse <= config.null_opt_target_mse {
                break;
            }
            let residual = step_out(&phi)? - target;
            // d mse / d phi = (2 c2 / n) * adjoint of eps at the residual.
            let grad_eps = residual.mapv(|r| 2.0 * c2 * r / residual.len() as f64);
            let (_, gphi) = backend.epsilon_backward(&current, t, cond, &phi, &grad_eps)?;
            phi = phi - gphi.mapv(|g| config.null_opt_lr * g);
            used += 1;
            let mse = mean_sq(&(step_out(&phi)? - target));
            if !mse.is_finite() {
                return Err(Error::InversionDiverged { step: t, mse });
            }
            if mse + 1e-15 < best_mse {
                best_mse = mse;
                best_phi = phi.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.null_opt_patience {
                    break;
                }
            }
        }
        null_opt_iters[t - 1] = used;
        null_texts[t - 1] = best_phi.clone();
        current = step_out(&best_phi)?;
    }

    let recon = backend.decode(&current)?;
    let recon_mse = image.mse(&recon);
    if !(recon_mse.is_finite() && recon_mse <= config.max_recon_mse) {
        return Err(Error::InversionDiverged { step: 0, mse: recon_mse });
    }
    Ok(Inversion {
        x_big_t: trajectory.swap_remove(steps),
        null_texts,
        recon_mse,
        null_opt_iters,
    })
}

const TOY_MODULATION: f64 = 0.04;

/// Self-contained noise predictor: an elementwise gate on the latent
/// plus fixed random projections of the prompt and null-text embeddings,
/// mildly modulated by the step index. The decoder squashes latents
/// through a tanh so every pixel keeps a usable gradient; the encoder is
/// its inverse up to saturation clipping.
pub struct ToyDiffusion {
    schedule: Schedule,
    shape: (usize, usize, usize),
    emb_dim: usize,
    /// Elementwise latent gate, values within (-0.5, 0.5).
    gate: Grid,
    proj_cond: Array2<f64>,
    proj_null: Array2<f64>,
    text_embedder: HashedProjectionEmbedder,
}

impl ToyDiffusion {
    pub fn new(seed: u64, schedule: Schedule, height: usize, width: usize, emb_dim: usize) -> Self {
        let shape = (height, width, 3);
        let n = height * width * 3;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let gate_dist = Uniform::new(-0.5, 0.5);
        let gate = Grid::from_shape_fn(shape, |_| gate_dist.sample(&mut rng));
        let proj_scale = 0.03;
        let sample_proj = |rng: &mut ChaCha20Rng| {
            Array2::from_shape_fn((n, emb_dim), |_| {
                let z: f64 = StandardNormal.sample(rng);
                z * proj_scale
            })
        };
        let proj_cond = sample_proj(&mut rng);
        let proj_null = sample_proj(&mut rng);
        let text_embedder = HashedProjectionEmbedder::new(emb_dim, seed ^ 0x9e3779b97f4a7c15);
        Self { schedule, shape, emb_dim, gate, proj_cond, proj_null, text_embedder }
    }

    fn modulation(&self, t: usize) -> f64 {
        1.0 + TOY_MODULATION * t as f64
    }

    fn check_latent(&self, x: &Grid) -> Result<()> {
        if x.dim() != self.shape {
            return Err(Error::BackendFailure(format!(
                "latent shape {:?} does not match backend shape {:?}",
                x.dim(),
                self.shape
            )));
        }
        Ok(())
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.schedule.steps() {
            return Err(Error::BackendFailure(format!(
                "step {t} outside 1..={}",
                self.schedule.steps()
            )));
        }
        Ok(())
    }

    fn project(&self, m: &Array2<f64>, v: &Array1<f64>) -> Grid {
        let flat = m.dot(v);
        Grid::from_shape_vec(self.shape, flat.to_vec()).expect("projection shape fixed")
    }
}

impl Default for ToyDiffusion {
    fn default() -> Self {
        let schedule = Schedule::linear(5, 0.999, 0.004).unwrap();
        Self::new(7, schedule, 48, 48, 16)
    }
}

impl DiffusionBackend for ToyDiffusion {
    fn latent_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    fn embedding_dim(&self) -> usize {
        self.emb_dim
    }

    fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn epsilon(
        &self,
        x_t: &Grid,
        t: usize,
        cond: &Array1<f64>,
        null_text: &Array1<f64>,
    ) -> Result<Grid> {
        self.check_latent(x_t)?;
        self.check_step(t)?;
        if cond.len() != self.emb_dim || null_text.len() != self.emb_dim {
            return Err(Error::BackendFailure(format!(
                "conditioning dims {}/{} do not match backend dim {}",
                cond.len(),
                null_text.len(),
                self.emb_dim
            )));
        }
        let m = self.modulation(t);
        let out = (&self.gate * x_t + self.project(&self.proj_cond, cond)
            + self.project(&self.proj_null, null_text))
            .mapv(|v| m * v);
        Ok(out)
    }

    fn epsilon_backward(
        &self,
        x_t: &Grid,
        t: usize,
        cond: &Array1<f64>,
        null_text: &Array1<f64>,
        grad_eps: &Grid,
    ) -> Result<(Grid, Array1<f64>)> {
        self.check_latent(x_t)?;
        self.check_step(t)?;
        let _ = (cond, null_text);
        let m = self.modulation(t);
        let gx = (&self.gate * grad_eps).mapv(|v| m * v);
        let flat = Array1::from_iter(grad_eps.iter().map(|&g| m * g));
        let gphi = self.proj_null.t().dot(&flat);
        Ok((gx, gphi))
    }

    fn decode(&self, x0: &Grid) -> Result<ImageTensor> {
        self.check_latent(x0)?;
        let img = x0.mapv(|v| 0.5 + 0.5 * (2.0 * (v - 0.5)).tanh());
        ImageTensor::new(img)
    }

    fn decode_backward(&self, x0: &Grid, grad_img: &Grid) -> Result<Grid> {
        self.check_latent(x0)?;
        Ok(Grid::from_shape_fn(self.shape, |idx| {
            let u = (2.0 * (x0[idx] - 0.5)).tanh();
            grad_img[idx] * (1.0 - u * u)
        }))
    }

    fn encode(&self, img: &ImageTensor) -> Result<Grid> {
        if (img.height(), img.width(), 3) != self.shape {
            return Err(Error::BackendFailure(format!(
                "image {}x{} does not match backend latent {}x{}",
                img.width(),
                img.height(),
                self.shape.1,
                self.shape.0
            )));
        }
        let limit = 1.0 - 1e-6;
        Ok(img
            .data()
            .mapv(|p| 0.5 + 0.5 * (2.0 * p - 1.0).clamp(-limit, limit).atanh()))
    }

    fn prompt_embedding(&self, text: &str) -> Result<Array1<f64>> {
        self.text_embedder.embed_text(text)
    }
}
