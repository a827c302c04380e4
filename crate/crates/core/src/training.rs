//! Training loop for the clean-image predictor.
//!
//! Each step draws, per batch item from its own derived random stream: a
//! dataset index, a continuous level in `(0, 1]`, a class-drop coin, and
//! forward noise. Items are evaluated independently (possibly on worker
//! threads) and their gradients reduced in batch order, so a run is
//! reproducible from its seed regardless of the thread count. The thread
//! count itself comes from the `UDPM_THREADS` environment variable.
//!
//! Two objectives: `simple` regresses the clean image under mean squared
//! error; `sigma-weighted` charges the prediction error through the reverse
//! step's own precision (the KL cost of the induced mean shift), with the
//! final step's divergent weights anchored at the level's own precision.

use serde::{Deserialize, Serialize};

use crate::degrade::{adjoint_n, box_kernel, downsample_n, GramRepresentation, Kernel};
use crate::denoiser::{ema_update, ArchDescriptor, ConvNetParams, DenoiserInput};
use crate::diffusion::{apply_precision_with, posterior_weight_structure, step_coefficients};
use crate::error::{CoreError, CoreResult};
use crate::rng::RngStream;
use crate::schedule::{steps_for_size, Schedule, ScheduleVariant};
use crate::tensor::{ImageTensor, Precision};

/// Worker threads to use, from `UDPM_THREADS`; defaults to the machine's
/// available parallelism when unset.
pub fn thread_budget() -> CoreResult<usize> {
    match std::env::var("UDPM_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
        Err(e) => Err(CoreError::InvalidArgument(format!(
            "UDPM_THREADS is not readable: {e}"
        ))),
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                CoreError::InvalidArgument(format!(
                    "UDPM_THREADS must be a positive integer, got {s:?}"
                ))
            }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    #[default]
    Simple,
    SigmaWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ToyGenerator {
    /// Soft radial bumps at random positions; unlabeled.
    #[default]
    Blobs,
    /// Soft horizontal (class 0) or vertical (class 1) bands.
    Bars,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub generator: ToyGenerator,
    pub size: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            generator: ToyGenerator::Blobs,
            size: 64,
            image_size: 16,
            seed: 0,
        }
    }
}

/// One training example.
#[derive(Debug, Clone)]
pub struct Item {
    pub image: ImageTensor,
    pub class: Option<usize>,
}

/// Procedurally generated dataset; item `i` is a pure function of the
/// dataset seed and `i`, so epochs revisit identical images.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    config: DatasetConfig,
}

impl ToyDataset {
    pub fn new(config: DatasetConfig) -> CoreResult<Self> {
        if config.size == 0 {
            return Err(CoreError::InvalidArgument(
                "dataset size must be positive".into(),
            ));
        }
        if config.image_size < 2 {
            return Err(CoreError::InvalidArgument(format!(
                "image size {} too small",
                config.image_size
            )));
        }
        Ok(ToyDataset { config })
    }

    pub fn len(&self) -> usize {
        self.config.size
    }

    pub fn is_empty(&self) -> bool {
        self.config.size == 0
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    pub fn class_count(&self) -> usize {
        match self.config.generator {
            ToyGenerator::Blobs => 0,
            ToyGenerator::Bars => 2,
        }
    }

    pub fn get(&self, index: usize) -> CoreResult<Item> {
        if index >= self.config.size {
            return Err(CoreError::InvalidArgument(format!(
                "dataset index {index} out of range 0..{}",
                self.config.size
            )));
        }
        let sz = self.config.image_size;
        let mut rng = RngStream::new(self.config.seed, index as u64);
        let mut image = ImageTensor::zeros(1, sz, sz)?;
        let class = match self.config.generator {
            ToyGenerator::Blobs => {
                let cy = rng.next_range(0.0, sz as f64);
                let cx = rng.next_range(0.0, sz as f64);
                let sigma = rng.next_range(sz as f64 / 8.0, sz as f64 / 4.0);
                let amp = rng.next_range(0.6, 1.0);
                let plane = image.channel_mut(0);
                for y in 0..sz {
                    for x in 0..sz {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        plane[y * sz + x] = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
                None
            }
            ToyGenerator::Bars => {
                let class = index % 2;
                let center = rng.next_range(0.0, sz as f64);
                let sigma = rng.next_range(1.0, sz as f64 / 6.0);
                let amp = rng.next_range(0.7, 1.0);
                let plane = image.channel_mut(0);
                for y in 0..sz {
                    for x in 0..sz {
                        let along = if class == 0 { y as f64 } else { x as f64 };
                        let d = along - center;
                        plane[y * sz + x] = amp * (-d * d / (2.0 * sigma * sigma)).exp();
                    }
                }
                Some(class)
            }
        };
        image.level = Some(0.0);
        Ok(Item { image, class })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dataset: DatasetConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    /// Probability of hiding an item's class during a step, training the
    /// "no class" token alongside the conditional rows.
    pub class_drop_prob: f64,
    pub loss: LossVariant,
    pub schedule: ScheduleVariant,
    /// 0 derives the level count from the image size and stride.
    pub schedule_steps: usize,
    pub stride: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub seed: u64,
    pub precision: Precision,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetConfig::default(),
            steps: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            ema_decay: 0.9999,
            class_drop_prob: 0.1,
            loss: LossVariant::Simple,
            schedule: ScheduleVariant::Sine,
            schedule_steps: 0,
            stride: 2,
            hidden: 32,
            embed_dim: 32,
            seed: 0,
            precision: Precision::F32,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> CoreResult<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(CoreError::InvalidArgument(
                "steps and batch size must be positive".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(CoreError::InvalidArgument(format!(
                "EMA decay {} outside [0, 1)",
                self.ema_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.class_drop_prob) {
            return Err(CoreError::InvalidArgument(format!(
                "class drop probability {} outside [0, 1]",
                self.class_drop_prob
            )));
        }
        if self.stride == 0 {
            return Err(CoreError::InvalidArgument("stride must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(CoreError::InvalidArgument(
                "log_every must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The level count: explicit, or derived from the image geometry.
    pub fn resolve_schedule_steps(&self) -> CoreResult<usize> {
        if self.schedule_steps > 0 {
            Ok(self.schedule_steps)
        } else {
            steps_for_size(
                self.dataset.image_size,
                self.dataset.image_size,
                self.stride,
            )
        }
    }
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update in place. `quantize` rounds the moments
    /// and parameters to 32-bit after the update.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        quantize: bool,
    ) -> CoreResult<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            if quantize {
                self.m[i] = self.m[i] as f32 as f64;
                self.v[i] = self.v[i] as f32 as f64;
                params[i] = params[i] as f32 as f64;
            }
        }
        Ok(())
    }
}

/// Mean squared error and its gradient with respect to the prediction.
pub fn loss_simple(
    prediction: &ImageTensor,
    target: &ImageTensor,
) -> CoreResult<(f64, ImageTensor)> {
    prediction.check_same_shape(target, "loss inputs")?;
    let delta = prediction.sub(target)?;
    let n = delta.numel() as f64;
    let loss = delta.sum_sq() / n;
    let grad = delta.scaled(2.0 / n);
    Ok((loss, grad))
}

/// KL-faithful objective: the reverse-step cost of the mean shift a wrong
/// clean estimate induces.
///
/// The prediction error is carried to the step's output grid, charged
/// through the step precision `a G + b I`, and scaled by the squared
/// clean-anchor weight `alpha_bar_prev.sqrt() * b`; everything is averaged
/// over the grid. At the final step both `b` and the anchor weight are kept
/// finite by the level's own precision `1 / (1 - alpha_bar(l))`.
pub fn loss_sigma_weighted(
    prediction: &ImageTensor,
    target: &ImageTensor,
    s: &Schedule,
    level: f64,
    kernel: &Kernel,
) -> CoreResult<(f64, ImageTensor)> {
    prediction.check_same_shape(target, "loss inputs")?;
    let sc = step_coefficients(s, level)?;
    let delta = prediction.sub(target)?;
    let coarse = downsample_n(&delta, kernel, sc.applications - 1)?;
    let b = sc.anchored_marginal_precision();
    let anchor = sc.alpha_bar_prev.sqrt() * b;
    let weight = posterior_weight_structure(
        s,
        level,
        kernel,
        coarse.channels(),
        coarse.height(),
        coarse.width(),
        GramRepresentation::Projector,
    )?;
    let precision_delta = apply_precision_with(
        weight.likelihood_precision,
        weight.marginal_precision,
        &weight.gram,
        &coarse,
    )?;
    let n = coarse.numel() as f64;
    let loss = 0.5 * anchor * anchor / n * coarse.dot(&precision_delta)?;
    let grad =
        adjoint_n(&precision_delta, kernel, sc.applications - 1)?.scaled(anchor * anchor / n);
    Ok((loss, grad))
}

/// One logged training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub mean_level: f64,
}

/// Finished run: the trained state plus the per-step loss trace.
pub struct TrainOutcome {
    pub checkpoint: crate::checkpoint::Checkpoint,
    pub history: Vec<LossRow>,
}

struct ItemResult {
    loss: f64,
    level: f64,
    grads: Vec<f64>,
}

fn item_pass(
    net: &ConvNetParams,
    dataset: &ToyDataset,
    schedule: &Schedule,
    kernel: &Kernel,
    config: &TrainConfig,
    step: usize,
    slot: usize,
) -> CoreResult<ItemResult> {
    // Stream 1 of the run seed feeds training draws; each (step, item)
    // pair splits off its own substream so the draw sequence does not
    // depend on scheduling.
    let base = RngStream::new(config.seed, 1);
    let mut rng = base.split((step * config.batch_size + slot) as u64);
    let index = rng.next_index(dataset.len());
    let item = dataset.get(index)?;
    let level = rng.next_f64_open();
    let class = match item.class {
        Some(c) if rng.next_f64() >= config.class_drop_prob => Some(c),
        _ => None,
    };
    let x_l =
        crate::diffusion::forward_marginal_sample(&item.image, level, schedule, kernel, &mut rng)?;
    let (prediction, cache) = net.predict_with_cache(&DenoiserInput {
        x: x_l,
        level,
        class,
    })?;
    let (loss, d_out) = match config.loss {
        LossVariant::Simple => loss_simple(&prediction, &item.image)?,
        LossVariant::SigmaWeighted => {
            loss_sigma_weighted(&prediction, &item.image, schedule, level, kernel)?
        }
    };
    let grads = net.backward(&cache, &d_out)?;
    let mut flat = grads.to_flat();
    if config.precision == Precision::F32 {
        for g in flat.iter_mut() {
            *g = *g as f32 as f64;
        }
    }
    Ok(ItemResult {
        loss,
        level,
        grads: flat,
    })
}

/// Train with the thread budget taken from the environment.
pub fn train(config: &TrainConfig, observer: impl FnMut(&LossRow)) -> CoreResult<TrainOutcome> {
    let threads = thread_budget()?;
    train_with_threads(config, threads, observer)
}

/// Train with an explicit worker count. Results are identical for every
/// `threads >= 1`: per-item randomness is scheduling-independent and the
/// gradient reduction runs in batch order on the caller's thread.
pub fn train_with_threads(
    config: &TrainConfig,
    threads: usize,
    mut observer: impl FnMut(&LossRow),
) -> CoreResult<TrainOutcome> {
    config.validate()?;
    let dataset = ToyDataset::new(config.dataset.clone())?;
    let kernel = box_kernel(config.stride)?;
    let schedule_steps = config.resolve_schedule_steps()?;
    let schedule = Schedule::new(config.schedule, schedule_steps, &kernel)?;
    let sz = config.dataset.image_size;
    let arch = ArchDescriptor {
        channels: 1,
        hidden: config.hidden,
        image_height: sz,
        image_width: sz,
        class_count: dataset.class_count(),
        embed_dim: config.embed_dim,
    };
    let quantize = config.precision == Precision::F32;
    let mut init_rng = RngStream::new(config.seed, 0);
    let mut net = ConvNetParams::init(&arch, &mut init_rng)?;
    net.precision = config.precision;
    if quantize {
        net.quantize_f32();
    }
    let mut ema = net.clone();
    let mut adam = AdamState::new(net.param_count());
    let workers = threads.max(1).min(config.batch_size);
    let mut history = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch = config.batch_size;
        let mut results: Vec<Option<CoreResult<ItemResult>>> = Vec::new();
        results.resize_with(batch, || None);
        if workers <= 1 {
            for (slot, out) in results.iter_mut().enumerate() {
                *out = Some(item_pass(
                    &net, &dataset, &schedule, &kernel, config, step, slot,
                ));
            }
        } else {
            let chunk = batch.div_ceil(workers);
            let net_ref = &net;
            let dataset_ref = &dataset;
            let schedule_ref = &schedule;
            let kernel_ref = &kernel;
            std::thread::scope(|scope| {
                for (ci, slots) in results.chunks_mut(chunk).enumerate() {
                    scope.spawn(move || {
                        for (off, out) in slots.iter_mut().enumerate() {
                            *out = Some(item_pass(
                                net_ref,
                                dataset_ref,
                                schedule_ref,
                                kernel_ref,
                                config,
                                step,
                                ci * chunk + off,
                            ));
                        }
                    });
                }
            });
        }

        let mut grad_sum = vec![0.0; net.param_count()];
        let mut loss_sum = 0.0;
        let mut level_sum = 0.0;
        for out in results {
            let r = out.expect("every batch slot is filled")?;
            loss_sum += r.loss;
            level_sum += r.level;
            for (g, d) in grad_sum.iter_mut().zip(r.grads.iter()) {
                *g += d;
            }
        }
        let inv_b = 1.0 / batch as f64;
        for g in grad_sum.iter_mut() {
            *g *= inv_b;
            if quantize {
                *g = *g as f32 as f64;
            }
        }
        let row = LossRow {
            step,
            loss: loss_sum * inv_b,
            mean_level: level_sum * inv_b,
        };
        if !row.loss.is_finite() {
            return Err(CoreError::TrainingDiverged {
                step,
                level: row.mean_level,
                loss: row.loss,
            });
        }

        let mut flat = net.to_flat();
        adam.step(&mut flat, &grad_sum, config.learning_rate, quantize)?;
        net.assign_from_flat(&flat)?;
        ema_update(&mut ema, &net, config.ema_decay)?;
        if quantize {
            ema.quantize_f32();
        }
        if step % config.log_every == 0 || step + 1 == config.steps {
            observer(&row);
        }
        history.push(row);
    }

    Ok(TrainOutcome {
        checkpoint: crate::checkpoint::Checkpoint {
            params: net,
            ema,
            schedule: schedule.meta(),
            kernel,
            ema_decay: config.ema_decay,
            step_count: config.steps,
            seed: config.seed,
        },
        history,
    })
}
