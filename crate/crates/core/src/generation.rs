//! Sampling: run the reverse chain from coarse noise to a full-resolution
//! image, recording every noise draw so a run can be replayed, edited, or
//! blended later.
//!
//! A run at `L` levels consumes exactly `L` noise maps: the initial draw on
//! the coarsest grid, then one posterior draw per interior step on each
//! finer grid. The final step adds no noise - it returns the step mean,
//! which collapses onto the predicted clean image. The denoiser is
//! evaluated once per level, or twice with guidance.

use std::path::Path;

use crate::checkpoint::{read_bundle, write_bundle, Checkpoint, LATENT_MAGIC};
use crate::degrade::{GramRepresentation, Kernel};
use crate::denoiser::{Denoiser, DenoiserInput};
use crate::diffusion::{posterior_params_in, posterior_sample_with_noise};
use crate::error::{CoreError, CoreResult};
use crate::rng::RngStream;
use crate::schedule::{Schedule, ScheduleMeta};
use crate::tensor::ImageTensor;

/// Classifier-free guidance: blend the conditional and unconditional
/// clean-image estimates with weight `weight` on the conditional side.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct GuidanceConfig {
    pub class: usize,
    pub weight: f64,
}

/// Every noise map of one sampling run, coarsest first.
///
/// `noises[0]` is the initial draw at the coarsest grid (level `L`);
/// `noises[j]` for `j >= 1` is the posterior draw that produced the image
/// at level `L - j`. `noise_for_level` resolves a level to its slot.
#[derive(Debug, Clone)]
pub struct LatentRecord {
    pub schedule: ScheduleMeta,
    pub channels: usize,
    pub full_height: usize,
    pub full_width: usize,
    pub noises: Vec<ImageTensor>,
}

const LATENT_FORMAT: &str = "udpm-latent-v1";

impl LatentRecord {
    /// Grid side lengths at one level.
    fn grid_at(&self, level: usize) -> (usize, usize) {
        let factor = self.schedule.stride.pow(level as u32);
        (self.full_height / factor, self.full_width / factor)
    }

    /// All-zero noises in the shapes a run at this geometry consumes.
    pub fn zeros(
        schedule: ScheduleMeta,
        channels: usize,
        full_height: usize,
        full_width: usize,
    ) -> CoreResult<Self> {
        let steps = schedule.steps;
        let factor = schedule.stride.pow(steps as u32);
        if full_height % factor != 0 || full_width % factor != 0 {
            return Err(CoreError::NotDivisible {
                height: full_height,
                width: full_width,
                stride: factor,
            });
        }
        let mut record = LatentRecord {
            schedule,
            channels,
            full_height,
            full_width,
            noises: Vec::with_capacity(steps),
        };
        for j in 0..steps {
            let level = if j == 0 { steps } else { steps - j };
            let (h, w) = record.grid_at(level);
            record.noises.push(ImageTensor::zeros(channels, h, w)?);
        }
        Ok(record)
    }

    /// The noise map drawn on the grid of `level` (`1..=steps`).
    pub fn noise_for_level(&self, level: usize) -> CoreResult<&ImageTensor> {
        let steps = self.schedule.steps;
        if level == 0 || level > steps {
            return Err(CoreError::InvalidArgument(format!(
                "level {level} outside 1..={steps}"
            )));
        }
        Ok(&self.noises[steps - level])
    }

    pub fn noise_for_level_mut(&mut self, level: usize) -> CoreResult<&mut ImageTensor> {
        let steps = self.schedule.steps;
        if level == 0 || level > steps {
            return Err(CoreError::InvalidArgument(format!(
                "level {level} outside 1..={steps}"
            )));
        }
        Ok(&mut self.noises[steps - level])
    }

    /// Validate internal consistency (count and the shape ladder).
    pub fn validate(&self) -> CoreResult<()> {
        let steps = self.schedule.steps;
        if self.noises.len() != steps {
            return Err(CoreError::Format(format!(
                "latent record holds {} noise maps, schedule needs {steps}",
                self.noises.len()
            )));
        }
        for (j, noise) in self.noises.iter().enumerate() {
            let level = if j == 0 { steps } else { steps - j };
            let (h, w) = self.grid_at(level);
            if noise.shape() != (self.channels, h, w) {
                return Err(CoreError::Format(format!(
                    "noise map {j} has shape {:?}, expected {:?}",
                    noise.shape(),
                    (self.channels, h, w)
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> CoreResult<()> {
        self.validate()?;
        let header = serde_json::json!({
            "format": LATENT_FORMAT,
            "schedule": self.schedule,
            "channels": self.channels,
            "full_height": self.full_height,
            "full_width": self.full_width,
        });
        let blobs = self
            .noises
            .iter()
            .enumerate()
            .map(|(j, noise)| Ok((format!("noise{j}"), noise.to_udt1_bytes()?)))
            .collect::<CoreResult<Vec<_>>>()?;
        write_bundle(path, LATENT_MAGIC, header, &blobs)
    }

    pub fn load(path: &Path) -> CoreResult<Self> {
        let (header, blobs) = read_bundle(path, LATENT_MAGIC)?;
        let format = header["format"].as_str().unwrap_or_default();
        if format != LATENT_FORMAT {
            return Err(CoreError::Format(format!(
                "unsupported latent format {format:?}"
            )));
        }
        let schedule: ScheduleMeta = serde_json::from_value(header["schedule"].clone())
            .map_err(|e| CoreError::Format(format!("bad schedule block: {e}")))?;
        let take_usize = |key: &str| -> CoreResult<usize> {
            header[key]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| CoreError::Format(format!("latent header lacks {key}")))
        };
        let mut record = LatentRecord {
            schedule,
            channels: take_usize("channels")?,
            full_height: take_usize("full_height")?,
            full_width: take_usize("full_width")?,
            noises: Vec::with_capacity(blobs.len()),
        };
        for (j, (name, bytes)) in blobs.iter().enumerate() {
            if name != &format!("noise{j}") {
                return Err(CoreError::Format(format!(
                    "unexpected blob {name} at position {j}"
                )));
            }
            record.noises.push(ImageTensor::from_udt1_bytes(bytes)?);
        }
        record.validate()?;
        Ok(record)
    }
}

/// Where a sampling run's noise comes from: drawn fresh, or replayed from
/// a recorded run.
pub enum SampleNoise<'a> {
    Fresh(&'a mut RngStream),
    Replay(&'a LatentRecord),
}

/// Sampling knobs beyond the model itself.
#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub use_ema: bool,
    pub guidance: Option<GuidanceConfig>,
    pub representation: GramRepresentation,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            use_ema: true,
            guidance: None,
            representation: GramRepresentation::Projector,
        }
    }
}

/// Clean-image estimate under guidance: both branches are always
/// evaluated; weights 0 and 1 return the respective branch untouched.
pub fn cfg_predict(
    denoiser: &dyn Denoiser,
    x: &ImageTensor,
    level: f64,
    guidance: &GuidanceConfig,
) -> CoreResult<ImageTensor> {
    let unconditional = denoiser.predict(&DenoiserInput {
        x: x.clone(),
        level,
        class: None,
    })?;
    let conditional = denoiser.predict(&DenoiserInput {
        x: x.clone(),
        level,
        class: Some(guidance.class),
    })?;
    if guidance.weight == 0.0 {
        return Ok(unconditional);
    }
    if guidance.weight == 1.0 {
        return Ok(conditional);
    }
    let diff = conditional.sub(&unconditional)?;
    unconditional.add_scaled(&diff, guidance.weight)
}

/// Run the reverse chain with an explicit denoiser and geometry.
///
/// Returns the image and the complete noise record of the run; replaying
/// that record reproduces the image bit for bit.
#[allow(clippy::too_many_arguments)] // the fully explicit entry point
pub fn sample_with(
    denoiser: &dyn Denoiser,
    s: &Schedule,
    kernel: &Kernel,
    channels: usize,
    height: usize,
    width: usize,
    mut noise: SampleNoise,
    guidance: Option<&GuidanceConfig>,
    representation: GramRepresentation,
) -> CoreResult<(ImageTensor, LatentRecord)> {
    kernel.require_whitening()?;
    let steps = s.steps();
    let factor = kernel.stride().pow(steps as u32);
    if height % factor != 0 || width % factor != 0 || height / factor == 0 || width / factor == 0 {
        return Err(CoreError::NotDivisible {
            height,
            width,
            stride: factor,
        });
    }
    if let SampleNoise::Replay(record) = &noise {
        record.validate()?;
        if record.schedule != s.meta() {
            return Err(CoreError::ReplayMismatch(format!(
                "record was made under schedule {:?}, sampler runs {:?}",
                record.schedule,
                s.meta()
            )));
        }
        if record.channels != channels || record.full_height != height || record.full_width != width
        {
            return Err(CoreError::ReplayMismatch(format!(
                "record geometry {}x{}x{} does not match request {channels}x{height}x{width}",
                record.channels, record.full_height, record.full_width
            )));
        }
    }

    let mut used = Vec::with_capacity(steps);
    let draw =
        |level: usize, h: usize, w: usize, noise: &mut SampleNoise| -> CoreResult<ImageTensor> {
            match noise {
                SampleNoise::Fresh(rng) => ImageTensor::randn(rng, channels, h, w),
                SampleNoise::Replay(record) => Ok(record.noise_for_level(level)?.clone()),
            }
        };

    let mut x = draw(steps, height / factor, width / factor, &mut noise)?;
    used.push(x.clone());
    x.level = Some(1.0);

    for k in (1..=steps).rev() {
        let level = k as f64 / steps as f64;
        let x0_hat = match guidance {
            Some(g) => cfg_predict(denoiser, &x, level, g)?,
            None => denoiser.predict(&DenoiserInput {
                x: x.clone(),
                level,
                class: None,
            })?,
        };
        if x0_hat.shape() != (channels, height, width) {
            return Err(CoreError::ShapeMismatch(format!(
                "denoiser returned {:?}, expected {:?}",
                x0_hat.shape(),
                (channels, height, width)
            )));
        }
        let p = posterior_params_in(&x, &x0_hat, k, s, kernel, representation)?;
        if k > 1 {
            let (c, h, w) = p.mean.shape();
            debug_assert_eq!(c, channels);
            let e = draw(k - 1, h, w, &mut noise)?;
            used.push(e.clone());
            x = posterior_sample_with_noise(&p, &e)?;
            x.level = Some((k - 1) as f64 / steps as f64);
        } else {
            x = p.mean;
        }
    }

    let record = LatentRecord {
        schedule: s.meta(),
        channels,
        full_height: height,
        full_width: width,
        noises: used,
    };
    record.validate()?;
    Ok((x, record))
}

/// Run the reverse chain from a checkpoint, at the geometry it was
/// trained for.
pub fn sample(
    ckp: &Checkpoint,
    noise: SampleNoise,
    options: &SampleOptions,
) -> CoreResult<(ImageTensor, LatentRecord)> {
    let s = ckp.build_schedule()?;
    let net = ckp.denoiser(options.use_ema);
    if let Some(g) = &options.guidance {
        if g.class >= net.arch.class_count {
            return Err(CoreError::UnknownClass {
                class: g.class,
                count: net.arch.class_count,
            });
        }
    }
    sample_with(
        net,
        &s,
        &ckp.kernel,
        net.arch.channels,
        net.arch.image_height,
        net.arch.image_width,
        noise,
        options.guidance.as_ref(),
        options.representation,
    )
}

/// Map a unit-range value to a byte: clamp to `[0, 1]`, scale by 255,
/// round half-to-even.
pub fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Write a 1-channel (grayscale) or 3-channel (RGB) tensor as a PNG.
pub fn write_png(path: &Path, image: &ImageTensor) -> CoreResult<()> {
    let (c, h, w) = image.shape();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => {
            return Err(CoreError::InvalidArgument(format!(
                "PNG output supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(quantize_unit(image.get(ch, y, x)));
            }
        }
    }
    image::save_buffer(path, &bytes, w as u32, h as u32, color)
        .map_err(|e| CoreError::Format(format!("PNG write to {} failed: {e}", path.display())))
}
