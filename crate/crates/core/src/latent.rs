//! Editing recorded sampling runs: blending several runs' noise maps and
//! re-rolling the noise at a single level.
//!
//! Blends are computed per noise map. Zero-weight terms are skipped
//! entirely rather than multiplied in, so a standard basis weight vector
//! returns that record's noise bytes untouched - replaying a corner of a
//! blend grid is exactly replaying the original run.

use crate::error::{CoreError, CoreResult};
use crate::generation::LatentRecord;
use crate::rng::RngStream;
use crate::tensor::ImageTensor;

fn check_compatible(records: &[&LatentRecord]) -> CoreResult<()> {
    let first = records
        .first()
        .ok_or_else(|| CoreError::InvalidArgument("no records to blend".into()))?;
    first.validate()?;
    for r in &records[1..] {
        r.validate()?;
        if r.schedule != first.schedule {
            return Err(CoreError::ReplayMismatch(
                "records were sampled under different schedules".into(),
            ));
        }
        if r.channels != first.channels
            || r.full_height != first.full_height
            || r.full_width != first.full_width
        {
            return Err(CoreError::ReplayMismatch(
                "records have different geometries".into(),
            ));
        }
    }
    Ok(())
}

/// Linear blend of whole runs: every noise map becomes the weighted sum of
/// the records' maps. Weights are used as given (no normalization).
pub fn interpolate(records: &[&LatentRecord], weights: &[f64]) -> CoreResult<LatentRecord> {
    check_compatible(records)?;
    if records.len() != weights.len() {
        return Err(CoreError::InvalidArgument(format!(
            "{} records but {} weights",
            records.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(CoreError::InvalidArgument(format!(
            "weight {w} is not finite"
        )));
    }
    let template = records[0];
    let mut out = template.clone();
    for (j, slot) in out.noises.iter_mut().enumerate() {
        let mut acc: Option<ImageTensor> = None;
        for (record, &w) in records.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let term = &record.noises[j];
            acc = Some(match acc {
                None => term.scaled(w),
                Some(sum) => sum.add_scaled(term, w)?,
            });
        }
        *slot = match acc {
            Some(t) => t,
            None => {
                let (c, h, w) = slot.shape();
                ImageTensor::zeros(c, h, w)?
            }
        };
    }
    Ok(out)
}

/// Spherical blend of two runs: each noise map pair is interpolated along
/// the great circle between them, preserving Gaussian-typical norms that a
/// straight line would shrink. Falls back to the linear path for
/// degenerate pairs (near-parallel or near-zero maps). Endpoints `t = 0`
/// and `t = 1` return the respective record's bytes untouched.
pub fn interpolate_slerp(a: &LatentRecord, b: &LatentRecord, t: f64) -> CoreResult<LatentRecord> {
    check_compatible(&[a, b])?;
    if !t.is_finite() {
        return Err(CoreError::InvalidArgument(format!(
            "blend position {t} is not finite"
        )));
    }
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return Ok(b.clone());
    }
    let mut out = a.clone();
    for (j, slot) in out.noises.iter_mut().enumerate() {
        let ea = &a.noises[j];
        let eb = &b.noises[j];
        let na = ea.sum_sq().sqrt();
        let nb = eb.sum_sq().sqrt();
        let denom = na * nb;
        let (wa, wb) = if denom < 1e-300 {
            (1.0 - t, t)
        } else {
            let cos = (ea.dot(eb)? / denom).clamp(-1.0, 1.0);
            let theta = cos.acos();
            if theta.sin() < 1e-9 {
                (1.0 - t, t)
            } else {
                (
                    ((1.0 - t) * theta).sin() / theta.sin(),
                    (t * theta).sin() / theta.sin(),
                )
            }
        };
        *slot = ea.scaled(wa).add_scaled(eb, wb)?;
    }
    Ok(out)
}

/// Re-roll the noise at one level: blend the stored map with a fresh draw
/// at relative strength `eps`, rescaled by `1/sqrt(1 + eps^2)` so a
/// standard normal stays standard normal. Strength 0 is a no-op that
/// draws nothing.
pub fn perturb(
    record: &LatentRecord,
    level: usize,
    eps: f64,
    rng: &mut RngStream,
) -> CoreResult<LatentRecord> {
    if !eps.is_finite() || eps < 0.0 {
        return Err(CoreError::InvalidArgument(format!(
            "perturbation strength {eps} must be finite and non-negative"
        )));
    }
    record.validate()?;
    let mut out = record.clone();
    if eps == 0.0 {
        // Still validate the level so a bad request fails loudly.
        out.noise_for_level(level)?;
        return Ok(out);
    }
    let slot = out.noise_for_level_mut(level)?;
    let (c, h, w) = slot.shape();
    let fresh = ImageTensor::randn(rng, c, h, w)?;
    let scale = 1.0 / (1.0 + eps * eps).sqrt();
    *slot = slot.add_scaled(&fresh, eps)?.scaled(scale);
    Ok(out)
}

/// Blend weights for a position in a 1-D (2 records) or 2-D (4 records)
/// blend. `u` moves along the first axis, `v` (ignored for 2 records)
/// along the second; corners of the unit square give exact basis vectors.
pub fn blend_weights(count: usize, u: f64, v: f64) -> CoreResult<Vec<f64>> {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return Err(CoreError::InvalidArgument(format!(
            "blend position ({u}, {v}) outside the unit square"
        )));
    }
    match count {
        2 => Ok(vec![1.0 - u, u]),
        4 => Ok(vec![
            (1.0 - u) * (1.0 - v),
            (1.0 - u) * v,
            u * (1.0 - v),
            u * v,
        ]),
        _ => Err(CoreError::InvalidArgument(format!(
            "blending supports 2 or 4 records, got {count}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::box_kernel;
    use crate::schedule::{Schedule, ScheduleVariant};

    fn random_record(seed: u64) -> LatentRecord {
        let k = box_kernel(2).unwrap();
        let s = Schedule::new(ScheduleVariant::Sine, 3, &k).unwrap();
        let mut rng = RngStream::new(seed, 0);
        let mut record = LatentRecord::zeros(s.meta(), 1, 16, 16).unwrap();
        for noise in record.noises.iter_mut() {
            let (c, h, w) = noise.shape();
            *noise = ImageTensor::randn(&mut rng, c, h, w).unwrap();
        }
        record
    }

    #[test]
    fn basis_weights_return_the_record_bytes() {
        let a = random_record(50);
        let b = random_record(51);
        let picked_a = interpolate(&[&a, &b], &[1.0, 0.0]).unwrap();
        let picked_b = interpolate(&[&a, &b], &[0.0, 1.0]).unwrap();
        for j in 0..3 {
            assert_eq!(picked_a.noises[j].as_slice(), a.noises[j].as_slice());
            assert_eq!(picked_b.noises[j].as_slice(), b.noises[j].as_slice());
        }
    }

    #[test]
    fn blending_is_pointwise_linear() {
        let a = random_record(52);
        let b = random_record(53);
        let mix = interpolate(&[&a, &b], &[0.3, 0.7]).unwrap();
        for j in 0..3 {
            for ((m, x), y) in mix.noises[j]
                .as_slice()
                .iter()
                .zip(a.noises[j].as_slice())
                .zip(b.noises[j].as_slice())
            {
                assert!((m - (0.3 * x + 0.7 * y)).abs() < 1e-15);
            }
        }
        assert!(interpolate(&[&a, &b], &[0.5]).is_err());
        assert!(interpolate(&[], &[]).is_err());
    }

    #[test]
    fn spherical_blend_keeps_gaussian_norms() {
        let a = random_record(54);
        let b = random_record(55);
        assert_eq!(
            interpolate_slerp(&a, &b, 0.0).unwrap().noises[0].as_slice(),
            a.noises[0].as_slice()
        );
        assert_eq!(
            interpolate_slerp(&a, &b, 1.0).unwrap().noises[2].as_slice(),
            b.noises[2].as_slice()
        );
        let mid_s = interpolate_slerp(&a, &b, 0.5).unwrap();
        let mid_l = interpolate(&[&a, &b], &[0.5, 0.5]).unwrap();
        // Compare on the largest map (level 1, 8x8 = 64 entries).
        let norm = |t: &ImageTensor| t.sum_sq().sqrt();
        let base = 0.5 * (norm(&a.noises[2]) + norm(&b.noises[2]));
        let ns = norm(&mid_s.noises[2]);
        let nl = norm(&mid_l.noises[2]);
        assert!(
            (ns / base - 1.0).abs() < 0.15,
            "spherical midpoint norm ratio {}",
            ns / base
        );
        assert!(
            nl / base < 0.9,
            "linear midpoint should shrink norms, ratio {}",
            nl / base
        );
    }

    #[test]
    fn perturbation_touches_only_its_level() {
        let a = random_record(56);
        let mut rng = RngStream::new(57, 0);
        let same = perturb(&a, 2, 0.0, &mut rng).unwrap();
        for j in 0..3 {
            assert_eq!(same.noises[j].as_slice(), a.noises[j].as_slice());
        }
        let moved = perturb(&a, 2, 0.5, &mut rng).unwrap();
        assert_eq!(moved.noises[0].as_slice(), a.noises[0].as_slice());
        assert_eq!(moved.noises[2].as_slice(), a.noises[2].as_slice());
        assert!(moved.noises[1].max_abs_diff(&a.noises[1]).unwrap() > 0.0);
        assert!(perturb(&a, 0, 0.5, &mut rng).is_err());
        assert!(perturb(&a, 4, 0.5, &mut rng).is_err());
        assert!(perturb(&a, 1, -1.0, &mut rng).is_err());
        assert!(perturb(&a, 1, f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn perturbation_preserves_unit_variance() {
        let k = box_kernel(2).unwrap();
        let s = Schedule::new(ScheduleVariant::Sine, 2, &k).unwrap();
        let mut rng = RngStream::new(58, 0);
        let mut record = LatentRecord::zeros(s.meta(), 1, 64, 64).unwrap();
        for noise in record.noises.iter_mut() {
            let (c, h, w) = noise.shape();
            *noise = ImageTensor::randn(&mut rng, c, h, w).unwrap();
        }
        let moved = perturb(&record, 1, 1.0, &mut rng).unwrap();
        let map = moved.noise_for_level(1).unwrap();
        let n = map.numel() as f64;
        let mean = map.as_slice().iter().sum::<f64>() / n;
        let var = map.sum_sq() / n - mean * mean;
        assert!(mean.abs() < 0.1, "mean drifted to {mean}");
        assert!((var - 1.0).abs() < 0.15, "variance drifted to {var}");
    }

    #[test]
    fn grid_weights_hit_corners_exactly() {
        assert_eq!(blend_weights(2, 0.0, 0.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(blend_weights(2, 1.0, 0.0).unwrap(), vec![0.0, 1.0]);
        assert_eq!(
            blend_weights(4, 0.0, 0.0).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            blend_weights(4, 1.0, 1.0).unwrap(),
            vec![0.0, 0.0, 0.0, 1.0]
        );
        let mid = blend_weights(4, 0.5, 0.5).unwrap();
        assert!((mid.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(blend_weights(3, 0.5, 0.5).is_err());
        assert!(blend_weights(2, 1.5, 0.0).is_err());
    }

    #[test]
    fn incompatible_records_are_rejected() {
        let a = random_record(60);
        let k = box_kernel(2).unwrap();
        let s2 = Schedule::new(ScheduleVariant::Sine, 2, &k).unwrap();
        let b = LatentRecord::zeros(s2.meta(), 1, 16, 16).unwrap();
        assert!(interpolate(&[&a, &b], &[0.5, 0.5]).is_err());
        let c = LatentRecord::zeros(a.schedule.clone(), 1, 32, 32).unwrap();
        assert!(interpolate(&[&a, &c], &[0.5, 0.5]).is_err());
    }
}
