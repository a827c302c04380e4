//! Two-dimensional DFT with a fixed convention.
//!
//! * forward transform is unnormalized
//! * inverse transform carries the full `1/(height*width)` factor
//! * the DC bin sits at index `(0, 0)`, spectra are stored row-major
//!
//! Grids are tiny here (at most a few hundred per side), so plans are built
//! per call; rustfft's radix machinery handles the actual butterflies.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{CoreError, CoreResult};

/// Complex spectrum of a single-channel grid, DC at `(0, 0)`, row-major.
#[derive(Debug, Clone)]
pub struct SpectrumGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl SpectrumGrid {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Complex64 {
        self.data[y * self.width + x]
    }

    /// Elementwise product with another spectrum of the same shape.
    pub fn multiplied(&self, other: &SpectrumGrid) -> CoreResult<SpectrumGrid> {
        if self.height != other.height || self.width != other.width {
            return Err(CoreError::ShapeMismatch(format!(
                "spectrum product: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(SpectrumGrid {
            height: self.height,
            width: self.width,
            data,
        })
    }
}

fn check_grid(height: usize, width: usize, len: usize) -> CoreResult<()> {
    if height == 0 || width == 0 {
        return Err(CoreError::InvalidArgument("empty grid for DFT".into()));
    }
    if height * width != len {
        return Err(CoreError::ShapeMismatch(format!(
            "grid {height}x{width} does not match buffer of {len}"
        )));
    }
    Ok(())
}

/// Run row FFTs then column FFTs over a row-major complex buffer, in place.
fn transform_2d(height: usize, width: usize, data: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(width)
    } else {
        planner.plan_fft_forward(width)
    };
    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(height)
    } else {
        planner.plan_fft_forward(height)
    };
    let mut column = vec![Complex64::default(); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = data[y * width + x];
        }
        col_fft.process(&mut column);
        for y in 0..height {
            data[y * width + x] = column[y];
        }
    }
}

/// Unnormalized forward DFT of a real single-channel grid.
pub fn dft2(height: usize, width: usize, values: &[f64]) -> CoreResult<SpectrumGrid> {
    check_grid(height, width, values.len())?;
    let mut data: Vec<Complex64> = values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    transform_2d(height, width, &mut data, false);
    Ok(SpectrumGrid {
        height,
        width,
        data,
    })
}

/// Inverse DFT carrying the `1/(height*width)` factor; returns real parts.
/// Imaginary residue from conjugate-symmetric spectra is discarded.
pub fn idft2(spectrum: &SpectrumGrid) -> CoreResult<Vec<f64>> {
    let (h, w) = (spectrum.height, spectrum.width);
    check_grid(h, w, spectrum.data.len())?;
    let mut data = spectrum.data.clone();
    transform_2d(h, w, &mut data, true);
    let scale = 1.0 / (h * w) as f64;
    Ok(data.into_iter().map(|c| c.re * scale).collect())
}
