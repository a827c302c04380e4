//! The degradation operator: circular blur followed by subsampling.
//!
//! One application maps a `(c, h, w)` grid to `(c, h/s, w/s)` where `s` is
//! the stride: output sample `(oy, ox)` is the tap-weighted sum of the input
//! window whose top-left corner sits at `(s*oy, s*ox)`, wrapping circularly.
//!
//! When the taps fit inside one stride cell (`tap_rows <= s`,
//! `tap_cols <= s`) the windows of distinct output samples never overlap, so
//! the operator rows are mutually orthogonal; with unit-norm taps they are
//! orthonormal and the operator maps white noise to white noise. That single
//! structural fact powers every closed form downstream: the composed forward
//! marginal, the two-eigenvalue posterior covariance, and its square root.

use crate::error::{CoreError, CoreResult};
use crate::fft::{dft2, idft2, SpectrumGrid};
use crate::tensor::ImageTensor;

/// Separately strided blur kernel. `stride == 1` describes a plain circular
/// convolution filter (used for the subsampled autocorrelation below).
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    taps: Vec<f64>,
    tap_rows: usize,
    tap_cols: usize,
    stride: usize,
}

impl Kernel {
    /// Build a kernel from row-major taps. Taps must be finite and non-empty.
    pub fn new(
        taps: Vec<f64>,
        tap_rows: usize,
        tap_cols: usize,
        stride: usize,
    ) -> CoreResult<Self> {
        if stride == 0 {
            return Err(CoreError::InvalidArgument(
                "kernel stride must be >= 1".into(),
            ));
        }
        if tap_rows == 0 || tap_cols == 0 || taps.len() != tap_rows * tap_cols {
            return Err(CoreError::InvalidArgument(format!(
                "kernel taps {}x{} do not match buffer of {}",
                tap_rows,
                tap_cols,
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(CoreError::InvalidArgument(
                "kernel taps must be finite".into(),
            ));
        }
        Ok(Kernel {
            taps,
            tap_rows,
            tap_cols,
            stride,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn tap_rows(&self) -> usize {
        self.tap_rows
    }

    pub fn tap_cols(&self) -> usize {
        self.tap_cols
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    #[inline]
    pub fn tap(&self, ty: usize, tx: usize) -> f64 {
        self.taps[ty * self.tap_cols + tx]
    }

    pub fn tap_sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    /// Taps fit inside one stride cell, so downsampling windows of distinct
    /// output samples never overlap.
    pub fn windows_disjoint(&self) -> bool {
        self.tap_rows <= self.stride && self.tap_cols <= self.stride
    }

    /// Euclidean tap norm is 1 up to 1e-12.
    pub fn has_unit_norm(&self) -> bool {
        (self.l2_norm() - 1.0).abs() <= 1e-12
    }

    /// Disjoint windows with unit-norm taps: the operator rows are
    /// orthonormal and downsampled white noise stays white. Formula paths
    /// that rely on that property call [`Kernel::require_whitening`].
    pub fn is_whitening(&self) -> bool {
        self.windows_disjoint() && self.has_unit_norm()
    }

    pub fn require_whitening(&self) -> CoreResult<()> {
        if self.is_whitening() {
            return Ok(());
        }
        let detail = if !self.windows_disjoint() {
            "taps overlap adjacent windows".to_string()
        } else {
            format!("tap norm {} != 1", self.l2_norm())
        };
        Err(CoreError::KernelNotWhitening {
            tap_rows: self.tap_rows,
            tap_cols: self.tap_cols,
            stride: self.stride,
            detail,
        })
    }
}

/// Uniform box kernel for the given stride: `stride x stride` taps of
/// `1/stride`, which makes the tap norm exactly 1 and the tap sum `stride`.
pub fn box_kernel(stride: usize) -> CoreResult<Kernel> {
    if stride == 0 {
        return Err(CoreError::InvalidArgument("stride must be >= 1".into()));
    }
    let tap = 1.0 / stride as f64;
    Kernel::new(vec![tap; stride * stride], stride, stride, stride)
}

fn check_divisible(x: &ImageTensor, stride: usize) -> CoreResult<()> {
    if x.height() % stride != 0 || x.width() % stride != 0 {
        return Err(CoreError::NotDivisible {
            height: x.height(),
            width: x.width(),
            stride,
        });
    }
    Ok(())
}

/// Blur with the kernel taps and keep every `stride`-th sample (circularly).
pub fn downsample(x: &ImageTensor, kernel: &Kernel) -> CoreResult<ImageTensor> {
    check_divisible(x, kernel.stride())?;
    let (c, h, w) = x.shape();
    let s = kernel.stride();
    let (oh, ow) = (h / s, w / s);
    let mut out = ImageTensor::zeros(c, oh, ow)?;
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ty in 0..kernel.tap_rows() {
                    let iy = (s * oy + ty) % h;
                    for tx in 0..kernel.tap_cols() {
                        let ix = (s * ox + tx) % w;
                        acc += kernel.tap(ty, tx) * src[iy * w + ix];
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    }
    out.level = x.level;
    Ok(out)
}

/// Transpose of [`downsample`]: scatter each coarse sample back through the
/// taps onto a grid `stride` times larger (zero elsewhere, accumulating
/// wherever windows wrap onto each other).
pub fn adjoint(y: &ImageTensor, kernel: &Kernel) -> CoreResult<ImageTensor> {
    let (c, oh, ow) = y.shape();
    let s = kernel.stride();
    let (h, w) = (oh * s, ow * s);
    let mut out = ImageTensor::zeros(c, h, w)?;
    for ch in 0..c {
        let src = y.channel(ch);
        let dst = out.channel_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let v = src[oy * ow + ox];
                for ty in 0..kernel.tap_rows() {
                    let iy = (s * oy + ty) % h;
                    for tx in 0..kernel.tap_cols() {
                        let ix = (s * ox + tx) % w;
                        dst[iy * w + ix] += kernel.tap(ty, tx) * v;
                    }
                }
            }
        }
    }
    out.level = y.level;
    Ok(out)
}

/// Apply [`downsample`] `n` times (identity for `n == 0`).
pub fn downsample_n(x: &ImageTensor, kernel: &Kernel, n: usize) -> CoreResult<ImageTensor> {
    let mut cur = x.clone();
    for _ in 0..n {
        cur = downsample(&cur, kernel)?;
    }
    Ok(cur)
}

/// Apply [`adjoint`] `n` times (identity for `n == 0`).
pub fn adjoint_n(y: &ImageTensor, kernel: &Kernel, n: usize) -> CoreResult<ImageTensor> {
    let mut cur = y.clone();
    for _ in 0..n {
        cur = adjoint(&cur, kernel)?;
    }
    Ok(cur)
}

/// How downsample-then-adjoint (the Gram operator of one degradation step)
/// is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
pub enum GramRepresentation {
    /// Exact composition `adjoint(downsample(x))`. For whitening kernels this
    /// is an orthogonal projector onto the coarse-grid subspace.
    #[serde(rename = "projector")]
    #[default]
    Projector,
    /// Circulant surrogate: pointwise spectral multiplication by the DFT of
    /// the stride-subsampled tap autocorrelation. Kept for comparison; for a
    /// whitening box kernel the filter collapses to a unit impulse, so this
    /// route is the identity and differs from the projector on any input
    /// with energy outside the coarse subspace.
    #[serde(rename = "dft-literal")]
    DftLiteral,
}

/// Gram operator of one degradation step on a fixed grid.
#[derive(Debug, Clone)]
pub struct GramDescriptor {
    kernel: Kernel,
    grid_height: usize,
    grid_width: usize,
    representation: GramRepresentation,
    /// DFT of the embedded autocorrelation filter; only for `DftLiteral`.
    filter_spectrum: Option<SpectrumGrid>,
}

impl GramDescriptor {
    pub fn new(
        kernel: &Kernel,
        grid_height: usize,
        grid_width: usize,
        representation: GramRepresentation,
    ) -> CoreResult<Self> {
        if grid_height % kernel.stride() != 0 || grid_width % kernel.stride() != 0 {
            return Err(CoreError::NotDivisible {
                height: grid_height,
                width: grid_width,
                stride: kernel.stride(),
            });
        }
        let filter_spectrum = match representation {
            GramRepresentation::Projector => None,
            GramRepresentation::DftLiteral => {
                let filter = gram_filter_polyphase(kernel)?;
                let embedded = embed_centered_filter(&filter, grid_height, grid_width);
                Some(dft2(grid_height, grid_width, &embedded)?)
            }
        };
        Ok(GramDescriptor {
            kernel: kernel.clone(),
            grid_height,
            grid_width,
            representation,
            filter_spectrum,
        })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_height, self.grid_width)
    }

    pub fn stride(&self) -> usize {
        self.kernel.stride()
    }

    pub fn representation(&self) -> GramRepresentation {
        self.representation
    }

    /// Spectrum of the circulant surrogate filter (DftLiteral only).
    pub fn filter_spectrum(&self) -> Option<&SpectrumGrid> {
        self.filter_spectrum.as_ref()
    }

    pub fn check_input(&self, x: &ImageTensor) -> CoreResult<()> {
        if x.height() != self.grid_height || x.width() != self.grid_width {
            return Err(CoreError::ShapeMismatch(format!(
                "gram operator built for {}x{}, input is {}x{}",
                self.grid_height,
                self.grid_width,
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }
}

/// Apply the Gram operator in the descriptor's representation.
pub fn gram_apply(x: &ImageTensor, gram: &GramDescriptor) -> CoreResult<ImageTensor> {
    gram.check_input(x)?;
    match gram.representation() {
        GramRepresentation::Projector => adjoint(&downsample(x, gram.kernel())?, gram.kernel()),
        GramRepresentation::DftLiteral => {
            let spectrum = gram
                .filter_spectrum()
                .expect("DftLiteral descriptor always caches its filter spectrum");
            let (c, h, w) = x.shape();
            let mut out = ImageTensor::zeros(c, h, w)?;
            for ch in 0..c {
                let xs = dft2(h, w, x.channel(ch))?;
                let ys = xs.multiplied(spectrum)?;
                out.channel_mut(ch).copy_from_slice(&idft2(&ys)?);
            }
            out.level = x.level;
            Ok(out)
        }
    }
}

/// Tap autocorrelation subsampled by the stride: the filter whose circular
/// convolution the circulant surrogate uses in place of the exact Gram
/// operator. Returned as a stride-1 kernel with odd tap counts; the center
/// tap is the zero lag. For any kernel whose taps fit inside one stride cell
/// only the zero lag survives, giving the single tap `sq_norm` (1 for
/// unit-norm taps).
pub fn gram_filter_polyphase(kernel: &Kernel) -> CoreResult<Kernel> {
    let (kh, kw, s) = (kernel.tap_rows(), kernel.tap_cols(), kernel.stride());
    let lag_rows = (kh - 1) / s;
    let lag_cols = (kw - 1) / s;
    let (fh, fw) = (2 * lag_rows + 1, 2 * lag_cols + 1);
    let mut taps = vec![0.0; fh * fw];
    for (pi, p) in (-(lag_rows as isize)..=lag_rows as isize).enumerate() {
        for (qi, q) in (-(lag_cols as isize)..=lag_cols as isize).enumerate() {
            let (du, dv) = (p * s as isize, q * s as isize);
            let mut acc = 0.0;
            for ty in 0..kh as isize {
                for tx in 0..kw as isize {
                    let (uy, ux) = (ty + du, tx + dv);
                    if uy >= 0 && uy < kh as isize && ux >= 0 && ux < kw as isize {
                        acc += kernel.tap(ty as usize, tx as usize)
                            * kernel.tap(uy as usize, ux as usize);
                    }
                }
            }
            taps[pi * fw + qi] = acc;
        }
    }
    Kernel::new(taps, fh, fw, 1)
}

/// Place a centered stride-1 filter onto a circular grid: the center tap
/// lands at `(0, 0)` and lags wrap around, accumulating on collision.
fn embed_centered_filter(filter: &Kernel, height: usize, width: usize) -> Vec<f64> {
    let mut grid = vec![0.0; height * width];
    let cy = (filter.tap_rows() / 2) as isize;
    let cx = (filter.tap_cols() / 2) as isize;
    for ty in 0..filter.tap_rows() as isize {
        for tx in 0..filter.tap_cols() as isize {
            let gy = (ty - cy).rem_euclid(height as isize) as usize;
            let gx = (tx - cx).rem_euclid(width as isize) as usize;
            grid[gy * width + gx] += filter.tap(ty as usize, tx as usize);
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn box_kernel_taps_and_norms() {
        let k = box_kernel(2).unwrap();
        assert_eq!(k.taps(), &[0.5, 0.5, 0.5, 0.5]);
        assert!((k.l2_norm() - 1.0).abs() < 1e-15);
        assert!((k.tap_sum() - 2.0).abs() < 1e-15);
        assert!(k.is_whitening());
        let k4 = box_kernel(4).unwrap();
        assert!((k4.tap_sum() - 4.0).abs() < 1e-12);
        assert!(k4.is_whitening());
    }

    #[test]
    fn downsample_box_examples() {
        let k = box_kernel(2).unwrap();
        let ones = ImageTensor::from_vec(1, 2, 2, vec![1.0; 4]).unwrap();
        let out = downsample(&ones, &k).unwrap();
        assert_eq!(out.shape(), (1, 1, 1));
        assert!((out.get(0, 0, 0) - 2.0).abs() < 1e-15);

        let impulse = ImageTensor::from_vec(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let out = downsample(&impulse, &k).unwrap();
        assert!((out.get(0, 0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adjoint_box_example() {
        let k = box_kernel(2).unwrap();
        let c = 3.0;
        let y = ImageTensor::from_vec(1, 1, 1, vec![c]).unwrap();
        let up = adjoint(&y, &k).unwrap();
        assert_eq!(up.shape(), (1, 2, 2));
        for v in up.as_slice() {
            assert!((v - c / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn non_divisible_grid_rejected() {
        let k = box_kernel(2).unwrap();
        let x = ImageTensor::zeros(1, 3, 4).unwrap();
        match downsample(&x, &k) {
            Err(CoreError::NotDivisible {
                height: 3,
                width: 4,
                stride: 2,
            }) => {}
            other => panic!("expected NotDivisible, got {other:?}"),
        }
    }

    #[test]
    fn adjointness_inner_products_match() {
        let mut rng = RngStream::new(21, 0);
        for trial in 0..100 {
            let s = 2 + trial % 3; // strides 2, 3, 4
            let k = box_kernel(s).unwrap();
            let h = s * (1 + rng.next_index(4));
            let w = s * (1 + rng.next_index(4));
            let x = ImageTensor::randn(&mut rng, 1, h, w).unwrap();
            let y = ImageTensor::randn(&mut rng, 1, h / s, w / s).unwrap();
            let lhs = downsample(&x, &k).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&adjoint(&y, &k).unwrap()).unwrap();
            let scale = lhs.abs().max(rhs.abs()).max(1e-12);
            assert!(
                ((lhs - rhs) / scale).abs() < 1e-10,
                "adjoint identity violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn adjointness_holds_for_overlapping_kernels_too() {
        // A 3x3 kernel with stride 2 overlaps adjacent windows; downsample
        // and adjoint must still be exact transposes of each other.
        let taps: Vec<f64> = (1..=9).map(|v| v as f64 / 10.0).collect();
        let k = Kernel::new(taps, 3, 3, 2).unwrap();
        assert!(!k.windows_disjoint());
        let mut rng = RngStream::new(22, 0);
        for _ in 0..50 {
            let x = ImageTensor::randn(&mut rng, 1, 8, 6).unwrap();
            let y = ImageTensor::randn(&mut rng, 1, 4, 3).unwrap();
            let lhs = downsample(&x, &k).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&adjoint(&y, &k).unwrap()).unwrap();
            let scale = lhs.abs().max(rhs.abs()).max(1e-12);
            assert!(((lhs - rhs) / scale).abs() < 1e-10);
        }
    }

    #[test]
    fn projector_gram_on_impulse_spreads_box_average() {
        let k = box_kernel(2).unwrap();
        let g = GramDescriptor::new(&k, 2, 2, GramRepresentation::Projector).unwrap();
        let x = ImageTensor::from_vec(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let out = gram_apply(&x, &g).unwrap();
        for v in out.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn projector_gram_is_idempotent_for_whitening_kernels() {
        let mut rng = RngStream::new(23, 0);
        for s in [2usize, 3] {
            let k = box_kernel(s).unwrap();
            let g = GramDescriptor::new(&k, 6 * s, 6 * s, GramRepresentation::Projector).unwrap();
            let x = ImageTensor::randn(&mut rng, 2, 6 * s, 6 * s).unwrap();
            let once = gram_apply(&x, &g).unwrap();
            let twice = gram_apply(&once, &g).unwrap();
            assert!(
                once.max_abs_diff(&twice).unwrap() < 1e-12,
                "projector must be idempotent at stride {s}"
            );
        }
    }

    #[test]
    fn polyphase_filter_collapses_for_disjoint_windows() {
        let k = box_kernel(2).unwrap();
        let f = gram_filter_polyphase(&k).unwrap();
        assert_eq!((f.tap_rows(), f.tap_cols()), (1, 1));
        assert!((f.taps()[0] - 1.0).abs() < 1e-15);

        // 1x2 taps [0.6, 0.8] at stride 2: unit norm, disjoint windows.
        let k = Kernel::new(vec![0.6, 0.8], 1, 2, 2).unwrap();
        assert!(k.is_whitening());
        let f = gram_filter_polyphase(&k).unwrap();
        assert_eq!((f.tap_rows(), f.tap_cols()), (1, 1));
        assert!((f.taps()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn polyphase_filter_keeps_overlap_lags() {
        // Stride 1 keeps every lag: autocorrelation of [1, 1] is [1, 2, 1].
        let k = Kernel::new(vec![1.0, 1.0], 1, 2, 1).unwrap();
        let f = gram_filter_polyphase(&k).unwrap();
        assert_eq!((f.tap_rows(), f.tap_cols()), (1, 3));
        assert_eq!(f.taps(), &[1.0, 2.0, 1.0]);
    }

    #[test]
    fn literal_gram_is_identity_for_box_but_projector_is_not() {
        let k = box_kernel(2).unwrap();
        let lit = GramDescriptor::new(&k, 2, 2, GramRepresentation::DftLiteral).unwrap();
        let proj = GramDescriptor::new(&k, 2, 2, GramRepresentation::Projector).unwrap();
        let x = ImageTensor::from_vec(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let out_lit = gram_apply(&x, &lit).unwrap();
        assert!(
            out_lit.max_abs_diff(&x).unwrap() < 1e-12,
            "unit-impulse filter must act as the identity"
        );
        let out_proj = gram_apply(&x, &proj).unwrap();
        assert!(
            out_lit.max_abs_diff(&out_proj).unwrap() > 0.5,
            "the two representations must disagree on non-constant input"
        );
        // On constant input both agree: the projector keeps constants and the
        // impulse filter is the identity.
        let c = ImageTensor::from_vec(1, 2, 2, vec![0.7; 4]).unwrap();
        let a = gram_apply(&c, &lit).unwrap();
        let b = gram_apply(&c, &proj).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn repeated_downsample_shrinks_by_stride_powers() {
        let k = box_kernel(2).unwrap();
        let x = ImageTensor::zeros(3, 16, 8).unwrap();
        let d = downsample_n(&x, &k, 3).unwrap();
        assert_eq!(d.shape(), (3, 2, 1));
        let u = adjoint_n(&d, &k, 3).unwrap();
        assert_eq!(u.shape(), (3, 16, 8));
        let id = downsample_n(&x, &k, 0).unwrap();
        assert_eq!(id.shape(), x.shape());
    }
}
