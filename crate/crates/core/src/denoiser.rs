//! Clean-image predictor: a small convolutional network that maps a coarse
//! noisy image (plus a level and an optional class) to a full-resolution
//! clean estimate.
//!
//! Layout: bilinear upsample to the working resolution, four 3x3 circular
//! convolutions (channels -> hidden -> hidden -> hidden -> channels) with
//! ReLU between them, and the upsampled input added back at the output. A
//! sinusoidal level embedding plus a learned class row feed each layer as a
//! projected per-channel bias. The final convolution starts at zero, so a
//! fresh network reproduces its upsampled input exactly.
//!
//! The backward pass is written out by hand and is exact for the forward
//! pass as implemented; gradient checks against central differences pin
//! that down in the verification suite.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, CoreResult};
use crate::rng::RngStream;
use crate::tensor::{ImageTensor, Precision};

/// Shape of the network; hashed into checkpoints so a file can only be
/// loaded back into the architecture that wrote it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub channels: usize,
    pub hidden: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Number of real classes; 0 trains an unconditional-only model. One
    /// extra embedding row beyond these serves as the "no class" token.
    pub class_count: usize,
    pub embed_dim: usize,
}

impl ArchDescriptor {
    /// The default toy shape: hidden width 32, embedding width 32.
    pub fn toy(
        channels: usize,
        image_height: usize,
        image_width: usize,
        class_count: usize,
    ) -> Self {
        ArchDescriptor {
            channels,
            hidden: 32,
            image_height,
            image_width,
            class_count,
            embed_dim: 32,
        }
    }

    pub fn validate(&self) -> CoreResult<()> {
        if self.channels == 0 || self.hidden == 0 || self.image_height == 0 || self.image_width == 0
        {
            return Err(CoreError::InvalidArgument(
                "architecture dimensions must be positive".into(),
            ));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "embedding width {} must be positive and even",
                self.embed_dim
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the serialized descriptor.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("descriptor serialization cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn layer_dims(&self) -> [(usize, usize); 4] {
        [
            (self.channels, self.hidden),
            (self.hidden, self.hidden),
            (self.hidden, self.hidden),
            (self.hidden, self.channels),
        ]
    }
}

/// One 3x3 circular convolution with a bias and a per-output-channel
/// projection of the level/class embedding.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out_ch][in_ch][3][3]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// `[out_ch][embed_dim]`, row-major.
    pub time_proj: Vec<f64>,
}

impl ConvLayer {
    fn zeros(in_ch: usize, out_ch: usize, embed_dim: usize) -> Self {
        ConvLayer {
            in_ch,
            out_ch,
            weights: vec![0.0; out_ch * in_ch * 9],
            bias: vec![0.0; out_ch],
            time_proj: vec![0.0; out_ch * embed_dim],
        }
    }
}

/// Input to a clean-image prediction: the coarse image, its level in
/// `(0, 1]`, and an optional class label.
#[derive(Debug, Clone)]
pub struct DenoiserInput {
    pub x: ImageTensor,
    pub level: f64,
    pub class: Option<usize>,
}

/// Anything that predicts a clean image from a degraded one.
pub trait Denoiser {
    fn predict(&self, input: &DenoiserInput) -> CoreResult<ImageTensor>;
    /// Number of real classes the predictor understands (0 if none).
    fn class_count(&self) -> usize {
        0
    }
}

/// Full parameter set of the convolutional predictor.
#[derive(Debug, Clone)]
pub struct ConvNetParams {
    pub arch: ArchDescriptor,
    pub layers: Vec<ConvLayer>,
    /// `[class_count + 1][embed_dim]`; the last row is the "no class" token.
    pub class_embed: Vec<f64>,
    /// Storage/compute tag: `F32` rounds parameters and activations to
    /// 32-bit at operator boundaries (arithmetic itself stays 64-bit).
    pub precision: Precision,
}

impl ConvNetParams {
    /// All-zero parameters in the given shape.
    pub fn zeros(arch: &ArchDescriptor) -> CoreResult<Self> {
        arch.validate()?;
        let layers = arch
            .layer_dims()
            .iter()
            .map(|&(i, o)| ConvLayer::zeros(i, o, arch.embed_dim))
            .collect();
        Ok(ConvNetParams {
            arch: arch.clone(),
            layers,
            class_embed: vec![0.0; (arch.class_count + 1) * arch.embed_dim],
            precision: Precision::F64,
        })
    }

    /// Standard initialization. Convolution weights draw uniformly from
    /// `+-1/sqrt(in_ch * 9)`, embedding projections and class rows from
    /// `+-1/sqrt(embed_dim)`, biases start at zero, and the final layer is
    /// left entirely at zero so the fresh network is the identity around
    /// its upsampled input. Draw order is fixed: per layer weights then
    /// projection, then the class table.
    pub fn init(arch: &ArchDescriptor, rng: &mut RngStream) -> CoreResult<Self> {
        let mut p = Self::zeros(arch)?;
        let last = p.layers.len() - 1;
        for (idx, layer) in p.layers.iter_mut().enumerate() {
            if idx == last {
                continue;
            }
            let w_scale = 1.0 / ((layer.in_ch * 9) as f64).sqrt();
            for w in layer.weights.iter_mut() {
                *w = rng.next_range(-w_scale, w_scale);
            }
            let t_scale = 1.0 / (arch.embed_dim as f64).sqrt();
            for t in layer.time_proj.iter_mut() {
                *t = rng.next_range(-t_scale, t_scale);
            }
        }
        let c_scale = 1.0 / (arch.embed_dim as f64).sqrt();
        for c in p.class_embed.iter_mut() {
            *c = rng.next_range(-c_scale, c_scale);
        }
        Ok(p)
    }

    /// Every tensor uniform in `+-0.5` - no zero blocks anywhere. Used
    /// when probing gradients, where a zeroed final layer would silence
    /// most of the parameter space.
    pub fn init_dense_random(arch: &ArchDescriptor, rng: &mut RngStream) -> CoreResult<Self> {
        let mut p = Self::zeros(arch)?;
        for layer in p.layers.iter_mut() {
            for w in layer.weights.iter_mut() {
                *w = rng.next_range(-0.5, 0.5);
            }
            for b in layer.bias.iter_mut() {
                *b = rng.next_range(-0.5, 0.5);
            }
            for t in layer.time_proj.iter_mut() {
                *t = rng.next_range(-0.5, 0.5);
            }
        }
        for c in p.class_embed.iter_mut() {
            *c = rng.next_range(-0.5, 0.5);
        }
        Ok(p)
    }

    /// Stable (name, data) views over every parameter tensor.
    pub fn named_tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weights"), &layer.weights));
            out.push((format!("layer{i}.bias"), &layer.bias));
            out.push((format!("layer{i}.time_proj"), &layer.time_proj));
        }
        out.push(("class_embed".to_string(), &self.class_embed));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.weights"), &mut layer.weights));
            out.push((format!("layer{i}.bias"), &mut layer.bias));
            out.push((format!("layer{i}.time_proj"), &mut layer.time_proj));
        }
        out.push(("class_embed".to_string(), &mut self.class_embed));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Concatenate all tensors in `named_tensors` order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (_, t) in self.named_tensors() {
            flat.extend_from_slice(t);
        }
        flat
    }

    /// Overwrite all tensors from a flat vector in `named_tensors` order.
    pub fn assign_from_flat(&mut self, flat: &[f64]) -> CoreResult<()> {
        if flat.len() != self.param_count() {
            return Err(CoreError::ShapeMismatch(format!(
                "flat parameter vector has {} entries, network has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.named_tensors_mut() {
            let len = t.len();
            t.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Round every parameter to 32-bit.
    pub fn quantize_f32(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Resolve a class label to its embedding row; `None` maps to the
    /// trailing "no class" row.
    fn class_row(&self, class: Option<usize>) -> CoreResult<usize> {
        match class {
            None => Ok(self.arch.class_count),
            Some(c) if c < self.arch.class_count => Ok(c),
            Some(c) => Err(CoreError::UnknownClass {
                class: c,
                count: self.arch.class_count,
            }),
        }
    }

    /// Forward pass that keeps every intermediate needed by `backward`.
    pub fn predict_with_cache(
        &self,
        input: &DenoiserInput,
    ) -> CoreResult<(ImageTensor, ForwardCache)> {
        if input.x.channels() != self.arch.channels {
            return Err(CoreError::ShapeMismatch(format!(
                "input has {} channels, network expects {}",
                input.x.channels(),
                self.arch.channels
            )));
        }
        if !input.level.is_finite() || input.level <= 0.0 || input.level > 1.0 {
            return Err(CoreError::InvalidArgument(format!(
                "prediction level {} outside (0, 1]",
                input.level
            )));
        }
        let quantize = self.precision == Precision::F32;
        let round = |t: &mut ImageTensor| {
            if quantize {
                t.quantize_f32();
            }
        };

        let mut up = bilinear_resize(&input.x, self.arch.image_height, self.arch.image_width)?;
        round(&mut up);

        let row = self.class_row(input.class)?;
        let mut emb = time_embedding(input.level, self.arch.embed_dim);
        let class_row =
            &self.class_embed[row * self.arch.embed_dim..(row + 1) * self.arch.embed_dim];
        for (e, c) in emb.iter_mut().zip(class_row) {
            *e += c;
            if quantize {
                *e = *e as f32 as f64;
            }
        }

        let mut activations = vec![up.clone()];
        let mut pre_activations = Vec::with_capacity(self.layers.len() - 1);
        let mut current = up.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut h = conv3x3_circular(&current, layer)?;
            // Projected embedding enters as one extra bias per channel.
            for o in 0..layer.out_ch {
                let proj = &layer.time_proj[o * self.arch.embed_dim..(o + 1) * self.arch.embed_dim];
                let tb: f64 = proj.iter().zip(emb.iter()).map(|(p, e)| p * e).sum();
                for v in h.channel_mut(o) {
                    *v += tb;
                }
            }
            round(&mut h);
            if idx + 1 < self.layers.len() {
                pre_activations.push(h.clone());
                for v in h.as_mut_slice() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                activations.push(h.clone());
                current = h;
            } else {
                current = h;
            }
        }

        let mut out = current.add_scaled(&up, 1.0)?;
        round(&mut out);
        out.level = input.x.level;
        out.precision = self.precision;
        Ok((
            out.clone(),
            ForwardCache {
                activations,
                pre_activations,
                embedding: emb,
                class_row_index: row,
            },
        ))
    }

    /// Gradients of a scalar loss with respect to every parameter, given
    /// the loss gradient at the output. Returns a parameter-shaped
    /// structure (precision `F64`; callers quantize if they train in
    /// 32-bit).
    pub fn backward(&self, cache: &ForwardCache, d_out: &ImageTensor) -> CoreResult<ConvNetParams> {
        let mut grads = ConvNetParams::zeros(&self.arch)?;
        let embed_dim = self.arch.embed_dim;
        let mut d_emb = vec![0.0; embed_dim];

        // d_out feeds the last convolution directly (no ReLU after it);
        // the residual branch needs no parameter gradients.
        let mut d_h = d_out.clone();
        for idx in (0..self.layers.len()).rev() {
            if idx + 1 < self.layers.len() {
                // Gate by the ReLU that followed this layer's output.
                let pre = &cache.pre_activations[idx];
                for (d, p) in d_h.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if *p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let layer = &self.layers[idx];
            let g = &mut grads.layers[idx];
            // Bias and embedding projection share the per-channel sum.
            for o in 0..layer.out_ch {
                let s: f64 = d_h.channel(o).iter().sum();
                g.bias[o] += s;
                let proj = &layer.time_proj[o * embed_dim..(o + 1) * embed_dim];
                for k in 0..embed_dim {
                    g.time_proj[o * embed_dim + k] += s * cache.embedding[k];
                    d_emb[k] += s * proj[k];
                }
            }
            let input = &cache.activations[idx];
            let d_input = conv3x3_backward(input, layer, &d_h, &mut g.weights)?;
            d_h = d_input;
        }

        let row = cache.class_row_index;
        let row_grads = &mut grads.class_embed[row * embed_dim..(row + 1) * embed_dim];
        for (g, d) in row_grads.iter_mut().zip(&d_emb) {
            *g += d;
        }
        Ok(grads)
    }
}

impl Denoiser for ConvNetParams {
    fn predict(&self, input: &DenoiserInput) -> CoreResult<ImageTensor> {
        self.predict_with_cache(input).map(|(out, _)| out)
    }

    fn class_count(&self) -> usize {
        self.arch.class_count
    }
}

/// Intermediates retained by `predict_with_cache` for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Inputs to each convolution: upsampled image, then each ReLU output.
    activations: Vec<ImageTensor>,
    /// Pre-ReLU outputs of the non-final layers (for gating gradients).
    pre_activations: Vec<ImageTensor>,
    embedding: Vec<f64>,
    class_row_index: usize,
}

/// Exponential moving average: `shadow <- decay * shadow + (1 - decay) * live`.
pub fn ema_update(shadow: &mut ConvNetParams, live: &ConvNetParams, decay: f64) -> CoreResult<()> {
    if shadow.arch != live.arch {
        return Err(CoreError::ShapeMismatch(
            "EMA shadow and live parameters have different architectures".into(),
        ));
    }
    let live_tensors = live.named_tensors();
    for ((_, s), (_, l)) in shadow.named_tensors_mut().into_iter().zip(live_tensors) {
        for (sv, lv) in s.iter_mut().zip(l.iter()) {
            *sv = decay * *sv + (1.0 - decay) * *lv;
        }
    }
    Ok(())
}

/// Sinusoidal embedding of a level: pairs `(sin, cos)` of
/// `pi * level * 2^j` for `j = 0 .. dim/2`.
pub fn time_embedding(level: f64, dim: usize) -> Vec<f64> {
    let mut emb = vec![0.0; dim];
    for j in 0..dim / 2 {
        let angle = std::f64::consts::PI * level * (1u64 << j) as f64;
        emb[2 * j] = angle.sin();
        emb[2 * j + 1] = angle.cos();
    }
    emb
}

/// Bilinear resampling on a circular domain with half-pixel centers:
/// output pixel `y` reads source coordinate `(y + 0.5) * h_in / h_out - 0.5`,
/// wrapping indices that fall off either edge.
pub fn bilinear_resize(x: &ImageTensor, out_h: usize, out_w: usize) -> CoreResult<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(CoreError::InvalidArgument(
            "resize target must be positive".into(),
        ));
    }
    let (c, h, w) = x.shape();
    let mut out = ImageTensor::zeros(c, out_h, out_w)?;
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    // Precompute per-row / per-column taps once.
    let taps = |n_in: usize, n_out: usize, scale: f64| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let src = (i as f64 + 0.5) * scale - 0.5;
                let i0 = src.floor();
                let frac = src - i0;
                let a = (i0 as isize).rem_euclid(n_in as isize) as usize;
                let b = (i0 as isize + 1).rem_euclid(n_in as isize) as usize;
                (a, b, frac)
            })
            .collect()
    };
    let row_taps = taps(h, out_h, scale_y);
    let col_taps = taps(w, out_w, scale_x);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for (oy, &(y0, y1, fy)) in row_taps.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in col_taps.iter().enumerate() {
                let v00 = src[y0 * w + x0];
                let v01 = src[y0 * w + x1];
                let v10 = src[y1 * w + x0];
                let v11 = src[y1 * w + x1];
                dst[oy * out_w + ox] =
                    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
    }
    out.level = x.level;
    out.precision = x.precision;
    Ok(out)
}

/// Copy one channel plane into a circularly padded `(h+2) x (w+2)` buffer.
fn pad_circular(plane: &[f64], h: usize, w: usize, padded: &mut Vec<f64>) {
    let pw = w + 2;
    padded.clear();
    padded.resize((h + 2) * pw, 0.0);
    for y in 0..h + 2 {
        let sy = (y as isize - 1).rem_euclid(h as isize) as usize;
        let src_row = &plane[sy * w..(sy + 1) * w];
        let dst_row = &mut padded[y * pw..(y + 1) * pw];
        dst_row[1..1 + w].copy_from_slice(src_row);
        dst_row[0] = src_row[w - 1];
        dst_row[1 + w] = src_row[0];
    }
}

/// 3x3 convolution with circular padding; adds the layer bias.
pub fn conv3x3_circular(input: &ImageTensor, layer: &ConvLayer) -> CoreResult<ImageTensor> {
    let (c, h, w) = input.shape();
    if c != layer.in_ch {
        return Err(CoreError::ShapeMismatch(format!(
            "convolution expects {} input channels, got {c}",
            layer.in_ch
        )));
    }
    let mut out = ImageTensor::zeros(layer.out_ch, h, w)?;
    for o in 0..layer.out_ch {
        let b = layer.bias[o];
        for v in out.channel_mut(o) {
            *v = b;
        }
    }
    let pw = w + 2;
    let mut padded = Vec::new();
    for i in 0..layer.in_ch {
        pad_circular(input.channel(i), h, w, &mut padded);
        for o in 0..layer.out_ch {
            let w_base = (o * layer.in_ch + i) * 9;
            for ty in 0..3 {
                for tx in 0..3 {
                    let tap = layer.weights[w_base + ty * 3 + tx];
                    if tap == 0.0 {
                        continue;
                    }
                    let out_plane = out.channel_mut(o);
                    for y in 0..h {
                        let src_row = &padded[(y + ty) * pw + tx..(y + ty) * pw + tx + w];
                        let dst_row = &mut out_plane[y * w..(y + 1) * w];
                        for (d, s) in dst_row.iter_mut().zip(src_row) {
                            *d += tap * s;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward of `conv3x3_circular`: accumulates weight gradients into
/// `d_weights` and returns the gradient with respect to the input.
fn conv3x3_backward(
    input: &ImageTensor,
    layer: &ConvLayer,
    d_out: &ImageTensor,
    d_weights: &mut [f64],
) -> CoreResult<ImageTensor> {
    let (c, h, w) = input.shape();
    let pw = w + 2;
    let mut d_input = ImageTensor::zeros(c, h, w)?;
    let mut padded = Vec::new();
    let mut d_padded = vec![0.0; (h + 2) * pw];
    for i in 0..layer.in_ch {
        pad_circular(input.channel(i), h, w, &mut padded);
        for v in d_padded.iter_mut() {
            *v = 0.0;
        }
        for o in 0..layer.out_ch {
            let w_base = (o * layer.in_ch + i) * 9;
            let d_plane = d_out.channel(o);
            for ty in 0..3 {
                for tx in 0..3 {
                    let mut acc = 0.0;
                    let tap = layer.weights[w_base + ty * 3 + tx];
                    for y in 0..h {
                        let src_row = &padded[(y + ty) * pw + tx..(y + ty) * pw + tx + w];
                        let d_row = &d_plane[y * w..(y + 1) * w];
                        let dst_row = &mut d_padded[(y + ty) * pw + tx..(y + ty) * pw + tx + w];
                        for ((s, d), dp) in src_row.iter().zip(d_row).zip(dst_row.iter_mut()) {
                            acc += s * d;
                            *dp += tap * d;
                        }
                    }
                    d_weights[w_base + ty * 3 + tx] += acc;
                }
            }
        }
        // Fold the padded border contributions back onto the torus.
        let plane = d_input.channel_mut(i);
        for y in 0..h + 2 {
            let sy = (y as isize - 1).rem_euclid(h as isize) as usize;
            for x in 0..pw {
                let sx = (x as isize - 1).rem_euclid(w as isize) as usize;
                plane[sy * w + sx] += d_padded[y * pw + x];
            }
        }
    }
    Ok(d_input)
}

/// A predictor that already knows the clean image and returns it verbatim.
/// The ideal endpoint for exactness checks: with it, reverse steps collapse
/// onto analytically known means.
pub struct OracleDenoiser {
    pub target: ImageTensor,
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, _input: &DenoiserInput) -> CoreResult<ImageTensor> {
        Ok(self.target.clone())
    }
}

/// A predictor that returns zeros and counts how often it was called.
pub struct CountingDenoiser {
    channels: usize,
    height: usize,
    width: usize,
    calls: AtomicUsize,
}

impl CountingDenoiser {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        CountingDenoiser {
            channels,
            height,
            width,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Denoiser for CountingDenoiser {
    fn predict(&self, _input: &DenoiserInput) -> CoreResult<ImageTensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        ImageTensor::zeros(self.channels, self.height, self.width)
    }
}
