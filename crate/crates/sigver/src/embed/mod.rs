//! Embedding network trained with the triplet loss.
//!
//! A small configurable stack of convolution, max-pooling, ReLU and fully
//! connected layers maps a signature image to a fixed-length vector; the
//! Euclidean distance between two embeddings is the statistical
//! dissimilarity of the two signatures. Everything runs in f64 on the CPU
//! and the forward pass is deterministic given parameters and input.

mod train;

pub use train::{
    train, train_network, validate_split, TrainConfig, TrainError, TrainReport, Triplet,
    UserImages,
};

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::GrayImage;

#[derive(Error, Debug)]
pub enum NetworkError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
}

#[derive(Error, Debug)]
pub enum ModelIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, not a model file")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("model file truncated or inconsistent")]
    Truncated,
    #[error("header error: {0}")]
    Header(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// One layer of the architecture descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// 2-D convolution, stride 1, no padding.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    /// Non-overlapping max pooling, window `size`, stride `size`.
    MaxPool { size: usize },
    Relu,
    Flatten,
    Linear { inputs: usize, outputs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Shape {
    c: usize,
    h: usize,
    w: usize,
}

impl Shape {
    fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

fn layer_param_count(layer: &LayerSpec) -> usize {
    match layer {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
        } => out_channels * in_channels * kernel * kernel + out_channels,
        LayerSpec::Linear { inputs, outputs } => outputs * inputs + outputs,
        _ => 0,
    }
}

fn output_shape(layer: &LayerSpec, input: Shape) -> Result<Shape, NetworkError> {
    match *layer {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
        } => {
            if in_channels != input.c {
                return Err(NetworkError::InvalidArchitecture(format!(
                    "conv expects {in_channels} channels, got {}",
                    input.c
                )));
            }
            if kernel == 0 || input.h < kernel || input.w < kernel {
                return Err(NetworkError::InvalidArchitecture(format!(
                    "kernel {kernel} does not fit {}x{}",
                    input.h, input.w
                )));
            }
            Ok(Shape {
                c: out_channels,
                h: input.h - kernel + 1,
                w: input.w - kernel + 1,
            })
        }
        LayerSpec::MaxPool { size } => {
            if size == 0 || input.h < size || input.w < size {
                return Err(NetworkError::InvalidArchitecture(format!(
                    "pool {size} does not fit {}x{}",
                    input.h, input.w
                )));
            }
            Ok(Shape {
                c: input.c,
                h: input.h / size,
                w: input.w / size,
            })
        }
        LayerSpec::Relu => Ok(input),
        LayerSpec::Flatten => Ok(Shape {
            c: input.len(),
            h: 1,
            w: 1,
        }),
        LayerSpec::Linear { inputs, outputs } => {
            if input.h != 1 || input.w != 1 || input.c != inputs {
                return Err(NetworkError::InvalidArchitecture(format!(
                    "linear expects a flat vector of {inputs}, got {}x{}x{}",
                    input.c, input.h, input.w
                )));
            }
            Ok(Shape {
                c: outputs,
                h: 1,
                w: 1,
            })
        }
    }
}

/// Per-layer state kept by the forward pass for the backward pass.
enum LayerTape {
    Conv { input: Vec<f64> },
    MaxPool { argmax: Vec<usize> },
    Relu { active: Vec<bool> },
    Flatten,
    Linear { input: Vec<f64> },
}

/// The embedding model: architecture descriptor plus a flat parameter
/// vector.
#[derive(Debug, Clone)]
pub struct Network {
    input_height: usize,
    input_width: usize,
    layers: Vec<LayerSpec>,
    shapes: Vec<Shape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl Network {
    /// Builds the network with all parameters zero; shapes are validated to
    /// chain correctly from the input plane to a flat embedding.
    pub fn new(
        input_height: usize,
        input_width: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self, NetworkError> {
        if input_height == 0 || input_width == 0 {
            return Err(NetworkError::InvalidArchitecture(
                "input size must be positive".into(),
            ));
        }
        if layers.is_empty() {
            return Err(NetworkError::InvalidArchitecture("no layers".into()));
        }
        let mut shapes = vec![Shape {
            c: 1,
            h: input_height,
            w: input_width,
        }];
        let mut offsets = Vec::with_capacity(layers.len());
        let mut count = 0;
        for layer in &layers {
            offsets.push(count);
            count += layer_param_count(layer);
            let next = output_shape(layer, *shapes.last().unwrap())?;
            shapes.push(next);
        }
        let out = *shapes.last().unwrap();
        if out.h != 1 || out.w != 1 {
            return Err(NetworkError::InvalidArchitecture(
                "output must be a flat vector; end with flatten/linear".into(),
            ));
        }
        Ok(Self {
            input_height,
            input_width,
            layers,
            shapes,
            offsets,
            params: vec![0.0; count],
        })
    }

    /// Default architecture: two conv+pool blocks, one hidden fully
    /// connected layer, 32x32 input, 32-dimensional embedding.
    pub fn default_architecture() -> Self {
        Self::new(
            32,
            32,
            vec![
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 3,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv {
                    in_channels: 3,
                    out_channels: 6,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    inputs: 6 * 6 * 6,
                    outputs: 64,
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    inputs: 64,
                    outputs: 32,
                },
            ],
        )
        .expect("default architecture is consistent")
    }

    /// Uniform fan-in initialization of the weights from a seeded
    /// generator; biases start at zero.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for (layer, &offset) in self.layers.iter().zip(&self.offsets) {
            match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let fan_in = (in_channels * kernel * kernel) as f64;
                    let bound = 1.0 / fan_in.sqrt();
                    let weights = out_channels * in_channels * kernel * kernel;
                    for p in &mut self.params[offset..offset + weights] {
                        *p = rng.gen_range(-bound..bound);
                    }
                    for p in &mut self.params[offset + weights..offset + weights + out_channels] {
                        *p = 0.0;
                    }
                }
                LayerSpec::Linear { inputs, outputs } => {
                    let bound = 1.0 / (inputs as f64).sqrt();
                    let weights = outputs * inputs;
                    for p in &mut self.params[offset..offset + weights] {
                        *p = rng.gen_range(-bound..bound);
                    }
                    for p in &mut self.params[offset + weights..offset + weights + outputs] {
                        *p = 0.0;
                    }
                }
                _ => {}
            }
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.input_height, self.input_width)
    }

    pub fn embedding_dim(&self) -> usize {
        self.shapes.last().unwrap().len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) {
        assert_eq!(params.len(), self.params.len(), "parameter count mismatch");
        self.params = params;
    }

    /// Forward pass on an already prepared input tensor (see
    /// [`prepare_input`]).
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_cached(input).0
    }

    fn forward_cached(&self, input: &[f64]) -> (Vec<f64>, Vec<LayerTape>) {
        assert_eq!(input.len(), self.shapes[0].len(), "input size mismatch");
        let mut data = input.to_vec();
        let mut tapes = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let in_shape = self.shapes[li];
            let out_shape = self.shapes[li + 1];
            let offset = self.offsets[li];
            match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let mut out = vec![0.0; out_shape.len()];
                    let w = &self.params[offset..];
                    let bias_at = out_channels * in_channels * kernel * kernel;
                    for o in 0..out_channels {
                        for y in 0..out_shape.h {
                            for x in 0..out_shape.w {
                                let mut acc = self.params[offset + bias_at + o];
                                for i in 0..in_channels {
                                    for ky in 0..kernel {
                                        for kx in 0..kernel {
                                            let widx = ((o * in_channels + i) * kernel + ky)
                                                * kernel
                                                + kx;
                                            let iidx =
                                                (i * in_shape.h + y + ky) * in_shape.w + x + kx;
                                            acc += w[widx] * data[iidx];
                                        }
                                    }
                                }
                                out[(o * out_shape.h + y) * out_shape.w + x] = acc;
                            }
                        }
                    }
                    tapes.push(LayerTape::Conv { input: data });
                    data = out;
                }
                LayerSpec::MaxPool { size } => {
                    let mut out = vec![0.0; out_shape.len()];
                    let mut argmax = vec![0usize; out_shape.len()];
                    for c in 0..out_shape.c {
                        for oy in 0..out_shape.h {
                            for ox in 0..out_shape.w {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0;
                                for dy in 0..size {
                                    for dx in 0..size {
                                        let iidx = (c * in_shape.h + oy * size + dy) * in_shape.w
                                            + ox * size
                                            + dx;
                                        if data[iidx] > best {
                                            best = data[iidx];
                                            best_idx = iidx;
                                        }
                                    }
                                }
                                let oidx = (c * out_shape.h + oy) * out_shape.w + ox;
                                out[oidx] = best;
                                argmax[oidx] = best_idx;
                            }
                        }
                    }
                    tapes.push(LayerTape::MaxPool { argmax });
                    data = out;
                }
                LayerSpec::Relu => {
                    let active: Vec<bool> = data.iter().map(|&v| v > 0.0).collect();
                    for v in &mut data {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    tapes.push(LayerTape::Relu { active });
                }
                LayerSpec::Flatten => {
                    tapes.push(LayerTape::Flatten);
                }
                LayerSpec::Linear { inputs, outputs } => {
                    let mut out = vec![0.0; outputs];
                    let bias_at = outputs * inputs;
                    for (o, slot) in out.iter_mut().enumerate() {
                        let row = &self.params[offset + o * inputs..offset + (o + 1) * inputs];
                        let mut acc = self.params[offset + bias_at + o];
                        for (wv, iv) in row.iter().zip(&data) {
                            acc += wv * iv;
                        }
                        *slot = acc;
                    }
                    tapes.push(LayerTape::Linear { input: data });
                    data = out;
                }
            }
        }
        (data, tapes)
    }

    /// Backpropagate `grad_output` through the tape, accumulating parameter
    /// gradients into `grad_params` (same layout as `params`).
    fn backward(
        &self,
        tapes: &[LayerTape],
        grad_output: Vec<f64>,
        grad_params: &mut [f64],
    ) {
        let mut grad = grad_output;
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let in_shape = self.shapes[li];
            let out_shape = self.shapes[li + 1];
            let offset = self.offsets[li];
            match (*layer, &tapes[li]) {
                (
                    LayerSpec::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                    },
                    LayerTape::Conv { input },
                ) => {
                    let mut grad_in = vec![0.0; in_shape.len()];
                    let bias_at = out_channels * in_channels * kernel * kernel;
                    for o in 0..out_channels {
                        for y in 0..out_shape.h {
                            for x in 0..out_shape.w {
                                let g = grad[(o * out_shape.h + y) * out_shape.w + x];
                                if g == 0.0 {
                                    continue;
                                }
                                grad_params[offset + bias_at + o] += g;
                                for i in 0..in_channels {
                                    for ky in 0..kernel {
                                        for kx in 0..kernel {
                                            let widx = ((o * in_channels + i) * kernel + ky)
                                                * kernel
                                                + kx;
                                            let iidx =
                                                (i * in_shape.h + y + ky) * in_shape.w + x + kx;
                                            grad_params[offset + widx] += g * input[iidx];
                                            grad_in[iidx] += g * self.params[offset + widx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    grad = grad_in;
                }
                (LayerSpec::MaxPool { .. }, LayerTape::MaxPool { argmax }) => {
                    let mut grad_in = vec![0.0; in_shape.len()];
                    for (oidx, &iidx) in argmax.iter().enumerate() {
                        grad_in[iidx] += grad[oidx];
                    }
                    grad = grad_in;
                }
                (LayerSpec::Relu, LayerTape::Relu { active }) => {
                    for (g, &a) in grad.iter_mut().zip(active) {
                        if !a {
                            *g = 0.0;
                        }
                    }
                }
                (LayerSpec::Flatten, LayerTape::Flatten) => {}
                (LayerSpec::Linear { inputs, outputs }, LayerTape::Linear { input }) => {
                    let mut grad_in = vec![0.0; inputs];
                    let bias_at = outputs * inputs;
                    for o in 0..outputs {
                        let g = grad[o];
                        grad_params[offset + bias_at + o] += g;
                        for i in 0..inputs {
                            grad_params[offset + o * inputs + i] += g * input[i];
                            grad_in[i] += g * self.params[offset + o * inputs + i];
                        }
                    }
                    grad = grad_in;
                }
                _ => unreachable!("tape out of sync with layers"),
            }
        }
    }

    /// Embed a signature image: prepare the input plane, run the forward
    /// pass, return the embedding vector.
    pub fn embed(&self, image: &GrayImage) -> Vec<f64> {
        let input = prepare_input(image, self.input_height, self.input_width);
        self.forward(&input)
    }

    /// Mean triplet loss of a batch and its gradient with respect to the
    /// parameters. Inputs are prepared tensors.
    pub fn batch_loss_and_grad(
        &self,
        triplets: &[(&[f64], &[f64], &[f64])],
        margin: f64,
    ) -> (f64, Vec<f64>) {
        let mut grad_params = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for &(anchor, positive, negative) in triplets {
            let (ea, tape_a) = self.forward_cached(anchor);
            let (ep, tape_p) = self.forward_cached(positive);
            let (en, tape_n) = self.forward_cached(negative);

            let diff_p: Vec<f64> = ea.iter().zip(&ep).map(|(a, p)| a - p).collect();
            let diff_n: Vec<f64> = ea.iter().zip(&en).map(|(a, n)| a - n).collect();
            let delta_plus = l2_norm(&diff_p);
            let delta_minus = l2_norm(&diff_n);
            let loss = triplet_loss(delta_plus, delta_minus, margin);
            total += loss;
            if loss <= 0.0 {
                continue;
            }

            // d loss / d delta_plus = 1, d loss / d delta_minus = -1 on the
            // active side of the hinge; the norm gradient is the unit
            // difference vector, zero at the (non-differentiable) origin
            let dim = ea.len();
            let mut grad_a = vec![0.0; dim];
            let mut grad_p = vec![0.0; dim];
            let mut grad_n = vec![0.0; dim];
            if delta_plus > 1e-12 {
                for k in 0..dim {
                    let u = diff_p[k] / delta_plus;
                    grad_a[k] += u;
                    grad_p[k] -= u;
                }
            }
            if delta_minus > 1e-12 {
                for k in 0..dim {
                    let u = diff_n[k] / delta_minus;
                    grad_a[k] -= u;
                    grad_n[k] += u;
                }
            }
            self.backward(&tape_a, grad_a, &mut grad_params);
            self.backward(&tape_p, grad_p, &mut grad_params);
            self.backward(&tape_n, grad_n, &mut grad_params);
        }
        let scale = 1.0 / triplets.len().max(1) as f64;
        for g in &mut grad_params {
            *g *= scale;
        }
        (total * scale, grad_params)
    }

    /// Mean triplet loss of a batch (no gradients).
    pub fn batch_loss(&self, triplets: &[(&[f64], &[f64], &[f64])], margin: f64) -> f64 {
        let mut total = 0.0;
        for &(anchor, positive, negative) in triplets {
            let ea = self.forward(anchor);
            let ep = self.forward(positive);
            let en = self.forward(negative);
            let dp = euclidean(&ea, &ep);
            let dn = euclidean(&ea, &en);
            total += triplet_loss(dp, dn, margin);
        }
        total / triplets.len().max(1) as f64
    }

    const MAGIC: &'static [u8; 8] = b"SIGVEMB\0";
    const VERSION: u32 = 1;

    /// Serialize to the versioned binary container: magic, version, JSON
    /// header (architecture, optional training config and seed), then the
    /// raw little-endian parameter vector.
    pub fn save(
        &self,
        path: &Path,
        config: Option<&TrainConfig>,
        seed: Option<u64>,
    ) -> Result<(), ModelIoError> {
        let header = ModelHeader {
            input_height: self.input_height,
            input_width: self.input_width,
            layers: self.layers.clone(),
            param_count: self.params.len(),
            train_config: config.cloned(),
            seed,
        };
        let header_bytes =
            serde_json::to_vec(&header).map_err(|e| ModelIoError::Header(e.to_string()))?;
        let mut out = std::fs::File::create(path)?;
        out.write_all(Self::MAGIC)?;
        out.write_all(&Self::VERSION.to_le_bytes())?;
        out.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        out.write_all(&header_bytes)?;
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, ModelMeta), ModelIoError> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic).map_err(|_| ModelIoError::BadMagic)?;
        if &magic != Self::MAGIC {
            return Err(ModelIoError::BadMagic);
        }
        let mut word = [0u8; 4];
        file.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != Self::VERSION {
            return Err(ModelIoError::UnsupportedVersion(version));
        }
        file.read_exact(&mut word)?;
        let header_len = u32::from_le_bytes(word) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)
            .map_err(|_| ModelIoError::Truncated)?;
        let header: ModelHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| ModelIoError::Header(e.to_string()))?;

        let mut network = Network::new(header.input_height, header.input_width, header.layers)?;
        if network.param_count() != header.param_count {
            return Err(ModelIoError::Truncated);
        }
        let mut buf = vec![0u8; header.param_count * 8];
        file.read_exact(&mut buf).map_err(|_| ModelIoError::Truncated)?;
        let params: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        network.set_params(params);
        Ok((
            network,
            ModelMeta {
                train_config: header.train_config,
                seed: header.seed,
            },
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    input_height: usize,
    input_width: usize,
    layers: Vec<LayerSpec>,
    param_count: usize,
    train_config: Option<TrainConfig>,
    seed: Option<u64>,
}

/// Training provenance embedded in a model file.
#[derive(Debug, Clone)]
pub struct ModelMeta {
    pub train_config: Option<TrainConfig>,
    pub seed: Option<u64>,
}

/// The hinge loss `max(delta_plus - delta_minus + margin, 0)`.
pub fn triplet_loss(delta_plus: f64, delta_minus: f64, margin: f64) -> f64 {
    (delta_plus - delta_minus + margin).max(0.0)
}

/// Euclidean distance between the embeddings of two images.
pub fn dissimilarity_neural(model: &Network, r: &GrayImage, t: &GrayImage) -> f64 {
    euclidean(&model.embed(r), &model.embed(t))
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Turn a grayscale image into the network input plane: intensities are
/// inverted so ink is high, scaled to [0, 1], resized preserving aspect
/// ratio and zero-padded to the network's input size (content centered).
pub fn prepare_input(image: &GrayImage, target_h: usize, target_w: usize) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let inverted: Vec<f64> = image
        .pixels()
        .iter()
        .map(|&p| (255.0 - p as f64) / 255.0)
        .collect();

    let scale = (target_w as f64 / w as f64).min(target_h as f64 / h as f64);
    let new_w = ((w as f64 * scale).round() as usize).clamp(1, target_w);
    let new_h = ((h as f64 * scale).round() as usize).clamp(1, target_h);
    let resized = resample_area(&inverted, w, h, new_w, new_h);

    let mut out = vec![0.0; target_h * target_w];
    let off_x = (target_w - new_w) / 2;
    let off_y = (target_h - new_h) / 2;
    for y in 0..new_h {
        for x in 0..new_w {
            out[(y + off_y) * target_w + x + off_x] = resized[y * new_w + x];
        }
    }
    out
}

/// Box-filter resampling: each output pixel averages the source rectangle
/// it covers, with fractional pixels weighted by overlap.
fn resample_area(src: &[f64], w0: usize, h0: usize, w1: usize, h1: usize) -> Vec<f64> {
    if w0 == w1 && h0 == h1 {
        return src.to_vec();
    }
    let sx = w0 as f64 / w1 as f64;
    let sy = h0 as f64 / h1 as f64;
    let mut out = vec![0.0; w1 * h1];
    for oy in 0..h1 {
        let y0 = oy as f64 * sy;
        let y1 = (oy + 1) as f64 * sy;
        for ox in 0..w1 {
            let x0 = ox as f64 * sx;
            let x1 = (ox + 1) as f64 * sx;
            let mut acc = 0.0;
            let py_end = (y1.ceil() as usize).min(h0);
            let px_end = (x1.ceil() as usize).min(w0);
            for py in y0.floor() as usize..py_end {
                let wy = (y1.min((py + 1) as f64) - y0.max(py as f64)).max(0.0);
                for px in x0.floor() as usize..px_end {
                    let wx = (x1.min((px + 1) as f64) - x0.max(px as f64)).max(0.0);
                    acc += src[py * w0 + px] * wx * wy;
                }
            }
            out[oy * w1 + ox] = acc / (sx * sy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> Network {
        // all layer types, ~small enough for finite differences
        let mut net = Network::new(
            10,
            10,
            vec![
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    inputs: 2 * 4 * 4,
                    outputs: 6,
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    inputs: 6,
                    outputs: 4,
                },
            ],
        )
        .unwrap();
        net.init_params(7);
        net
    }

    fn seeded_tensor(len: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn triplet_loss_matches_formula() {
        assert_eq!(triplet_loss(0.0, 1.0, 1.0), 0.0);
        assert_eq!(triplet_loss(0.7, 0.7, 1.0), 1.0);
        assert_eq!(triplet_loss(2.0, 1.0, 0.5), 1.5);
        assert_eq!(triplet_loss(0.1, 5.0, 0.2), 0.0);
    }

    #[test]
    fn hinge_is_never_negative_and_zero_iff_separated() {
        for (dp, dn, m) in [(0.0, 0.0, 0.5), (1.0, 3.0, 1.0), (3.0, 1.0, 1.0), (2.0, 3.0, 1.0)] {
            let l = triplet_loss(dp, dn, m);
            assert!(l >= 0.0);
            assert_eq!(l == 0.0, dn >= dp + m);
        }
    }

    #[test]
    fn zeroed_final_layer_embeds_everything_to_zero() {
        let mut net = Network::default_architecture();
        net.init_params(3);
        // zero the last linear layer (weights and bias)
        let last_offset = *net.offsets.last().unwrap();
        for p in &mut net.params_mut()[last_offset..] {
            *p = 0.0;
        }
        let img = GrayImage::filled(20, 17, 80);
        let e = net.embed(&img);
        assert_eq!(e.len(), 32);
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut net = Network::default_architecture();
        net.init_params(11);
        let img = {
            let mut img = GrayImage::filled(40, 25, 255);
            for x in 3..37 {
                img.set(x, 12, 0);
            }
            img
        };
        let a = net.embed(&img);
        let b = net.embed(&img);
        assert_eq!(a, b);
        // and across a reconstruction with the same seed
        let mut net2 = Network::default_architecture();
        net2.init_params(11);
        assert_eq!(net2.embed(&img), a);
    }

    #[test]
    fn single_linear_layer_matches_hand_computation() {
        // 1x2 input, 2x2 weight matrix, hand-set
        let mut net = Network::new(
            1,
            2,
            vec![
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    inputs: 2,
                    outputs: 2,
                },
            ],
        )
        .unwrap();
        // weights [[1,2],[3,4]], bias [0.5, -0.5]
        net.set_params(vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]);
        // pixels 0 and 51 invert to 1.0 and 0.8
        let img = GrayImage::new(2, 1, vec![0, 51]).unwrap();
        let e = net.embed(&img);
        assert!((e[0] - (1.0 * 1.0 + 2.0 * 0.8 + 0.5)).abs() < 1e-12);
        assert!((e[1] - (3.0 * 1.0 + 4.0 * 0.8 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn neural_dissimilarity_is_a_metric_on_embeddings() {
        let mut net = Network::default_architecture();
        net.init_params(5);
        let mk = |seed: u64| {
            let mut img = GrayImage::filled(30, 30, 255);
            use rand::{Rng, SeedableRng};
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            for _ in 0..60 {
                let x = rng.gen_range(0..30);
                let y = rng.gen_range(0..30);
                img.set(x, y, 0);
            }
            img
        };
        let (a, b, c) = (mk(1), mk(2), mk(3));
        assert_eq!(dissimilarity_neural(&net, &a, &a), 0.0);
        let dab = dissimilarity_neural(&net, &a, &b);
        let dba = dissimilarity_neural(&net, &b, &a);
        assert!((dab - dba).abs() <= 1e-12);
        let dac = dissimilarity_neural(&net, &a, &c);
        let dbc = dissimilarity_neural(&net, &b, &c);
        assert!(dab <= dac + dbc + 1e-12);
    }

    #[test]
    fn hand_computed_embedding_distance() {
        let mut net = Network::new(
            1,
            2,
            vec![
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    inputs: 2,
                    outputs: 2,
                },
            ],
        )
        .unwrap();
        net.set_params(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]); // identity
        let r = GrayImage::new(2, 1, vec![255, 255]).unwrap(); // -> (0, 0)
        let t = GrayImage::new(2, 1, vec![0, 255]).unwrap(); // -> (1, 0)
        assert!((dissimilarity_neural(&net, &r, &t) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences_both_hinge_sides() {
        let net = tiny_net();
        let n_in = 100;
        // margin large enough that the hinge is active for the first
        // triplet; the second uses a huge negative distance so it is not
        let a1 = seeded_tensor(n_in, 1);
        let p1 = seeded_tensor(n_in, 2);
        let n1 = seeded_tensor(n_in, 3);
        let a2 = seeded_tensor(n_in, 4);
        let p2 = seeded_tensor(n_in, 5);
        let n2: Vec<f64> = seeded_tensor(n_in, 6).iter().map(|v| v * 40.0).collect();
        let triplets: Vec<(&[f64], &[f64], &[f64])> = vec![
            (&a1, &p1, &n1),
            (&a2, &p2, &n2),
        ];
        let margin = 2.0;

        let (loss0, analytic) = net.batch_loss_and_grad(&triplets, margin);
        assert!(loss0 > 0.0, "first hinge should be active");
        // verify the second triplet's hinge really is inactive
        let single = [triplets[1]];
        assert_eq!(net.batch_loss(&single, margin), 0.0);

        let step = 1e-4;
        let mut mismatches = 0;
        let mut probe = net.clone();
        for idx in 0..net.param_count() {
            let orig = net.params()[idx];
            probe.params_mut()[idx] = orig + step;
            let up = probe.batch_loss(&triplets, margin);
            probe.params_mut()[idx] = orig - step;
            let down = probe.batch_loss(&triplets, margin);
            probe.params_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let denom = analytic[idx].abs().max(numeric.abs()).max(1e-6);
            if (analytic[idx] - numeric).abs() / denom > 1e-3 {
                mismatches += 1;
            }
        }
        // a few parameters may sit on ReLU/pool kinks
        let ratio = mismatches as f64 / net.param_count() as f64;
        assert!(ratio <= 0.01, "{} of {} gradients off", mismatches, net.param_count());
    }

    #[test]
    fn prepare_input_pads_and_inverts() {
        // 4x2 all-ink image into 4x4: scale 1, pad one row top and bottom
        let img = GrayImage::filled(4, 2, 0);
        let input = prepare_input(&img, 4, 4);
        assert_eq!(input.len(), 16);
        assert!(input[0..4].iter().all(|&v| v == 0.0));
        assert!(input[4..12].iter().all(|&v| v == 1.0));
        assert!(input[12..16].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resample_preserves_mean_on_uniform_scale() {
        let src: Vec<f64> = (0..36).map(|i| i as f64 / 35.0).collect();
        let down = resample_area(&src, 6, 6, 3, 3);
        let mean_src: f64 = src.iter().sum::<f64>() / 36.0;
        let mean_down: f64 = down.iter().sum::<f64>() / 9.0;
        assert!((mean_src - mean_down).abs() < 1e-12);
    }

    #[test]
    fn model_roundtrip_through_container() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.svm");
        let mut net = tiny_net();
        net.init_params(99);
        net.save(&path, None, Some(99)).unwrap();
        let (loaded, meta) = Network::load(&path).unwrap();
        assert_eq!(loaded.params(), net.params());
        assert_eq!(loaded.layers(), net.layers());
        assert_eq!(meta.seed, Some(99));

        // corrupt magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Network::load(&path), Err(ModelIoError::BadMagic)));
    }

    #[test]
    fn architecture_validation_catches_mismatches() {
        assert!(Network::new(
            8,
            8,
            vec![LayerSpec::Linear {
                inputs: 64,
                outputs: 4
            }]
        )
        .is_err()); // missing flatten
        assert!(Network::new(
            8,
            8,
            vec![
                LayerSpec::Conv {
                    in_channels: 2,
                    out_channels: 2,
                    kernel: 3
                },
                LayerSpec::Flatten
            ]
        )
        .is_err()); // wrong channel count
        assert!(Network::new(4, 4, vec![LayerSpec::MaxPool { size: 8 }]).is_err());
    }
}
