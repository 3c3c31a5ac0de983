//! The Siamese feature extractor producing queries and keys at 1/4 of the
//! input resolution, the image-feature alignment sampler, and checkpoint I/O.
//!
//! Two variants are provided: `toy`, a three-layer net small enough to train
//! in seconds, and `paper_resnet18`, a modified ResNet-18 whose stem and
//! first three stages keep the output at H/4 x W/4 with 256 channels.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::colorspace::Image;
use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_forward, BatchNorm2d, BnCache, Conv2d, ConvCache, Param};

/// Feature stride of both encoder variants.
pub const FEATURE_STRIDE: usize = 4;

/// C x h x w encoder output; queries and keys for a frame are this same tensor.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// Transpose to `[h, w, C]`, the layout used by the bilinear samplers.
    pub fn to_hwc(&self) -> Array3<f64> {
        self.values.view().permuted_axes([1, 2, 0]).as_standard_layout().to_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Toy,
    PaperResnet18,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Per-stage widths for the toy variant (three entries). Ignored by
    /// `paper_resnet18`, whose widths are fixed at 64/64/128/256/256.
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn toy(seed: u64) -> Self {
        EncoderConfig { variant: EncoderVariant::Toy, widths: vec![16, 32, 64], seed }
    }

    pub fn toy_with_widths(widths: [usize; 3], seed: u64) -> Self {
        EncoderConfig { variant: EncoderVariant::Toy, widths: widths.to_vec(), seed }
    }

    pub fn paper_resnet18(seed: u64) -> Self {
        EncoderConfig { variant: EncoderVariant::PaperResnet18, widths: vec![], seed }
    }

    fn validate(&self) -> Result<()> {
        if self.variant == EncoderVariant::Toy && self.widths.len() != 3 {
            return Err(Error::Config(format!(
                "toy encoder needs 3 stage widths, got {}",
                self.widths.len()
            )));
        }
        if self.variant == EncoderVariant::Toy && self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("toy stage widths must be positive".into()));
        }
        Ok(())
    }
}

// Three convs, stride 2 at the first two, linear feature head.
#[derive(Debug, Clone)]
struct ToyNet {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
}

#[derive(Debug)]
struct ToyCache {
    c1: ConvCache,
    b1: BnCache,
    r1: Array4<f64>,
    c2: ConvCache,
    b2: BnCache,
    r2: Array4<f64>,
    c3: ConvCache,
}

impl ToyNet {
    fn new(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        ToyNet {
            conv1: Conv2d::new(3, widths[0], 3, 2, rng),
            bn1: BatchNorm2d::new(widths[0]),
            conv2: Conv2d::new(widths[0], widths[1], 3, 2, rng),
            bn2: BatchNorm2d::new(widths[1]),
            conv3: Conv2d::new(widths[1], widths[2], 3, 1, rng),
        }
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, ToyCache) {
        let (y, c1) = self.conv1.forward(x);
        let (y, b1) = self.bn1.forward_train(&y);
        let r1 = relu_forward(&y);
        let (y, c2) = self.conv2.forward(&r1);
        let (y, b2) = self.bn2.forward_train(&y);
        let r2 = relu_forward(&y);
        let (y, c3) = self.conv3.forward(&r2);
        (y, ToyCache { c1, b1, r1, c2, b2, r2, c3 })
    }

    fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (y, _) = self.conv1.forward(x);
        let y = relu_forward(&self.bn1.forward_eval(&y));
        let (y, _) = self.conv2.forward(&y);
        let y = relu_forward(&self.bn2.forward_eval(&y));
        let (y, _) = self.conv3.forward(&y);
        y
    }

    fn backward(&mut self, grad: &Array4<f64>, cache: &ToyCache) -> Array4<f64> {
        let g = self.conv3.backward(grad, &cache.c3);
        let g = relu_backward(&cache.r2, &g);
        let g = self.bn2.backward(&g, &cache.b2);
        let g = self.conv2.backward(&g, &cache.c2);
        let g = relu_backward(&cache.r1, &g);
        let g = self.bn1.backward(&g, &cache.b1);
        self.conv1.backward(&g, &cache.c1)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Debug)]
struct BlockCache {
    c1: ConvCache,
    b1: BnCache,
    r1: Array4<f64>,
    c2: ConvCache,
    b2: BnCache,
    down: Option<(ConvCache, BnCache)>,
    out: Array4<f64>,
}

impl BasicBlock {
    fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let down = if stride != 1 || c_in != c_out {
            Some((Conv2d::new(c_in, c_out, 1, stride, rng), BatchNorm2d::new(c_out)))
        } else {
            None
        };
        BasicBlock {
            conv1: Conv2d::new(c_in, c_out, 3, stride, rng),
            bn1: BatchNorm2d::new(c_out),
            conv2: Conv2d::new(c_out, c_out, 3, 1, rng),
            bn2: BatchNorm2d::new(c_out),
            down,
        }
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, BlockCache) {
        let (y, c1) = self.conv1.forward(x);
        let (y, b1) = self.bn1.forward_train(&y);
        let r1 = relu_forward(&y);
        let (y, c2) = self.conv2.forward(&r1);
        let (main, b2) = self.bn2.forward_train(&y);
        let (skip, down) = match &mut self.down {
            Some((conv, bn)) => {
                let (s, dc) = conv.forward(x);
                let (s, db) = bn.forward_train(&s);
                (s, Some((dc, db)))
            }
            None => (x.clone(), None),
        };
        let out = relu_forward(&(&main + &skip));
        (out.clone(), BlockCache { c1, b1, r1, c2, b2, down, out })
    }

    fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (y, _) = self.conv1.forward(x);
        let y = relu_forward(&self.bn1.forward_eval(&y));
        let (y, _) = self.conv2.forward(&y);
        let main = self.bn2.forward_eval(&y);
        let skip = match &self.down {
            Some((conv, bn)) => {
                let (s, _) = conv.forward(x);
                bn.forward_eval(&s)
            }
            None => x.clone(),
        };
        relu_forward(&(&main + &skip))
    }

    fn backward(&mut self, grad: &Array4<f64>, cache: &BlockCache) -> Array4<f64> {
        let g_sum = relu_backward(&cache.out, grad);
        let g = self.bn2.backward(&g_sum, &cache.b2);
        let g = self.conv2.backward(&g, &cache.c2);
        let g = relu_backward(&cache.r1, &g);
        let g = self.bn1.backward(&g, &cache.b1);
        let gx_main = self.conv1.backward(&g, &cache.c1);
        let gx_skip = match (&mut self.down, &cache.down) {
            (Some((conv, bn)), Some((dc, db))) => {
                let g = bn.backward(&g_sum, db);
                conv.backward(&g, dc)
            }
            _ => g_sum,
        };
        gx_main + gx_skip
    }
}

#[derive(Debug, Clone)]
struct ResNet {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    blocks: Vec<BasicBlock>, // layer{1..4} flattened, two blocks each
}

#[derive(Debug)]
struct ResNetCache {
    c1: ConvCache,
    b1: BnCache,
    r1: Array4<f64>,
    blocks: Vec<BlockCache>,
}

impl ResNet {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::new();
        // (in, out, stride of the stage's first block)
        let stages = [(64, 64, 1), (64, 128, 2), (128, 256, 1), (256, 256, 1)];
        for (c_in, c_out, stride) in stages {
            blocks.push(BasicBlock::new(c_in, c_out, stride, rng));
            blocks.push(BasicBlock::new(c_out, c_out, 1, rng));
        }
        ResNet { conv1: Conv2d::new(3, 64, 7, 2, rng), bn1: BatchNorm2d::new(64), blocks }
    }

    fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, ResNetCache) {
        let (y, c1) = self.conv1.forward(x);
        let (y, b1) = self.bn1.forward_train(&y);
        let r1 = relu_forward(&y);
        let mut y = r1.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (next, cache) = block.forward_train(&y);
            caches.push(cache);
            y = next;
        }
        (y, ResNetCache { c1, b1, r1, blocks: caches })
    }

    fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (y, _) = self.conv1.forward(x);
        let mut y = relu_forward(&self.bn1.forward_eval(&y));
        for block in &self.blocks {
            y = block.forward_eval(&y);
        }
        y
    }

    fn backward(&mut self, grad: &Array4<f64>, cache: &ResNetCache) -> Array4<f64> {
        let mut g = grad.clone();
        for (block, bc) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            g = block.backward(&g, bc);
        }
        let g = relu_backward(&cache.r1, &g);
        let g = self.bn1.backward(&g, &cache.b1);
        self.conv1.backward(&g, &cache.c1)
    }
}

#[derive(Debug, Clone)]
enum Body {
    Toy(ToyNet),
    Resnet(Box<ResNet>),
}

/// Cache for one training forward pass; feed back to [`Encoder::backward_batch`].
#[derive(Debug)]
pub struct EncoderCache(CacheBody);

#[derive(Debug)]
enum CacheBody {
    Toy(ToyCache),
    Resnet(ResNetCache),
}

/// The shared-weight feature extractor.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    body: Body,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let body = match config.variant {
            EncoderVariant::Toy => Body::Toy(ToyNet::new(&config.widths, &mut rng)),
            EncoderVariant::PaperResnet18 => Body::Resnet(Box::new(ResNet::new(&mut rng))),
        };
        Ok(Encoder { config, body })
    }

    pub fn out_channels(&self) -> usize {
        match &self.body {
            Body::Toy(t) => t.conv3.params()[0].1.shape()[0],
            Body::Resnet(_) => 256,
        }
    }

    /// Inference-mode encoding of a single normalized image.
    ///
    /// Queries and keys for the same frame are this identical tensor: one
    /// forward pass through shared weights.
    pub fn encode(&self, img: &Image) -> Result<FeatureMap> {
        if !img.normalized {
            return Err(Error::invalid("encoder expects a normalized image"));
        }
        let (h, w) = (img.height(), img.width());
        if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be divisible by {FEATURE_STRIDE}, got {h}x{w}"
            )));
        }
        let x = image_batch(&[img]);
        let y = self.forward_eval_batch(&x);
        let values = y.index_axis(Axis(0), 0).to_owned();
        Ok(FeatureMap { values, stride: FEATURE_STRIDE })
    }

    pub fn forward_eval_batch(&self, x: &Array4<f64>) -> Array4<f64> {
        match &self.body {
            Body::Toy(t) => t.forward_eval(x),
            Body::Resnet(r) => r.forward_eval(x),
        }
    }

    pub fn forward_train_batch(&mut self, x: &Array4<f64>) -> (Array4<f64>, EncoderCache) {
        match &mut self.body {
            Body::Toy(t) => {
                let (y, c) = t.forward_train(x);
                (y, EncoderCache(CacheBody::Toy(c)))
            }
            Body::Resnet(r) => {
                let (y, c) = r.forward_train(x);
                (y, EncoderCache(CacheBody::Resnet(c)))
            }
        }
    }

    /// Accumulate parameter gradients from feature-space gradients.
    pub fn backward_batch(&mut self, grad: &Array4<f64>, cache: &EncoderCache) {
        match (&mut self.body, &cache.0) {
            (Body::Toy(t), CacheBody::Toy(c)) => {
                t.backward(grad, c);
            }
            (Body::Resnet(r), CacheBody::Resnet(c)) => {
                r.backward(grad, c);
            }
            _ => panic!("cache does not match encoder variant"),
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = Vec::new();
        match &mut self.body {
            Body::Toy(t) => {
                for (n, p) in t.conv1.params_mut() {
                    out.push((format!("conv1.{n}"), p));
                }
                for (n, p) in t.bn1.params_mut() {
                    out.push((format!("bn1.{n}"), p));
                }
                for (n, p) in t.conv2.params_mut() {
                    out.push((format!("conv2.{n}"), p));
                }
                for (n, p) in t.bn2.params_mut() {
                    out.push((format!("bn2.{n}"), p));
                }
                for (n, p) in t.conv3.params_mut() {
                    out.push((format!("conv3.{n}"), p));
                }
            }
            Body::Resnet(r) => {
                for (n, p) in r.conv1.params_mut() {
                    out.push((format!("conv1.{n}"), p));
                }
                for (n, p) in r.bn1.params_mut() {
                    out.push((format!("bn1.{n}"), p));
                }
                for (i, block) in r.blocks.iter_mut().enumerate() {
                    let stage = i / 2 + 1;
                    let slot = i % 2;
                    let prefix = format!("layer{stage}.{slot}");
                    for (n, p) in block.conv1.params_mut() {
                        out.push((format!("{prefix}.conv1.{n}"), p));
                    }
                    for (n, p) in block.bn1.params_mut() {
                        out.push((format!("{prefix}.bn1.{n}"), p));
                    }
                    for (n, p) in block.conv2.params_mut() {
                        out.push((format!("{prefix}.conv2.{n}"), p));
                    }
                    for (n, p) in block.bn2.params_mut() {
                        out.push((format!("{prefix}.bn2.{n}"), p));
                    }
                    if let Some((conv, bn)) = &mut block.down {
                        for (n, p) in conv.params_mut() {
                            out.push((format!("{prefix}.downsample.conv.{n}"), p));
                        }
                        for (n, p) in bn.params_mut() {
                            out.push((format!("{prefix}.downsample.bn.{n}"), p));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Array1<f64>)> {
        let mut out: Vec<(String, &mut Array1<f64>)> = Vec::new();
        match &mut self.body {
            Body::Toy(t) => {
                for (n, b) in t.bn1.buffers_mut() {
                    out.push((format!("bn1.{n}"), b));
                }
                for (n, b) in t.bn2.buffers_mut() {
                    out.push((format!("bn2.{n}"), b));
                }
            }
            Body::Resnet(r) => {
                for (n, b) in r.bn1.buffers_mut() {
                    out.push((format!("bn1.{n}"), b));
                }
                for (i, block) in r.blocks.iter_mut().enumerate() {
                    let prefix = format!("layer{}.{}", i / 2 + 1, i % 2);
                    for (n, b) in block.bn1.buffers_mut() {
                        out.push((format!("{prefix}.bn1.{n}"), b));
                    }
                    for (n, b) in block.bn2.buffers_mut() {
                        out.push((format!("{prefix}.bn2.{n}"), b));
                    }
                    if let Some((_, bn)) = &mut block.down {
                        for (n, b) in bn.buffers_mut() {
                            out.push((format!("{prefix}.downsample.bn.{n}"), b));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.named_params_mut().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Stack normalized images into an `[N, 3, H, W]` batch tensor.
pub fn image_batch(images: &[&Image]) -> Array4<f64> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut x = Array4::zeros((images.len(), 3, h, w));
    for (n, img) in images.iter().enumerate() {
        for c in 0..3 {
            x.slice_mut(ndarray::s![n, c, .., ..])
                .assign(&img.pixels.slice(ndarray::s![.., .., c]));
        }
    }
    x
}

/// Sample an image at the strided-convolution centers: cell `(i, j)` of the
/// result is the input pixel at `(stride * i, stride * j)`. This is the
/// composed center of the encoder's two stride-2 convolutions, not a bilinear
/// or area downsampling.
pub fn align_sample(img: &Image, stride: usize) -> Result<Array3<f64>> {
    let (h, w) = (img.height(), img.width());
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::invalid(format!(
            "stride {stride} must divide image dimensions {h}x{w}"
        )));
    }
    let (oh, ow) = (h / stride, w / stride);
    Ok(Array3::from_shape_fn((oh, ow, 3), |(i, j, c)| img.pixels[[stride * i, stride * j, c]]))
}

/// Nearest-sampled label map at the same strided-convolution centers.
pub fn align_sample_mask(mask: &Array2<u8>, stride: usize) -> Result<Array2<u8>> {
    let (h, w) = mask.dim();
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::invalid(format!(
            "stride {stride} must divide mask dimensions {h}x{w}"
        )));
    }
    Ok(Array2::from_shape_fn((h / stride, w / stride), |(i, j)| mask[[stride * i, stride * j]]))
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic, JSON manifest, then raw little-endian f32
// buffers in manifest order.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"MTCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    encoder: EncoderConfig,
    meta: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

/// Write encoder parameters and batch-norm statistics as f32 records.
///
/// `meta` is free-form run metadata (input color space, frame size, ...)
/// that travels with the weights.
pub fn save_checkpoint(path: &Path, encoder: &mut Encoder, meta: serde_json::Value) -> Result<()> {
    let mut records = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    {
        let mut push = |name: String, values: &[f64], shape: Vec<usize>| {
            for v in values {
                data.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            records.push(TensorRecord { name, shape, offset, len: values.len() });
            offset += values.len();
        };
        for (name, p) in encoder.named_params_mut() {
            push(name, p.value.as_slice().expect("contiguous"), p.value.shape().to_vec());
        }
        for (name, b) in encoder.named_buffers_mut() {
            push(name, b.as_slice().expect("contiguous"), vec![b.len()]);
        }
    }
    let manifest = Manifest {
        encoder: encoder.config.clone(),
        meta,
        tensors: records,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut file = fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    file.write_all(&data)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(Encoder, serde_json::Value)> {
    let mut file = fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;

    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if raw.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "checkpoint data length {} does not match manifest ({} floats)",
            raw.len(),
            total
        )));
    }
    let read_tensor = |rec: &TensorRecord| -> ArrayD<f64> {
        let mut values = Vec::with_capacity(rec.len);
        for i in 0..rec.len {
            let base = (rec.offset + i) * 4;
            let bits = [raw[base], raw[base + 1], raw[base + 2], raw[base + 3]];
            values.push(f32::from_le_bytes(bits) as f64);
        }
        ArrayD::from_shape_vec(rec.shape.clone(), values).expect("manifest shape")
    };

    let mut encoder = Encoder::new(manifest.encoder.clone())?;
    let mut by_name: std::collections::BTreeMap<&str, &TensorRecord> =
        manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for (name, p) in encoder.named_params_mut() {
        let rec = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing tensor `{name}`"))
        })?;
        if rec.shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                rec.shape,
                p.value.shape()
            )));
        }
        p.value = read_tensor(rec);
    }
    for (name, b) in encoder.named_buffers_mut() {
        let rec = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing buffer `{name}`"))
        })?;
        let arr = read_tensor(rec);
        *b = arr.into_dimensionality().map_err(|_| {
            Error::Checkpoint(format!("buffer `{name}` is not one-dimensional"))
        })?;
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(Error::Checkpoint(format!("checkpoint has unexpected tensor `{name}`")));
    }
    Ok((encoder, manifest.meta))
}
