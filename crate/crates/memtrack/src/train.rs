//! Two-phase self-supervised training: frame-pair reconstruction with
//! single-frame restricted attention, then multi-frame fine-tuning through
//! the full localization chain. Fully seeded and single-threaded; the same
//! seed and data order reproduce runs bit for bit.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::attention::{chain_backward, chain_forward, ChainConfig, FramePayload};
use crate::colorspace::{convert, drop_channel, ColorSpace, Image};
use crate::encoder::{
    align_sample, image_batch, save_checkpoint, Encoder, EncoderConfig, EncoderVariant,
    FEATURE_STRIDE,
};
use crate::error::{Error, Result};
use crate::memory::{dilation_for, select_frames, BankPolicy};
use crate::nn::Adam;
use crate::objective::{
    classification_grad, classification_loss, huber_grad, huber_loss, ColorQuantizer,
};
use crate::propagation::PropagationMode;

/// Which reconstruction objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Regression,
    Classification,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(LossKind::Regression),
            "classification" => Ok(LossKind::Classification),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// Resolved run configuration. The defaults are the paper's schedule with
/// step counts shrunk 500x (ratios intact): phase 1 pretrains on frame
/// pairs, phase 2 fine-tunes through the full memory bank at a small
/// learning rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub batch_size: usize,
    pub phase2_batch_size: usize,
    pub lr: f64,
    /// Fractions of `phase1_steps` after which the learning rate halves.
    pub lr_milestones: Vec<f64>,
    pub phase2_lr: f64,
    pub encoder: EncoderVariant,
    pub widths: Vec<usize>,
    pub input_space: ColorSpace,
    pub loss_space: ColorSpace,
    pub loss: LossKind,
    pub quantizer_bins: usize,
    pub dropout_p: f64,
    pub window_radius: usize,
    pub memory: BankPolicy,
    pub mode: PropagationMode,
    pub seed: u64,
    /// Square size frames are resized to on load; 0 keeps native dimensions.
    pub frame_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phase1_steps: 2000,
            phase2_steps: 500,
            batch_size: 8,
            phase2_batch_size: 2,
            lr: 1e-3,
            lr_milestones: vec![0.4, 0.6, 0.8],
            phase2_lr: 2e-5,
            encoder: EncoderVariant::Toy,
            widths: vec![16, 32, 64],
            input_space: ColorSpace::Lab,
            loss_space: ColorSpace::Lab,
            loss: LossKind::Regression,
            quantizer_bins: 4,
            dropout_p: 0.5,
            window_radius: 6,
            memory: BankPolicy::default(),
            mode: PropagationMode::Hard,
            seed: 0,
            frame_size: 256,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.phase2_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must be in [0, 1]".into()));
        }
        if self.lr <= 0.0 || self.phase2_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        let mut prev = 0.0;
        for &m in &self.lr_milestones {
            if m <= prev || m >= 1.0 {
                return Err(Error::Config(
                    "lr_milestones must be strictly increasing fractions in (0, 1)".into(),
                ));
            }
            prev = m;
        }
        if self.quantizer_bins == 0 {
            return Err(Error::Config("quantizer_bins must be positive".into()));
        }
        if self.frame_size != 0 && (self.frame_size < 4 || self.frame_size % 4 != 0) {
            return Err(Error::Config("frame_size must be 0 (native) or divisible by 4".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig { variant: self.encoder, widths: self.widths.clone(), seed: self.seed }
    }

    /// Apply a `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid value `{value}` for `{what}`"));
        match key {
            "phase1_steps" => self.phase1_steps = value.parse().map_err(|_| bad(key))?,
            "phase2_steps" => self.phase2_steps = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "phase2_batch_size" => self.phase2_batch_size = value.parse().map_err(|_| bad(key))?,
            "lr" => self.lr = value.parse().map_err(|_| bad(key))?,
            "phase2_lr" => self.phase2_lr = value.parse().map_err(|_| bad(key))?,
            "lr_milestones" => {
                self.lr_milestones = value
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| bad(key)))
                    .collect::<Result<_>>()?;
            }
            "encoder" => {
                self.encoder = match value {
                    "toy" => EncoderVariant::Toy,
                    "paper_resnet18" => EncoderVariant::PaperResnet18,
                    _ => return Err(bad(key)),
                }
            }
            "widths" => {
                self.widths = value
                    .split(',')
                    .map(|v| v.trim().parse::<usize>().map_err(|_| bad(key)))
                    .collect::<Result<_>>()?;
            }
            "input_space" => self.input_space = value.parse()?,
            "loss_space" => self.loss_space = value.parse()?,
            "loss" => self.loss = value.parse()?,
            "quantizer_bins" => self.quantizer_bins = value.parse().map_err(|_| bad(key))?,
            "dropout_p" => self.dropout_p = value.parse().map_err(|_| bad(key))?,
            "window_radius" => self.window_radius = value.parse().map_err(|_| bad(key))?,
            "memory" => self.memory = BankPolicy::parse(value)?,
            "mode" => self.mode = value.parse()?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "frame_size" => self.frame_size = value.parse().map_err(|_| bad(key))?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parse a flat `key=value` config file (`#` starts a comment).
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Metadata stored inside checkpoints so inference can replay the setup.
    pub fn checkpoint_meta(&self) -> serde_json::Value {
        serde_json::json!({
            "input_space": self.input_space,
            "loss_space": self.loss_space,
            "window_radius": self.window_radius,
            "memory": self.memory,
            "mode": self.mode,
            "frame_size": self.frame_size,
        })
    }
}

/// Learning rate at a (0-indexed) phase-1 step: halved after each milestone.
pub fn lr_at(step: usize, phase1_steps: usize, base_lr: f64, milestones: &[f64]) -> f64 {
    let mut lr = base_lr;
    for &m in milestones {
        if step >= (m * phase1_steps as f64).floor() as usize {
            lr *= 0.5;
        }
    }
    lr
}

/// One sequence prepared for training: encoder inputs in the input color
/// space and aligned per-frame loss targets in the loss color space.
struct SeqData {
    inputs: Vec<Image>,
    targets: Vec<Array3<f64>>,
}

/// In-memory training corpus.
pub struct TrainDataset {
    sequences: Vec<SeqData>,
}

impl TrainDataset {
    pub fn from_frame_lists(frame_lists: &[Vec<Image>], config: &RunConfig) -> Result<Self> {
        if frame_lists.is_empty() {
            return Err(Error::invalid("training corpus is empty"));
        }
        let mut sequences = Vec::with_capacity(frame_lists.len());
        for frames in frame_lists {
            if frames.len() < 2 {
                return Err(Error::invalid("every training sequence needs at least 2 frames"));
            }
            let mut inputs = Vec::with_capacity(frames.len());
            let mut targets = Vec::with_capacity(frames.len());
            for img in frames {
                let input = if img.space == config.input_space {
                    img.to_normalized()
                } else {
                    convert(img, config.input_space)?
                };
                let loss_img = if img.space == config.loss_space {
                    img.to_normalized()
                } else {
                    convert(img, config.loss_space)?
                };
                targets.push(align_sample(&loss_img, FEATURE_STRIDE)?);
                inputs.push(input);
            }
            sequences.push(SeqData { inputs, targets });
        }
        Ok(TrainDataset { sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub phase: u8,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub phase1_checkpoint: PathBuf,
    pub loss_rows: Vec<LossRow>,
}

/// The value payload for one reference frame under the active loss: aligned
/// colors for regression, one-hot quantized bins for classification.
fn value_payload(
    target: &Array3<f64>,
    loss: LossKind,
    quantizer: &ColorQuantizer,
) -> Array3<f64> {
    match loss {
        LossKind::Regression => target.clone(),
        LossKind::Classification => {
            let bins = quantizer.quantize_image(target);
            let (h, w) = bins.dim();
            let mut v = Array3::zeros((h, w, quantizer.bins()));
            for y in 0..h {
                for x in 0..w {
                    v[[y, x, bins[[y, x]]]] = 1.0;
                }
            }
            v
        }
    }
}

fn loss_and_grad(
    recon: &Array3<f64>,
    target: &Array3<f64>,
    loss: LossKind,
    quantizer: &ColorQuantizer,
) -> Result<(f64, Array3<f64>)> {
    match loss {
        LossKind::Regression => {
            let l = huber_loss(recon, target)?;
            Ok((l.scalar, huber_grad(recon, target)?))
        }
        LossKind::Classification => {
            let bins = quantizer.quantize_image(target);
            let l = classification_loss(recon, &bins, quantizer)?;
            Ok((l.scalar, classification_grad(recon, &bins)))
        }
    }
}

/// Run the two-phase schedule and write `checkpoint.bin`,
/// `checkpoint_phase1.bin` and `loss.csv` into `out_dir`.
pub fn train(config: &RunConfig, dataset: &TrainDataset, out_dir: &Path) -> Result<TrainReport> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut encoder = Encoder::new(config.encoder_config())?;
    let quantizer = ColorQuantizer::uniform_lab(config.quantizer_bins)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows: Vec<LossRow> = Vec::new();

    // Phase 1: frame pairs, single-frame restricted attention without dilation.
    let mut opt = Adam::new(config.lr);
    for step in 0..config.phase1_steps {
        let lr = lr_at(step, config.phase1_steps, config.lr, &config.lr_milestones);
        let mut picks = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let s = rng.gen_range(0..dataset.sequences.len());
            let t = rng.gen_range(1..dataset.sequences[s].inputs.len());
            let channel = if config.dropout_p > 0.0 && rng.gen::<f64>() < config.dropout_p {
                Some(rng.gen_range(0..3usize))
            } else {
                None
            };
            picks.push((s, t, channel));
        }
        let mut images: Vec<Image> = Vec::with_capacity(2 * picks.len());
        for &(s, t, channel) in &picks {
            let seq = &dataset.sequences[s];
            let (reference, target) = (&seq.inputs[t - 1], &seq.inputs[t]);
            match channel {
                Some(c) => {
                    images.push(drop_channel(reference, c));
                    images.push(drop_channel(target, c));
                }
                None => {
                    images.push(reference.clone());
                    images.push(target.clone());
                }
            }
        }
        let refs: Vec<&Image> = images.iter().collect();
        let x = image_batch(&refs);
        let (features, cache) = encoder.forward_train_batch(&x);
        let mut d_features = Array4::zeros(features.dim());
        let mut batch_loss = 0.0;
        for (b, &(s, t, _)) in picks.iter().enumerate() {
            let seq = &dataset.sequences[s];
            let k = features.index_axis(Axis(0), 2 * b);
            let q = features.index_axis(Axis(0), 2 * b + 1);
            let v = value_payload(&seq.targets[t - 1], config.loss, &quantizer);
            let (recon, weights) = pair_attention_forward(&q, &k, &v, config.window_radius);
            let (loss, d_recon) = loss_and_grad(&recon, &seq.targets[t], config.loss, &quantizer)?;
            batch_loss += loss / config.batch_size as f64;
            let d_recon = d_recon.mapv(|g| g / config.batch_size as f64);
            let (dq, dk) =
                pair_attention_backward(&q, &k, &v, config.window_radius, &weights, &d_recon);
            d_features.index_axis_mut(Axis(0), 2 * b).assign(&dk);
            d_features.index_axis_mut(Axis(0), 2 * b + 1).assign(&dq);
        }
        encoder.backward_batch(&d_features, &cache);
        opt.lr = lr;
        let mut params = encoder.named_params_mut();
        let mut refs: Vec<(&str, &mut crate::nn::Param)> =
            params.iter_mut().map(|(n, p)| (n.as_str(), &mut **p)).collect();
        opt.step(&mut refs);
        rows.push(LossRow { step, phase: 1, lr, loss: batch_loss });
    }

    let phase1_path = out_dir.join("checkpoint_phase1.bin");
    save_checkpoint(&phase1_path, &mut encoder, config.checkpoint_meta())?;

    // Phase 2: multi-frame fine-tuning through localization and resampling.
    let mut opt = Adam::new(config.phase2_lr);
    let chain_cfg =
        ChainConfig { coarse_radius: config.window_radius, fine_radius: config.window_radius };
    for step in 0..config.phase2_steps {
        let mut picks = Vec::with_capacity(config.phase2_batch_size);
        for _ in 0..config.phase2_batch_size {
            let s = rng.gen_range(0..dataset.sequences.len());
            let t = rng.gen_range(1..dataset.sequences[s].inputs.len());
            let channel = if config.dropout_p > 0.0 && rng.gen::<f64>() < config.dropout_p {
                Some(rng.gen_range(0..3usize))
            } else {
                None
            };
            let bank = select_frames(t, &config.memory)?;
            picks.push((s, t, channel, bank));
        }
        // One batched forward over every frame touched this step.
        let mut images: Vec<Image> = Vec::new();
        let mut sample_slots: Vec<(usize, Vec<usize>)> = Vec::new(); // (target slot, bank slots)
        for (s, t, channel, bank) in &picks {
            let seq = &dataset.sequences[*s];
            let mut slots = Vec::with_capacity(bank.len());
            for &idx in bank {
                slots.push(images.len());
                images.push(match channel {
                    Some(c) => drop_channel(&seq.inputs[idx], *c),
                    None => seq.inputs[idx].clone(),
                });
            }
            let target_slot = images.len();
            images.push(match channel {
                Some(c) => drop_channel(&seq.inputs[*t], *c),
                None => seq.inputs[*t].clone(),
            });
            sample_slots.push((target_slot, slots));
        }
        let refs: Vec<&Image> = images.iter().collect();
        let x = image_batch(&refs);
        let (features, cache) = encoder.forward_train_batch(&x);
        let (_, c, h, w) = features.dim();
        let mut d_features = Array4::zeros(features.dim());
        let mut batch_loss = 0.0;

        for (p, (s, t, _, bank)) in picks.iter().enumerate() {
            let seq = &dataset.sequences[*s];
            let (target_slot, bank_slots) = &sample_slots[p];
            let to_hwc = |slot: usize| -> Array3<f64> {
                features
                    .index_axis(Axis(0), slot)
                    .permuted_axes([1, 2, 0])
                    .as_standard_layout()
                    .to_owned()
            };
            let q_map = to_hwc(*target_slot);
            let key_maps: Vec<Array3<f64>> = bank_slots.iter().map(|&sl| to_hwc(sl)).collect();
            let value_maps: Vec<Array3<f64>> = bank
                .iter()
                .map(|&idx| value_payload(&seq.targets[idx], config.loss, &quantizer))
                .collect();
            let dilations: Vec<usize> =
                bank.iter().map(|&idx| dilation_for(t - idx)).collect::<Result<_>>()?;
            let payloads: Vec<FramePayload<'_>> = key_maps
                .iter()
                .zip(&value_maps)
                .zip(&dilations)
                .map(|((k, v), &d)| FramePayload { key_hwc: k, value_hwc: v, dilation: d })
                .collect();

            let d = value_maps[0].shape()[2];
            let qs = q_map.as_slice().expect("standard layout");
            let mut recon = Array3::zeros((h, w, d));
            let mut states = Vec::with_capacity(h * w);
            for y in 0..h {
                for x_ in 0..w {
                    let query = &qs[(y * w + x_) * c..(y * w + x_ + 1) * c];
                    let state =
                        chain_forward(query, (x_ as i64, y as i64), &payloads, &chain_cfg)?;
                    for ch in 0..d {
                        recon[[y, x_, ch]] = state.recon[ch];
                    }
                    states.push(state);
                }
            }
            let (loss, d_recon) = loss_and_grad(&recon, &seq.targets[*t], config.loss, &quantizer)?;
            batch_loss += loss / config.phase2_batch_size as f64;
            let scale = 1.0 / config.phase2_batch_size as f64;

            let mut d_q_map = Array3::<f64>::zeros((h, w, c));
            let mut d_key_maps: Vec<Array3<f64>> =
                bank.iter().map(|_| Array3::zeros((h, w, c))).collect();
            let mut d_query = vec![0.0; c];
            let mut d_recon_cell = vec![0.0; d];
            for y in 0..h {
                for x_ in 0..w {
                    let query = &qs[(y * w + x_) * c..(y * w + x_ + 1) * c];
                    for ch in 0..d {
                        d_recon_cell[ch] = d_recon[[y, x_, ch]] * scale;
                    }
                    d_query.iter_mut().for_each(|g| *g = 0.0);
                    chain_backward(
                        query,
                        (x_ as i64, y as i64),
                        &payloads,
                        &chain_cfg,
                        &states[y * w + x_],
                        &d_recon_cell,
                        &mut d_query,
                        &mut d_key_maps,
                    );
                    for ch in 0..c {
                        d_q_map[[y, x_, ch]] += d_query[ch];
                    }
                }
            }
            // back to [C, h, w] slots
            let assign_chw = |dst: &mut Array4<f64>, slot: usize, hwc: &Array3<f64>| {
                let chw = hwc.view().permuted_axes([2, 0, 1]);
                let mut view = dst.index_axis_mut(Axis(0), slot);
                view += &chw;
            };
            assign_chw(&mut d_features, *target_slot, &d_q_map);
            for (slot, dk) in bank_slots.iter().zip(&d_key_maps) {
                assign_chw(&mut d_features, *slot, dk);
            }
        }
        encoder.backward_batch(&d_features, &cache);
        let mut params = encoder.named_params_mut();
        let mut refs: Vec<(&str, &mut crate::nn::Param)> =
            params.iter_mut().map(|(n, p)| (n.as_str(), &mut **p)).collect();
        opt.step(&mut refs);
        rows.push(LossRow { step: config.phase1_steps + step, phase: 2, lr: config.phase2_lr, loss: batch_loss });
    }

    let final_path = out_dir.join("checkpoint.bin");
    save_checkpoint(&final_path, &mut encoder, config.checkpoint_meta())?;
    write_loss_csv(&out_dir.join("loss.csv"), &rows)?;
    Ok(TrainReport { checkpoint: final_path, phase1_checkpoint: phase1_path, loss_rows: rows })
}

fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = String::from("step,phase,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.9},{:.9}\n", r.step, r.phase, r.lr, r.loss));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Batched single-frame restricted attention over full maps (phase 1).
// Offsets are enumerated once and applied with overlapping slices, which is
// equivalent to the per-query window ops.
// ---------------------------------------------------------------------------

type Region = (usize, usize, usize, usize, usize, usize); // y0, y1, x0, x1 in target; sy0, sx0 in source

fn offset_region(h: usize, w: usize, dy: i64, dx: i64) -> Option<Region> {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as i64 - dy.max(0)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as i64 - dx.max(0)) as usize;
    if y0 >= y1 || x0 >= x1 {
        return None;
    }
    Some((y0, y1, x0, x1, (y0 as i64 + dy) as usize, (x0 as i64 + dx) as usize))
}

fn offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::with_capacity((2 * radius + 1) * (2 * radius + 1));
    for dy in -r..=r {
        for dx in -r..=r {
            out.push((dy, dx));
        }
    }
    out
}

/// Reconstruction of every query cell from one reference frame:
/// per-cell softmax over the `(2r+1)^2` window, then a value copy.
/// Returns the reconstruction in `[h, w, D]` and the attention weights
/// (`[n_offsets, h, w]`, zero at masked sites) for the backward pass.
pub(crate) fn pair_attention_forward(
    q: &ndarray::ArrayView3<f64>,
    k: &ndarray::ArrayView3<f64>,
    v: &Array3<f64>,
    radius: usize,
) -> (Array3<f64>, Array3<f64>) {
    let (c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let d = v.shape()[2];
    let offs = offsets(radius);
    let mut logits = Array3::from_elem((offs.len(), h, w), f64::NEG_INFINITY);
    for (o, &(dy, dx)) in offs.iter().enumerate() {
        let Some((y0, y1, x0, x1, sy0, sx0)) = offset_region(h, w, dy, dx) else { continue };
        let (rh, rw) = (y1 - y0, x1 - x0);
        let mut plane = logits.index_axis_mut(Axis(0), o);
        let mut region = plane.slice_mut(ndarray::s![y0..y1, x0..x1]);
        region.fill(0.0);
        for ch in 0..c {
            let qr = q.slice(ndarray::s![ch, y0..y1, x0..x1]);
            let kr = k.slice(ndarray::s![ch, sy0..sy0 + rh, sx0..sx0 + rw]);
            ndarray::Zip::from(&mut region).and(&qr).and(&kr).for_each(|l: &mut f64, &a, &b| *l += a * b);
        }
    }
    // masked softmax across offsets
    let mut weights = logits;
    let mut max = Array2::from_elem((h, w), f64::NEG_INFINITY);
    for o in 0..offs.len() {
        let plane = weights.index_axis(Axis(0), o);
        ndarray::Zip::from(&mut max).and(&plane).for_each(|m: &mut f64, &l| {
            if l > *m {
                *m = l;
            }
        });
    }
    let mut denom = Array2::zeros((h, w));
    for o in 0..offs.len() {
        let mut plane = weights.index_axis_mut(Axis(0), o);
        ndarray::Zip::from(&mut plane).and(&max).for_each(|l: &mut f64, &m| {
            *l = if *l == f64::NEG_INFINITY { 0.0 } else { (*l - m).exp() };
        });
        denom += &plane;
    }
    for o in 0..offs.len() {
        let mut plane = weights.index_axis_mut(Axis(0), o);
        plane /= &denom;
    }
    // copy values
    let mut recon = Array3::zeros((h, w, d));
    for (o, &(dy, dx)) in offs.iter().enumerate() {
        let Some((y0, y1, x0, x1, sy0, sx0)) = offset_region(h, w, dy, dx) else { continue };
        let (rh, rw) = (y1 - y0, x1 - x0);
        let a = weights.slice(ndarray::s![o, y0..y1, x0..x1]);
        for ch in 0..d {
            let mut rr = recon.slice_mut(ndarray::s![y0..y1, x0..x1, ch]);
            let vr = v.slice(ndarray::s![sy0..sy0 + rh, sx0..sx0 + rw, ch]);
            ndarray::Zip::from(&mut rr).and(&a).and(&vr).for_each(|r: &mut f64, &aw, &vv| *r += aw * vv);
        }
    }
    (recon, weights)
}

/// Gradients of [`pair_attention_forward`] with respect to both feature maps.
pub(crate) fn pair_attention_backward(
    q: &ndarray::ArrayView3<f64>,
    k: &ndarray::ArrayView3<f64>,
    v: &Array3<f64>,
    radius: usize,
    weights: &Array3<f64>,
    d_recon: &Array3<f64>,
) -> (Array3<f64>, Array3<f64>) {
    let (c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let d = v.shape()[2];
    let offs = offsets(radius);
    // dA
    let mut d_weights = Array3::zeros((offs.len(), h, w));
    for (o, &(dy, dx)) in offs.iter().enumerate() {
        let Some((y0, y1, x0, x1, sy0, sx0)) = offset_region(h, w, dy, dx) else { continue };
        let (rh, rw) = (y1 - y0, x1 - x0);
        let mut da = d_weights.slice_mut(ndarray::s![o, y0..y1, x0..x1]);
        for ch in 0..d {
            let gr = d_recon.slice(ndarray::s![y0..y1, x0..x1, ch]);
            let vr = v.slice(ndarray::s![sy0..sy0 + rh, sx0..sx0 + rw, ch]);
            ndarray::Zip::from(&mut da).and(&gr).and(&vr).for_each(|o_: &mut f64, &g, &vv| *o_ += g * vv);
        }
    }
    // softmax backward across offsets
    let mut inner = Array2::zeros((h, w));
    for o in 0..offs.len() {
        let a = weights.index_axis(Axis(0), o);
        let da = d_weights.index_axis(Axis(0), o);
        ndarray::Zip::from(&mut inner).and(&a).and(&da).for_each(|s: &mut f64, &aw, &g| *s += aw * g);
    }
    let mut d_logits = d_weights;
    for o in 0..offs.len() {
        let a = weights.index_axis(Axis(0), o);
        let mut dl = d_logits.index_axis_mut(Axis(0), o);
        ndarray::Zip::from(&mut dl).and(&a).and(&inner).for_each(|g: &mut f64, &aw, &s| {
            *g = aw * (*g - s);
        });
    }
    // into the feature maps
    let mut dq = Array3::zeros((c, h, w));
    let mut dk = Array3::zeros((c, h, w));
    for (o, &(dy, dx)) in offs.iter().enumerate() {
        let Some((y0, y1, x0, x1, sy0, sx0)) = offset_region(h, w, dy, dx) else { continue };
        let (rh, rw) = (y1 - y0, x1 - x0);
        let dl = d_logits.slice(ndarray::s![o, y0..y1, x0..x1]);
        for ch in 0..c {
            let kr = k.slice(ndarray::s![ch, sy0..sy0 + rh, sx0..sx0 + rw]);
            let mut dqr = dq.slice_mut(ndarray::s![ch, y0..y1, x0..x1]);
            ndarray::Zip::from(&mut dqr).and(&dl).and(&kr).for_each(|g: &mut f64, &l, &b| *g += l * b);
            let qr = q.slice(ndarray::s![ch, y0..y1, x0..x1]);
            let mut dkr = dk.slice_mut(ndarray::s![ch, sy0..sy0 + rh, sx0..sx0 + rw]);
            ndarray::Zip::from(&mut dkr).and(&dl).and(&qr).for_each(|g: &mut f64, &l, &a| *g += l * a);
        }
    }
    (dq, dk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{copy, heatmap, im2col_dilated, WindowSpec};
    use crate::encoder::FeatureMap;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lr_schedule_halves_after_each_milestone() {
        let ms = [0.4, 0.6, 0.8];
        assert_eq!(lr_at(0, 2000, 1e-3, &ms), 1e-3);
        assert_eq!(lr_at(799, 2000, 1e-3, &ms), 1e-3);
        assert_eq!(lr_at(800, 2000, 1e-3, &ms), 5e-4);
        assert_eq!(lr_at(1199, 2000, 1e-3, &ms), 5e-4);
        assert_eq!(lr_at(1200, 2000, 1e-3, &ms), 2.5e-4);
        assert_eq!(lr_at(1600, 2000, 1e-3, &ms), 1.25e-4);
        assert_eq!(lr_at(1999, 2000, 1e-3, &ms), 1.25e-4);
    }

    #[test]
    fn config_overrides_and_validation() {
        let mut cfg = RunConfig::default();
        cfg.apply_file("phase1_steps = 10\nmemory = sized:2,1\n# comment\nloss=classification\n")
            .unwrap();
        assert_eq!(cfg.phase1_steps, 10);
        assert_eq!(cfg.memory, BankPolicy::sized(2, 1));
        assert_eq!(cfg.loss, LossKind::Classification);
        assert!(cfg.set("no_such_key", "1").is_err());
        cfg.lr_milestones = vec![0.6, 0.4];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pair_attention_matches_per_query_ops() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        let (c, h, w, d) = (5, 6, 7, 3);
        let q = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0));
        let k = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0));
        let v = Array3::from_shape_fn((h, w, d), |_| rng.gen_range(-1.0..1.0));
        let radius = 2;
        let (recon, _) = pair_attention_forward(&q.view(), &k.view(), &v, radius);

        let kfm = FeatureMap { values: k.clone(), stride: 4 };
        let vfm = FeatureMap {
            values: v.view().permuted_axes([2, 0, 1]).as_standard_layout().to_owned(),
            stride: 4,
        };
        let spec = WindowSpec::new(radius, 1).unwrap();
        for y in 0..h {
            for x in 0..w {
                let query = q.slice(ndarray::s![.., y, x]).to_owned();
                let win = im2col_dilated(&kfm, (x as i64, y as i64), &spec).unwrap();
                let hm = heatmap(query.view(), &win).unwrap();
                let vwin = im2col_dilated(&vfm, (x as i64, y as i64), &spec).unwrap();
                let expect = copy(hm.weights.view(), vwin.keys.view()).unwrap();
                for ch in 0..d {
                    assert_abs_diff_eq!(recon[[y, x, ch]], expect[ch], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn pair_attention_backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let (c, h, w, d) = (3, 5, 5, 2);
        let q = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0));
        let k = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0));
        let v = Array3::from_shape_fn((h, w, d), |_| rng.gen_range(-1.0..1.0));
        let proj = Array3::from_shape_fn((h, w, d), |_| rng.gen_range(-1.0..1.0));
        let radius = 1;

        let loss = |q: &Array3<f64>, k: &Array3<f64>| -> f64 {
            let (recon, _) = pair_attention_forward(&q.view(), &k.view(), &v, radius);
            (&recon * &proj).sum()
        };
        let (_, weights) = pair_attention_forward(&q.view(), &k.view(), &v, radius);
        let (dq, dk) = pair_attention_backward(&q.view(), &k.view(), &v, radius, &weights, &proj);

        let step = 1e-6;
        for _ in 0..10 {
            let idx = [rng.gen_range(0..c), rng.gen_range(0..h), rng.gen_range(0..w)];
            let mut qp = q.clone();
            qp[idx] += step;
            let mut qm = q.clone();
            qm[idx] -= step;
            let fd = (loss(&qp, &k) - loss(&qm, &k)) / (2.0 * step);
            assert_abs_diff_eq!(dq[idx], fd, epsilon = 1e-6);

            let mut kp = k.clone();
            kp[idx] += step;
            let mut km = k.clone();
            km[idx] -= step;
            let fd = (loss(&q, &kp) - loss(&q, &km)) / (2.0 * step);
            assert_abs_diff_eq!(dk[idx], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_step_training_writes_the_initialization() {
        use crate::data::{generate, preset_corpus};
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig { phase1_steps: 0, phase2_steps: 0, ..Default::default() };
        cfg.frame_size = 0;
        let frames: Vec<Vec<Image>> = preset_corpus(1, 2)
            .iter()
            .map(|s| generate(s).unwrap().frames)
            .collect();
        let dataset = TrainDataset::from_frame_lists(&frames, &cfg).unwrap();
        let report = train(&cfg, &dataset, dir.path()).unwrap();
        assert!(report.loss_rows.is_empty());
        let (mut trained, _) = crate::encoder::load_checkpoint(&report.checkpoint).unwrap();
        let mut fresh = Encoder::new(cfg.encoder_config()).unwrap();
        let fresh_params: Vec<_> =
            fresh.named_params_mut().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
        for ((n1, p1), (n2, v2)) in trained.named_params_mut().into_iter().zip(fresh_params) {
            assert_eq!(n1, n2);
            for (a, b) in p1.value.iter().zip(v2.iter()) {
                assert_eq!(*a, (*b as f32) as f64);
            }
        }
    }

    #[test]
    fn short_training_run_is_deterministic_and_learns() {
        use crate::data::{generate, preset_corpus};
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            phase1_steps: 12,
            phase2_steps: 2,
            batch_size: 2,
            phase2_batch_size: 1,
            window_radius: 3,
            frame_size: 0,
            widths: vec![8, 12, 16],
            ..Default::default()
        };
        let frames: Vec<Vec<Image>> = preset_corpus(2, 3)
            .iter()
            .map(|s| generate(s).unwrap().frames)
            .collect();
        let dataset = TrainDataset::from_frame_lists(&frames, &cfg).unwrap();
        let a = train(&cfg, &dataset, dir_a.path()).unwrap();
        let b = train(&cfg, &dataset, dir_b.path()).unwrap();
        for (ra, rb) in a.loss_rows.iter().zip(&b.loss_rows) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        }
        let bytes_a = std::fs::read(&a.checkpoint).unwrap();
        let bytes_b = std::fs::read(&b.checkpoint).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert!(a.loss_rows.iter().all(|r| r.loss.is_finite()));
    }
}
