//! Mask propagation through a sequence: for every target frame, build the
//! memory bank, localize an ROI per reference frame, resample keys and label
//! values, take the joint affinity, and copy labels.
//!
//! Label maps live at feature resolution throughout; full-resolution masks
//! are produced by bilinear upsampling of the probabilities followed by an
//! argmax with ties broken toward the lowest label.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::attention::{chain_forward, ChainConfig, FramePayload};
use crate::colorspace::{convert, ColorSpace, Image};
use crate::encoder::{align_sample_mask, Encoder, FeatureMap, FEATURE_STRIDE};
use crate::error::{Error, Result};
use crate::memory::{dilation_for, select_frames, BankPolicy, MemoryEntry};

/// Per-pixel label distribution at feature resolution (`h x w x L`,
/// label 0 is background).
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub probs: Array3<f64>,
}

impl crate::memory::GridValue for LabelMap {
    fn grid_hw(&self) -> (usize, usize) {
        (self.probs.shape()[0], self.probs.shape()[1])
    }
}

impl LabelMap {
    pub fn labels(&self) -> usize {
        self.probs.shape()[2]
    }

    /// One-hot map from integer labels.
    pub fn from_labels(labels: &Array2<u8>, label_count: usize) -> Result<Self> {
        let (h, w) = labels.dim();
        let mut probs = Array3::zeros((h, w, label_count));
        for y in 0..h {
            for x in 0..w {
                let l = labels[[y, x]] as usize;
                if l >= label_count {
                    return Err(Error::invalid(format!(
                        "label {l} out of range 0..{label_count}"
                    )));
                }
                probs[[y, x, l]] = 1.0;
            }
        }
        Ok(LabelMap { probs })
    }

    /// Per-cell argmax with ties to the lowest label index.
    pub fn argmax(&self) -> Array2<u8> {
        let (h, w, l) = self.probs.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0usize;
            let mut best_p = self.probs[[y, x, 0]];
            for k in 1..l {
                if self.probs[[y, x, k]] > best_p {
                    best_p = self.probs[[y, x, k]];
                    best = k;
                }
            }
            best as u8
        })
    }

    /// Quantize to a one-hot map (hard propagation).
    pub fn quantized(&self) -> LabelMap {
        LabelMap::from_labels(&self.argmax(), self.labels()).expect("argmax within range")
    }

    /// Largest deviation of any cell's probability mass from 1.
    pub fn simplex_error(&self) -> f64 {
        let (h, w, _) = self.probs.dim();
        let mut worst: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (0..self.labels()).map(|k| self.probs[[y, x, k]]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropagationMode {
    Soft,
    Hard,
}

impl std::str::FromStr for PropagationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(PropagationMode::Soft),
            "hard" => Ok(PropagationMode::Hard),
            other => Err(Error::Config(format!("unknown propagation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropagationConfig {
    pub mode: PropagationMode,
    pub policy: BankPolicy,
    /// Window radius used for both ROI localization and fine matching.
    pub radius: usize,
    /// Color space fed to the encoder (must match training).
    pub input_space: ColorSpace,
    /// Expected number of labels; derived from the first-frame mask when absent.
    pub label_count: Option<usize>,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            mode: PropagationMode::Hard,
            policy: BankPolicy::default(),
            radius: 6,
            input_space: ColorSpace::Lab,
            label_count: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropagationOutput {
    /// Per-frame label maps at feature resolution (frame 0 is the one-hot
    /// downsampled first-frame mask; in hard mode later maps are one-hot).
    pub label_maps: Vec<LabelMap>,
    /// Argmax of the label maps at feature resolution.
    pub cell_masks: Vec<Array2<u8>>,
    /// Full-resolution masks; frame 0 passes the input mask through.
    pub masks: Vec<Array2<u8>>,
}

/// Propagate the first-frame mask through the whole sequence.
pub fn propagate_sequence(
    encoder: &Encoder,
    frames: &[Image],
    mask0: &Array2<u8>,
    cfg: &PropagationConfig,
) -> Result<PropagationOutput> {
    if frames.len() < 2 {
        return Err(Error::invalid("propagation needs at least two frames"));
    }
    let (fh, fw) = (frames[0].height(), frames[0].width());
    if mask0.dim() != (fh, fw) {
        return Err(Error::shape(format!(
            "first-frame mask {:?} does not match frames {}x{}",
            mask0.dim(),
            fh,
            fw
        )));
    }
    let max_label = mask0.iter().copied().max().unwrap_or(0) as usize;
    let label_count = match cfg.label_count {
        Some(l) => {
            if max_label >= l {
                return Err(Error::invalid(format!(
                    "mask contains label {max_label}, expected labels in 0..{l}"
                )));
            }
            l
        }
        None => max_label + 1,
    };

    // Encode every frame once, in order.
    let mut keys: Vec<FeatureMap> = Vec::with_capacity(frames.len());
    for img in frames {
        let converted = if img.space == cfg.input_space {
            img.to_normalized()
        } else {
            convert(img, cfg.input_space)?
        };
        keys.push(encoder.encode(&converted)?);
    }
    let (h, w, c) = (keys[0].height(), keys[0].width(), keys[0].channels());

    let cells0 = align_sample_mask(mask0, FEATURE_STRIDE)?;
    let value0 = LabelMap::from_labels(&cells0, label_count)?;

    let chain_cfg = ChainConfig { coarse_radius: cfg.radius, fine_radius: cfg.radius };
    let mut values: Vec<LabelMap> = vec![value0.clone()];
    let mut cell_masks = vec![cells0];
    let mut masks = vec![mask0.clone()];

    for t in 1..frames.len() {
        let frame_ids = select_frames(t, &cfg.policy)?;
        if frame_ids.is_empty() {
            return Err(Error::EmptyBank { frame: t });
        }
        // Assemble the bank for this target: each entry pairs a key map with
        // the (possibly propagated) label map stored for that frame.
        let bank: Vec<MemoryEntry<LabelMap>> = frame_ids
            .iter()
            .map(|&idx| MemoryEntry::new(idx, keys[idx].clone(), values[idx].clone()))
            .collect::<Result<_>>()?;
        let bank_keys_hwc: Vec<Array3<f64>> = bank.iter().map(|e| e.key.to_hwc()).collect();
        let payloads: Vec<FramePayload<'_>> = bank
            .iter()
            .zip(&bank_keys_hwc)
            .map(|(entry, key_hwc)| {
                Ok(FramePayload {
                    key_hwc,
                    value_hwc: &entry.value.probs,
                    dilation: dilation_for(t - entry.frame_index)?,
                })
            })
            .collect::<Result<_>>()?;

        let target = keys[t].to_hwc();
        let ts = target.as_slice().expect("standard layout");
        let mut probs = Array3::zeros((h, w, label_count));
        for y in 0..h {
            for x in 0..w {
                let query = &ts[(y * w + x) * c..(y * w + x + 1) * c];
                let state = chain_forward(query, (x as i64, y as i64), &payloads, &chain_cfg)?;
                for k in 0..label_count {
                    probs[[y, x, k]] = state.recon[k];
                }
            }
        }
        let map = LabelMap { probs };
        let stored = match cfg.mode {
            PropagationMode::Hard => map.quantized(),
            PropagationMode::Soft => map,
        };
        cell_masks.push(stored.argmax());
        masks.push(upsample_mask(&stored, fh, fw)?);
        values.push(stored);
    }

    Ok(PropagationOutput { label_maps: values, cell_masks, masks })
}

/// Bilinearly upsample label probabilities to `height x width` pixels and
/// take the per-pixel argmax (ties to the lowest label). Pixel `p` samples
/// the cell grid at `(p - (stride - 1) / 2) / stride`, treating cell `i` as
/// the `stride`-pixel block starting at its sampling center; stride-aligned
/// rectangles then reconstruct exactly up to their corner pixels.
pub fn upsample_mask(lm: &LabelMap, height: usize, width: usize) -> Result<Array2<u8>> {
    let (h, w, l) = lm.probs.dim();
    if height % h != 0 || width % w != 0 || height / h != width / w {
        return Err(Error::invalid(format!(
            "cannot upsample a {h}x{w} map to {height}x{width}"
        )));
    }
    let stride = (height / h) as f64;
    let half = (stride - 1.0) / 2.0;
    let mut out = Array2::zeros((height, width));
    let mut dist = vec![0.0f64; l];
    for py in 0..height {
        let sy = ((py as f64 - half) / stride).clamp(0.0, (h - 1) as f64);
        let y0 = (sy.floor() as usize).min(h.saturating_sub(2));
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64).clamp(0.0, 1.0);
        for px in 0..width {
            let sx = ((px as f64 - half) / stride).clamp(0.0, (w - 1) as f64);
            let x0 = (sx.floor() as usize).min(w.saturating_sub(2));
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64).clamp(0.0, 1.0);
            for (k, d) in dist.iter_mut().enumerate() {
                *d = (1.0 - fy)
                    * ((1.0 - fx) * lm.probs[[y0, x0, k]] + fx * lm.probs[[y0, x1, k]])
                    + fy * ((1.0 - fx) * lm.probs[[y1, x0, k]] + fx * lm.probs[[y1, x1, k]]);
            }
            let mut best = 0usize;
            let mut best_p = dist[0];
            for (k, &d) in dist.iter().enumerate().skip(1) {
                if d > best_p {
                    best_p = d;
                    best = k;
                }
            }
            out[[py, px]] = best as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, ShapeKind, ShapeSpec, SyntheticSpec};
    use crate::encoder::EncoderConfig;

    fn static_sequence(frames: usize) -> (Vec<Image>, Array2<u8>) {
        let spec = SyntheticSpec {
            height: 32,
            width: 32,
            frames,
            seed: 11,
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Disk { radius: 7 },
                start: (16, 16),
                velocity: (0, 0),
            }],
            occluder: None,
            background_velocity: (0, 0),
            texture_cell: 6,
            texture_amplitude: 0.3,
        };
        let seq = generate(&spec).unwrap();
        (seq.frames.clone(), seq.masks[0].clone())
    }

    #[test]
    fn static_sequence_with_pointwise_window_is_identity() {
        let (frames, mask0) = static_sequence(10);
        let encoder = Encoder::new(EncoderConfig::toy(21)).unwrap();
        let cfg = PropagationConfig { radius: 0, ..Default::default() };
        let out = propagate_sequence(&encoder, &frames, &mask0, &cfg).unwrap();
        let expected = align_sample_mask(&mask0, FEATURE_STRIDE).unwrap();
        for t in 0..10 {
            assert_eq!(out.cell_masks[t], expected, "frame {t}");
        }
    }

    #[test]
    fn single_frame_pointwise_bank_is_nearest_cell_transport() {
        // m = 1 (previous frame only) and r = 0 degenerate to copying each
        // cell's own label forward: identity on static video.
        let (frames, mask0) = static_sequence(6);
        let encoder = Encoder::new(EncoderConfig::toy(27)).unwrap();
        let cfg = PropagationConfig {
            radius: 0,
            policy: crate::memory::BankPolicy::sized(1, 0),
            ..Default::default()
        };
        let out = propagate_sequence(&encoder, &frames, &mask0, &cfg).unwrap();
        let expected = align_sample_mask(&mask0, FEATURE_STRIDE).unwrap();
        for t in 0..6 {
            assert_eq!(out.cell_masks[t], expected, "frame {t}");
        }
    }

    #[test]
    fn soft_and_hard_modes_stay_on_the_simplex() {
        let (frames, mask0) = static_sequence(4);
        let encoder = Encoder::new(EncoderConfig::toy(22)).unwrap();
        for mode in [PropagationMode::Soft, PropagationMode::Hard] {
            let cfg = PropagationConfig { mode, radius: 2, ..Default::default() };
            let out = propagate_sequence(&encoder, &frames, &mask0, &cfg).unwrap();
            for lm in &out.label_maps {
                assert!(lm.simplex_error() < 1e-5);
                assert!(lm.probs.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn hard_mode_quantizes_memory_values() {
        let (frames, mask0) = static_sequence(4);
        let encoder = Encoder::new(EncoderConfig::toy(23)).unwrap();
        let cfg = PropagationConfig { radius: 2, ..Default::default() };
        let out = propagate_sequence(&encoder, &frames, &mask0, &cfg).unwrap();
        for lm in &out.label_maps {
            assert!(lm.probs.iter().all(|&p| p == 0.0 || p == 1.0));
        }
    }

    #[test]
    fn propagation_is_deterministic() {
        let (frames, mask0) = static_sequence(5);
        let encoder = Encoder::new(EncoderConfig::toy(24)).unwrap();
        let cfg = PropagationConfig { radius: 3, ..Default::default() };
        let a = propagate_sequence(&encoder, &frames, &mask0, &cfg).unwrap();
        let b = propagate_sequence(&encoder, &frames, &mask0, &cfg).unwrap();
        for t in 0..5 {
            assert_eq!(a.masks[t], b.masks[t]);
            assert_eq!(a.label_maps[t].probs, b.label_maps[t].probs);
        }
    }

    #[test]
    fn label_count_bound_is_enforced() {
        let (frames, mask0) = static_sequence(2);
        let encoder = Encoder::new(EncoderConfig::toy(25)).unwrap();
        let cfg = PropagationConfig { label_count: Some(1), ..Default::default() };
        assert!(matches!(
            propagate_sequence(&encoder, &frames, &mask0, &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn empty_bank_policy_is_an_error() {
        let (frames, mask0) = static_sequence(3);
        let encoder = Encoder::new(EncoderConfig::toy(26)).unwrap();
        let cfg = PropagationConfig {
            policy: crate::memory::BankPolicy::sized(0, 0),
            ..Default::default()
        };
        assert!(matches!(
            propagate_sequence(&encoder, &frames, &mask0, &cfg),
            Err(Error::EmptyBank { .. })
        ));
    }

    #[test]
    fn upsample_constant_map() {
        let labels = Array2::from_elem((4, 4), 2u8);
        let lm = LabelMap::from_labels(&labels, 3).unwrap();
        let up = upsample_mask(&lm, 16, 16).unwrap();
        assert!(up.iter().all(|&v| v == 2));
    }

    #[test]
    fn upsample_two_cell_split() {
        // 1x2 map with labels A=1 (left) and B=2 (right), upsampled to 1x8:
        // label A up to the interpolation midpoint, then B.
        let mut labels = Array2::zeros((1, 2));
        labels[[0, 0]] = 1u8;
        labels[[0, 1]] = 2u8;
        let lm = LabelMap::from_labels(&labels, 3).unwrap();
        let up = upsample_mask(&lm, 4, 8).unwrap();
        for px in 0..8 {
            let expect = if px < 4 { 1 } else { 2 };
            assert_eq!(up[[0, px]], expect, "pixel {px}");
        }
    }

    #[test]
    fn upsample_inverts_aligned_rectangles_up_to_corners() {
        // A stride-aligned rectangle survives downsample + upsample except at
        // its four corner pixels, where the 2D bilinear weight dips below 1/2.
        let mut mask = Array2::zeros((32, 32));
        for y in 8..24 {
            for x in 12..28 {
                mask[[y, x]] = 1u8;
            }
        }
        let cells = crate::encoder::align_sample_mask(&mask, 4).unwrap();
        let lm = LabelMap::from_labels(&cells, 2).unwrap();
        let up = upsample_mask(&lm, 32, 32).unwrap();
        let diffs: Vec<(usize, usize)> = up
            .indexed_iter()
            .zip(mask.iter())
            .filter(|((_, a), b)| *a != *b)
            .map(|(((y, x), _), _)| (y, x))
            .collect();
        assert_eq!(diffs, vec![(8, 12), (8, 27), (23, 12), (23, 27)]);
    }

    #[test]
    fn upsample_argmax_commutes_on_confident_cells() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let (h, w, l) = (8usize, 8usize, 3usize);
        // Confident label regions (random vertical bands) with mild noise, so
        // blocks of agreeing cells exist away from the band boundaries.
        let split = rng.gen_range(2..6);
        let mut probs = Array3::zeros((h, w, l));
        for y in 0..h {
            for x in 0..w {
                let dominant = if x < split { 1 } else { 2 };
                let spare = rng.gen_range(0.0..0.2);
                for k in 0..l {
                    probs[[y, x, k]] = if k == dominant {
                        1.0 - spare
                    } else {
                        spare / (l - 1) as f64
                    };
                }
            }
        }
        let lm = LabelMap { probs };
        let cell_arg = lm.argmax();
        let up = upsample_mask(&lm, 32, 32).unwrap();
        let confident = |y: usize, x: usize| -> Option<u8> {
            let a = cell_arg[[y, x]] as usize;
            let pa = lm.probs[[y, x, a]];
            let ok = (0..3).all(|k| k == a || pa - lm.probs[[y, x, k]] > 0.5);
            ok.then_some(a as u8)
        };
        let mut checked = 0usize;
        for py in 0..32 {
            for px in 0..32 {
                let sy = ((py as f64 - 1.5) / 4.0).clamp(0.0, 7.0);
                let sx = ((px as f64 - 1.5) / 4.0).clamp(0.0, 7.0);
                let y0 = (sy.floor() as usize).min(6);
                let x0 = (sx.floor() as usize).min(6);
                // all four contributing cells confidently agree
                let labels: Vec<Option<u8>> = vec![
                    confident(y0, x0),
                    confident(y0, x0 + 1),
                    confident(y0 + 1, x0),
                    confident(y0 + 1, x0 + 1),
                ];
                if let [Some(a), Some(b), Some(c), Some(d)] = labels[..] {
                    if a == b && b == c && c == d {
                        assert_eq!(up[[py, px]], a, "pixel ({py},{px})");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0, "no confident pixels generated");
    }
}
