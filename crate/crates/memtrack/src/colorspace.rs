//! Color conversions, per-channel normalization and the channel-dropout bottleneck.
//!
//! All conversions assume sRGB primaries with a D65 white point. Images are
//! carried through the pipeline normalized to `[-1, 1]` per channel; the raw
//! ranges used for normalization are fixed per space:
//!
//! | space | channel 0      | channel 1        | channel 2        |
//! |-------|----------------|------------------|------------------|
//! | RGB   | R in `[0, 1]`  | G in `[0, 1]`    | B in `[0, 1]`    |
//! | Lab   | L in `[0, 100]`| a in `[-127,127]`| b in `[-127,127]`|
//! | HSV   | H in `[0, 360)`| S in `[0, 1]`    | V in `[0, 1]`    |
//!
//! Hue is normalized linearly (no circular encoding).

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Color space tag for an [`Image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    Lab,
    Hsv,
}

impl fmt::Display for ColorSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ColorSpace::Rgb => "rgb",
            ColorSpace::Lab => "lab",
            ColorSpace::Hsv => "hsv",
        };
        f.write_str(s)
    }
}

impl FromStr for ColorSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(ColorSpace::Rgb),
            "lab" => Ok(ColorSpace::Lab),
            "hsv" => Ok(ColorSpace::Hsv),
            other => Err(Error::invalid(format!("unknown color space `{other}`"))),
        }
    }
}

/// An H x W x 3 frame with a color-space tag.
///
/// `normalized == true` means every channel value lies in `[-1, 1]`;
/// otherwise values are in the raw per-space ranges listed in the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f64>,
    pub space: ColorSpace,
    pub normalized: bool,
}

impl Image {
    /// Wrap normalized pixel data, validating dimensions and range.
    pub fn from_normalized(pixels: Array3<f64>, space: ColorSpace) -> Result<Self> {
        validate_dims(&pixels)?;
        if pixels.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-9) {
            return Err(Error::invalid(
                "normalized image must have finite channel values in [-1, 1]",
            ));
        }
        Ok(Image { pixels, space, normalized: true })
    }

    /// Wrap raw (unnormalized) pixel data, validating dimensions and finiteness.
    pub fn from_raw(pixels: Array3<f64>, space: ColorSpace) -> Result<Self> {
        validate_dims(&pixels)?;
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image pixels must be finite"));
        }
        Ok(Image { pixels, space, normalized: false })
    }

    /// Decode 8-bit RGB bytes (row-major, interleaved) into a normalized RGB image.
    pub fn from_rgb8(data: &[u8], height: usize, width: usize) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "expected {} RGB bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        let pixels = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
            let v = data[(y * width + x) * 3 + c] as f64 / 255.0;
            v * 2.0 - 1.0
        });
        Image::from_normalized(pixels, ColorSpace::Rgb)
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Per-channel normalization into `[-1, 1]` using the fixed raw ranges.
    pub fn to_normalized(&self) -> Image {
        if self.normalized {
            return self.clone();
        }
        let space = self.space;
        let mut pixels = self.pixels.clone();
        for mut px in pixels.rows_mut() {
            let (a, b, c) = normalize_triplet(space, px[0], px[1], px[2]);
            px[0] = a;
            px[1] = b;
            px[2] = c;
        }
        Image { pixels, space, normalized: true }
    }

    /// Back to the raw per-space ranges.
    pub fn to_raw(&self) -> Image {
        if !self.normalized {
            return self.clone();
        }
        let space = self.space;
        let mut pixels = self.pixels.clone();
        for mut px in pixels.rows_mut() {
            let (a, b, c) = denormalize_triplet(space, px[0], px[1], px[2]);
            px[0] = a;
            px[1] = b;
            px[2] = c;
        }
        Image { pixels, space, normalized: false }
    }
}

fn validate_dims(pixels: &Array3<f64>) -> Result<()> {
    let shape = pixels.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if c != 3 {
        return Err(Error::shape(format!("image must have 3 channels, got {c}")));
    }
    if h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(format!(
            "image dimensions must be >= 4 and divisible by 4, got {h}x{w}"
        )));
    }
    Ok(())
}

fn normalize_triplet(space: ColorSpace, a: f64, b: f64, c: f64) -> (f64, f64, f64) {
    let clamp = |v: f64| v.clamp(-1.0, 1.0);
    match space {
        ColorSpace::Rgb => (clamp(a * 2.0 - 1.0), clamp(b * 2.0 - 1.0), clamp(c * 2.0 - 1.0)),
        ColorSpace::Lab => (clamp(a / 50.0 - 1.0), clamp(b / 127.0), clamp(c / 127.0)),
        ColorSpace::Hsv => (clamp(a / 180.0 - 1.0), clamp(b * 2.0 - 1.0), clamp(c * 2.0 - 1.0)),
    }
}

fn denormalize_triplet(space: ColorSpace, a: f64, b: f64, c: f64) -> (f64, f64, f64) {
    match space {
        ColorSpace::Rgb => ((a + 1.0) / 2.0, (b + 1.0) / 2.0, (c + 1.0) / 2.0),
        ColorSpace::Lab => ((a + 1.0) * 50.0, b * 127.0, c * 127.0),
        ColorSpace::Hsv => ((a + 1.0) * 180.0, (b + 1.0) / 2.0, (c + 1.0) / 2.0),
    }
}

// sRGB <-> CIE Lab, D65 white point (IEC 61966-2-1 matrix).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124, 0.3576, 0.1805],
    [0.2126, 0.7152, 0.0722],
    [0.0193, 0.1192, 0.9505],
];
// Inverse of RGB_TO_XYZ, precomputed to full f64 precision.
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240625477320054, -1.537207972210319, -0.498628598698248],
    [-0.968930714729320, 1.875756060885241, 0.041517523842954],
    [0.055710120445511, -0.204021050598487, 1.056995942254388],
];
const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// Raw sRGB in `[0, 1]` to raw Lab (L in `[0, 100]`, a/b roughly `[-128, 128]`).
fn rgb_to_lab(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (lr, lg, lb) = (srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    let mut xyz = [0.0f64; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        xyz[i] = row[0] * lr + row[1] * lg + row[2] * lb;
    }
    let fx = lab_f(xyz[0] / WHITE_D65[0]);
    let fy = lab_f(xyz[1] / WHITE_D65[1]);
    let fz = lab_f(xyz[2] / WHITE_D65[2]);
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

fn lab_to_rgb(l: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let xyz = [
        WHITE_D65[0] * lab_f_inv(fx),
        WHITE_D65[1] * lab_f_inv(fy),
        WHITE_D65[2] * lab_f_inv(fz),
    ];
    let mut rgb = [0.0f64; 3];
    for (i, row) in XYZ_TO_RGB.iter().enumerate() {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        rgb[i] = linear_to_srgb(lin).clamp(0.0, 1.0);
    }
    (rgb[0], rgb[1], rgb[2])
}

/// Raw RGB in `[0, 1]` to HSV with H in degrees `[0, 360)`.
fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h.rem_euclid(360.0), s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r1 + m, g1 + m, b1 + m)
}

fn convert_triplet(from: ColorSpace, to: ColorSpace, a: f64, b: f64, c: f64) -> (f64, f64, f64) {
    if from == to {
        return (a, b, c);
    }
    // Route through raw RGB.
    let (r, g, bl) = match from {
        ColorSpace::Rgb => (a, b, c),
        ColorSpace::Lab => lab_to_rgb(a, b, c),
        ColorSpace::Hsv => hsv_to_rgb(a, b, c),
    };
    let (r, g, bl) = (r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), bl.clamp(0.0, 1.0));
    match to {
        ColorSpace::Rgb => (r, g, bl),
        ColorSpace::Lab => rgb_to_lab(r, g, bl),
        ColorSpace::Hsv => rgb_to_hsv(r, g, bl),
    }
}

/// Convert an image to `target` space.
///
/// The result is always renormalized to `[-1, 1]` per channel. Conversion is
/// deterministic and pure. Lab round trips back to RGB within `1e-3` per raw
/// channel for in-gamut colors.
pub fn convert(img: &Image, target: ColorSpace) -> Result<Image> {
    if img.pixels.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("image pixels must be finite"));
    }
    let raw = img.to_raw();
    let mut pixels = raw.pixels;
    for mut px in pixels.rows_mut() {
        let (a, b, c) = convert_triplet(raw.space, target, px[0], px[1], px[2]);
        let (a, b, c) = normalize_triplet(target, a, b, c);
        px[0] = a;
        px[1] = b;
        px[2] = c;
    }
    Ok(Image { pixels, space: target, normalized: true })
}

/// Channel-dropout specification.
///
/// With probability `probability` one channel index is drawn uniformly from
/// `{0, 1, 2}` (unless pinned by `dropped_channel`) and zeroed. The RNG is
/// seeded explicitly; there is no hidden global state.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub probability: f64,
    pub dropped_channel: Option<usize>,
    pub seed: u64,
}

impl DropoutSpec {
    pub fn new(probability: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::invalid(format!(
                "dropout probability must be in [0, 1], got {probability}"
            )));
        }
        Ok(DropoutSpec { probability, dropped_channel: None, seed })
    }

    /// Pin the dropped channel (the drop event itself still fires with
    /// `probability`).
    pub fn with_channel(mut self, channel: usize) -> Result<Self> {
        if channel > 2 {
            return Err(Error::invalid(format!("channel index must be in {{0,1,2}}, got {channel}")));
        }
        self.dropped_channel = Some(channel);
        Ok(self)
    }

    /// Sample the drop decision for one training pair: `Some(channel)` when a
    /// drop fires, `None` otherwise.
    pub fn sample(&self) -> Option<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let fires = self.probability > 0.0 && rng.gen::<f64>() < self.probability;
        if !fires {
            return None;
        }
        Some(match self.dropped_channel {
            Some(c) => c,
            None => rng.gen_range(0..3usize),
        })
    }
}

/// Zero `channel` everywhere in `img`, leaving the other channels untouched.
pub fn drop_channel(img: &Image, channel: usize) -> Image {
    let mut out = img.clone();
    out.pixels.slice_mut(ndarray::s![.., .., channel]).fill(0.0);
    out
}

/// Apply channel dropout to an encoder input.
///
/// Returns the (possibly unchanged) image together with the dropped channel
/// index so the caller can apply the identical drop to the paired frame.
pub fn apply_channel_dropout(img: &Image, spec: &DropoutSpec) -> Result<(Image, Option<usize>)> {
    if !img.normalized {
        return Err(Error::invalid("channel dropout expects a normalized image"));
    }
    match spec.sample() {
        Some(c) => Ok((drop_channel(img, c), Some(c))),
        None => Ok((img.clone(), None)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn solid(space: ColorSpace, raw: [f64; 3]) -> Image {
        let pixels = Array3::from_shape_fn((4, 4, 3), |(_, _, c)| raw[c]);
        Image::from_raw(pixels, space).unwrap()
    }

    fn lab_raw_of(img: &Image) -> [f64; 3] {
        let raw = img.to_raw();
        [raw.pixels[[0, 0, 0]], raw.pixels[[0, 0, 1]], raw.pixels[[0, 0, 2]]]
    }

    // Reference Lab values computed independently from the standard sRGB/D65
    // matrices before this module was written.
    const LAB_FIXTURES: [([f64; 3], [f64; 3]); 8] = [
        ([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
        ([1.0, 1.0, 1.0], [100.0, 0.005260500, -0.010408185]),
        ([0.5, 0.5, 0.5], [53.388964741, 0.003146730, -0.006225975]),
        ([1.0, 0.0, 0.0], [53.232881786, 80.109309530, 67.220068310]),
        ([0.0, 1.0, 0.0], [87.737033474, -86.184636498, 83.181164748]),
        ([0.0, 0.0, 1.0], [32.302586667, 79.196661789, -107.863681045]),
        ([0.2, 0.4, 0.6], [42.009985777, -0.144744812, -32.851512865]),
        ([0.9, 0.1, 0.3], [49.479126397, 73.231002740, 27.082282514]),
    ];

    #[test]
    fn lab_matches_reference_conversion() {
        for (rgb, lab) in LAB_FIXTURES {
            let img = solid(ColorSpace::Rgb, rgb);
            let got = lab_raw_of(&convert(&img, ColorSpace::Lab).unwrap());
            for c in 0..3 {
                assert_abs_diff_eq!(got[c], lab[c], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn black_maps_to_lab_zero() {
        let img = solid(ColorSpace::Rgb, [0.0, 0.0, 0.0]);
        let lab = lab_raw_of(&convert(&img, ColorSpace::Lab).unwrap());
        assert_abs_diff_eq!(lab[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(lab[1], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(lab[2], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn white_is_neutral() {
        let img = solid(ColorSpace::Rgb, [1.0, 1.0, 1.0]);
        let lab = lab_raw_of(&convert(&img, ColorSpace::Lab).unwrap());
        assert_abs_diff_eq!(lab[0], 100.0, epsilon = 1e-6);
        assert!(lab[1].abs() < 0.05 && lab[2].abs() < 0.05);
    }

    #[test]
    fn mid_gray_has_neutral_chroma() {
        let img = solid(ColorSpace::Rgb, [0.5, 0.5, 0.5]);
        let lab = lab_raw_of(&convert(&img, ColorSpace::Lab).unwrap());
        assert!(lab[1].abs() < 0.5 && lab[2].abs() < 0.5);
    }

    #[test]
    fn conversion_is_deterministic() {
        let img = solid(ColorSpace::Rgb, [0.9, 0.1, 0.3]);
        let a = convert(&img, ColorSpace::Lab).unwrap();
        let b = convert(&img, ColorSpace::Lab).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn hue_fixture_red() {
        let img = solid(ColorSpace::Rgb, [1.0, 0.0, 0.0]);
        let hsv = convert(&img, ColorSpace::Hsv).unwrap().to_raw();
        assert_abs_diff_eq!(hsv.pixels[[0, 0, 0]], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(hsv.pixels[[0, 0, 1]], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(hsv.pixels[[0, 0, 2]], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn unknown_space_string_is_invalid_argument() {
        let err = "xyz".parse::<ColorSpace>().unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn dropout_probability_zero_is_identity() {
        let img = solid(ColorSpace::Rgb, [0.2, 0.4, 0.6]).to_normalized();
        let spec = DropoutSpec::new(0.0, 7).unwrap();
        let (out, dropped) = apply_channel_dropout(&img, &spec).unwrap();
        assert!(dropped.is_none());
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn dropout_forced_channel_zeroes_only_that_channel() {
        let img = solid(ColorSpace::Rgb, [0.2, 0.4, 0.6]).to_normalized();
        let spec = DropoutSpec::new(1.0, 7).unwrap().with_channel(1).unwrap();
        let (out, dropped) = apply_channel_dropout(&img, &spec).unwrap();
        assert_eq!(dropped, Some(1));
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.pixels[[y, x, 1]], 0.0);
                assert_eq!(out.pixels[[y, x, 0]].to_bits(), img.pixels[[y, x, 0]].to_bits());
                assert_eq!(out.pixels[[y, x, 2]].to_bits(), img.pixels[[y, x, 2]].to_bits());
            }
        }
    }

    #[test]
    fn dropout_rate_is_close_to_half() {
        let mut fired = 0usize;
        for seed in 0..10_000u64 {
            let spec = DropoutSpec::new(0.5, seed).unwrap();
            if spec.sample().is_some() {
                fired += 1;
            }
        }
        let rate = fired as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&rate), "drop rate {rate}");
    }

    #[test]
    fn dropped_channel_is_uniform() {
        // Chi-square over the channel histogram conditioned on a drop;
        // 2 degrees of freedom, p > 0.01 requires chi2 < 9.21.
        let mut counts = [0usize; 3];
        for seed in 0..10_000u64 {
            let spec = DropoutSpec::new(1.0, seed).unwrap();
            counts[spec.sample().unwrap()] += 1;
        }
        let expected = 10_000.0 / 3.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 9.21, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn dropout_is_deterministic_per_seed() {
        let spec = DropoutSpec::new(0.5, 1234).unwrap();
        assert_eq!(spec.sample(), spec.sample());
    }

    proptest! {
        #[test]
        fn lab_round_trip_within_tolerance(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let img = solid(ColorSpace::Rgb, [r, g, b]);
            let lab = convert(&img, ColorSpace::Lab).unwrap();
            let back = convert(&lab, ColorSpace::Rgb).unwrap().to_raw();
            prop_assert!((back.pixels[[0,0,0]] - r).abs() < 1e-3);
            prop_assert!((back.pixels[[0,0,1]] - g).abs() < 1e-3);
            prop_assert!((back.pixels[[0,0,2]] - b).abs() < 1e-3);
        }

        #[test]
        fn converted_images_stay_normalized(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0,
                                            target in prop::sample::select(vec![ColorSpace::Rgb, ColorSpace::Lab, ColorSpace::Hsv])) {
            let img = solid(ColorSpace::Rgb, [r, g, b]);
            let out = convert(&img, target).unwrap();
            prop_assert!(out.normalized);
            prop_assert!(out.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
