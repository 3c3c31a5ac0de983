//! Desk-scale data: a deterministic synthetic moving-shapes generator with
//! ground-truth masks and known motion, plus frame/mask directory I/O.
//!
//! Generated shapes carry low-frequency textured fills (anchored to the shape
//! so they translate rigidly) rather than flat colors, which makes
//! correspondence learnable and color-shortcut failures observable.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::colorspace::{ColorSpace, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ShapeKind {
    Rectangle { width: usize, height: usize },
    Disk { radius: usize },
}

/// One moving shape: `start` is the top-left corner for rectangles and the
/// center for disks, both `(x, y)` in pixels; velocity is px/frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub kind: ShapeKind,
    pub start: (i64, i64),
    pub velocity: (i64, i64),
}

/// A static full-height foreground bar drawn over `first_frame..=last_frame`,
/// labeled background in the masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccluderSpec {
    pub x0: usize,
    pub width: usize,
    pub first_frame: usize,
    pub last_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub seed: u64,
    pub shapes: Vec<ShapeSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub occluder: Option<OccluderSpec>,
    /// Background pan in px/frame; shapes moving at the same velocity give a
    /// whole-frame translation (camera pan).
    #[serde(default)]
    pub background_velocity: (i64, i64),
    /// Texture noise cell size in pixels (low spatial frequency).
    pub texture_cell: usize,
    pub texture_amplitude: f64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::invalid("canvas dimensions must be >= 4 and divisible by 4"));
        }
        if self.frames == 0 {
            return Err(Error::invalid("need at least one frame"));
        }
        if self.texture_cell == 0 {
            return Err(Error::invalid("texture cell must be positive"));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            let (sw, sh) = shape_extent(&s.kind);
            if sw > self.width || sh > self.height {
                return Err(Error::invalid(format!(
                    "shape {i} ({sw}x{sh}) is larger than the {}x{} canvas",
                    self.width, self.height
                )));
            }
        }
        if let Some(o) = &self.occluder {
            if o.x0 + o.width > self.width {
                return Err(Error::invalid("occluder extends past the canvas"));
            }
            if o.first_frame > o.last_frame || o.last_frame >= self.frames {
                return Err(Error::invalid("occluder frame range is invalid"));
            }
        }
        Ok(())
    }
}

/// Ground-truth motion: per-shape top-left/center positions per frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionRecord {
    pub positions: Vec<Vec<(i64, i64)>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub occluded_frames: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub frames: Vec<Image>,
    pub masks: Vec<Array2<u8>>,
    pub truth: MotionRecord,
}

fn shape_extent(kind: &ShapeKind) -> (usize, usize) {
    match kind {
        ShapeKind::Rectangle { width, height } => (*width, *height),
        ShapeKind::Disk { radius } => (2 * radius + 1, 2 * radius + 1),
    }
}

/// Low-frequency RGB noise field: a coarse random grid, bilinearly
/// interpolated at pixel coordinates.
#[derive(Debug, Clone)]
struct Texture {
    grid: Array3<f64>, // [gh, gw, 3]
    cell: f64,
}

impl Texture {
    fn new(w: usize, h: usize, cell: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Self {
        let gw = w.div_ceil(cell) + 2;
        let gh = h.div_ceil(cell) + 2;
        let base = [
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
        ];
        let grid = Array3::from_shape_fn((gh, gw, 3), |(_, _, c)| {
            (base[c] + amplitude * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0)
        });
        Texture { grid, cell: cell as f64 }
    }

    fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let (gh, gw, _) = self.grid.dim();
        let gx = (x / self.cell).clamp(0.0, (gw - 1) as f64);
        let gy = (y / self.cell).clamp(0.0, (gh - 1) as f64);
        let x0 = (gx.floor() as usize).min(gw - 2);
        let y0 = (gy.floor() as usize).min(gh - 2);
        let fx = gx - x0 as f64;
        let fy = gy - y0 as f64;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = (1.0 - fy)
                * ((1.0 - fx) * self.grid[[y0, x0, c]] + fx * self.grid[[y0, x0 + 1, c]])
                + fy * ((1.0 - fx) * self.grid[[y0 + 1, x0, c]]
                    + fx * self.grid[[y0 + 1, x0 + 1, c]]);
        }
        out
    }
}

fn inside_shape(kind: &ShapeKind, local_x: i64, local_y: i64) -> bool {
    match kind {
        ShapeKind::Rectangle { width, height } => {
            local_x >= 0 && local_y >= 0 && (local_x as usize) < *width && (local_y as usize) < *height
        }
        ShapeKind::Disk { radius } => {
            let r = *radius as i64;
            // local coords relative to center
            local_x * local_x + local_y * local_y <= r * r
        }
    }
}

/// Render the sequence described by `spec`. Pure function: the same spec
/// (including seed) produces bitwise-identical output.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Pad the background field so panning never runs off the texture.
    let span = spec.frames.saturating_sub(1) as i64;
    let pad_x = (spec.background_velocity.0.abs() * span) as usize;
    let pad_y = (spec.background_velocity.1.abs() * span) as usize;
    let background = Texture::new(
        spec.width + 2 * pad_x,
        spec.height + 2 * pad_y,
        spec.texture_cell,
        spec.texture_amplitude,
        &mut rng,
    );
    let shape_textures: Vec<Texture> = spec
        .shapes
        .iter()
        .map(|s| {
            let (sw, sh) = shape_extent(&s.kind);
            Texture::new(sw, sh, spec.texture_cell, spec.texture_amplitude, &mut rng)
        })
        .collect();
    let occ_texture = spec
        .occluder
        .as_ref()
        .map(|o| Texture::new(o.width, spec.height, spec.texture_cell, spec.texture_amplitude, &mut rng));

    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut positions = vec![Vec::with_capacity(spec.frames); spec.shapes.len()];

    for t in 0..spec.frames {
        let mut rgb = vec![0u8; spec.height * spec.width * 3];
        let mut mask = Array2::<u8>::zeros((spec.height, spec.width));
        let bg_off_x = (pad_x as i64 - spec.background_velocity.0 * t as i64) as f64;
        let bg_off_y = (pad_y as i64 - spec.background_velocity.1 * t as i64) as f64;
        for y in 0..spec.height {
            for x in 0..spec.width {
                let c = background.sample(x as f64 + bg_off_x, y as f64 + bg_off_y);
                for ch in 0..3 {
                    rgb[(y * spec.width + x) * 3 + ch] = quantize(c[ch]);
                }
            }
        }
        for (k, shape) in spec.shapes.iter().enumerate() {
            let px = shape.start.0 + shape.velocity.0 * t as i64;
            let py = shape.start.1 + shape.velocity.1 * t as i64;
            positions[k].push((px, py));
            let (sw, sh) = shape_extent(&shape.kind);
            // bounding box in canvas coordinates
            let (bx0, by0) = match shape.kind {
                ShapeKind::Rectangle { .. } => (px, py),
                ShapeKind::Disk { radius } => (px - radius as i64, py - radius as i64),
            };
            for ly in 0..sh as i64 {
                let y = by0 + ly;
                if y < 0 || y >= spec.height as i64 {
                    continue;
                }
                for lx in 0..sw as i64 {
                    let x = bx0 + lx;
                    if x < 0 || x >= spec.width as i64 {
                        continue;
                    }
                    let hit = match shape.kind {
                        ShapeKind::Rectangle { .. } => inside_shape(&shape.kind, lx, ly),
                        ShapeKind::Disk { radius } => {
                            inside_shape(&shape.kind, lx - radius as i64, ly - radius as i64)
                        }
                    };
                    if hit {
                        let c = shape_textures[k].sample(lx as f64, ly as f64);
                        let (xu, yu) = (x as usize, y as usize);
                        for ch in 0..3 {
                            rgb[(yu * spec.width + xu) * 3 + ch] = quantize(c[ch]);
                        }
                        mask[[yu, xu]] = (k + 1) as u8;
                    }
                }
            }
        }
        if let Some(o) = &spec.occluder {
            if t >= o.first_frame && t <= o.last_frame {
                let tex = occ_texture.as_ref().expect("texture exists with occluder");
                for y in 0..spec.height {
                    for x in o.x0..o.x0 + o.width {
                        let c = tex.sample((x - o.x0) as f64, y as f64);
                        for ch in 0..3 {
                            rgb[(y * spec.width + x) * 3 + ch] = quantize(c[ch]);
                        }
                        mask[[y, x]] = 0;
                    }
                }
            }
        }
        frames.push(Image::from_rgb8(&rgb, spec.height, spec.width)?);
        masks.push(mask);
    }
    let truth = MotionRecord {
        positions,
        occluded_frames: spec.occluder.as_ref().map(|o| (o.first_frame, o.last_frame)),
    };
    Ok(SyntheticSequence { frames, masks, truth })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

// ---------------------------------------------------------------------------
// Presets used by the training/evaluation pipeline and the examples.
// ---------------------------------------------------------------------------

/// Training corpus: textured shapes with small velocities on a 48x48 canvas,
/// twelve frames per sequence.
pub fn preset_corpus(seed: u64, sequences: usize) -> Vec<SyntheticSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    (0..sequences)
        .map(|i| {
            let n_shapes = 1 + (i % 2);
            let shapes = (0..n_shapes)
                .map(|_| {
                    let kind = if rng.gen_bool(0.5) {
                        ShapeKind::Rectangle {
                            width: rng.gen_range(12..=20),
                            height: rng.gen_range(12..=20),
                        }
                    } else {
                        ShapeKind::Disk { radius: rng.gen_range(6..=9) }
                    };
                    let start = (rng.gen_range(8..28) as i64, rng.gen_range(8..28) as i64);
                    let velocity = (rng.gen_range(-3..=3) as i64, rng.gen_range(-3..=3) as i64);
                    ShapeSpec { kind, start, velocity }
                })
                .collect();
            let background_velocity = if rng.gen_bool(0.5) {
                (0, 0)
            } else {
                (rng.gen_range(-2..=2), rng.gen_range(-2..=2))
            };
            SyntheticSpec {
                height: 48,
                width: 48,
                frames: 12,
                seed: seed.wrapping_add(1 + i as u64),
                shapes,
                occluder: if i % 4 == 3 {
                    Some(OccluderSpec { x0: 20, width: 10, first_frame: 4, last_frame: 8 })
                } else {
                    None
                },
                background_velocity,
                texture_cell: 6,
                texture_amplitude: 0.3,
            }
        })
        .collect()
}

/// Held-out translation sequence: every frame is the previous one translated
/// by exactly 4 pixels (one feature cell) -- a camera pan over a 4px-aligned
/// textured rectangle.
pub fn preset_translation(seed: u64) -> SyntheticSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bf0_3635);
    let axis = rng.gen_bool(0.5);
    let sign: i64 = if rng.gen_bool(0.5) { 1 } else { -1 };
    let velocity = if axis { (4 * sign, 0) } else { (0, 4 * sign) };
    let start = match (axis, sign > 0) {
        (true, true) => (8, 12),
        (true, false) => (28, 12),
        (false, true) => (12, 8),
        (false, false) => (12, 28),
    };
    SyntheticSpec {
        height: 48,
        width: 48,
        frames: 6,
        seed,
        shapes: vec![ShapeSpec {
            kind: ShapeKind::Rectangle { width: 16, height: 16 },
            start,
            velocity,
        }],
        occluder: None,
        background_velocity: velocity,
        texture_cell: 6,
        texture_amplitude: 0.3,
    }
}

/// Occlusion sequence: a slow disk fully hidden by a foreground bar for
/// frames 5..=10, reappearing afterwards.
pub fn preset_occlusion(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        height: 64,
        width: 64,
        frames: 14,
        seed,
        shapes: vec![ShapeSpec {
            kind: ShapeKind::Disk { radius: 8 },
            start: (20, 32),
            velocity: (1, 0),
        }],
        occluder: Some(OccluderSpec { x0: 16, width: 24, first_frame: 5, last_frame: 10 }),
        background_velocity: (0, 0),
        texture_cell: 6,
        texture_amplitude: 0.3,
    }
}

/// Drift sequence for propagation-mode comparisons: a fast whole-cell pan
/// that carries two weakly textured objects beyond the long-term anchor's
/// window reach, so quality rests on how well recursive propagation resists
/// drift.
pub fn preset_drift(seed: u64) -> SyntheticSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d2f_11_aa);
    let dir: i64 = if rng.gen_bool(0.5) { 1 } else { -1 };
    let velocity = (4 * dir, 0);
    let sx = if dir > 0 { 8 } else { 96 - 8 - 14 };
    SyntheticSpec {
        height: 96,
        width: 96,
        frames: 18,
        seed,
        shapes: vec![
            ShapeSpec {
                kind: ShapeKind::Rectangle { width: 14, height: 14 },
                start: (sx, 20 + rng.gen_range(-4..=4)),
                velocity,
            },
            ShapeSpec { kind: ShapeKind::Disk { radius: 7 }, start: (sx + 4, 64), velocity },
        ],
        occluder: None,
        background_velocity: velocity,
        texture_cell: 10,
        texture_amplitude: 0.15,
    }
}

// ---------------------------------------------------------------------------
// Frame/mask directory I/O. Frames are 8-bit RGB image files; masks are
// 8-bit single-channel images holding label indices, one file per frame with
// names matching the frame files.
// ---------------------------------------------------------------------------

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn image_to_rgb8(img: &Image) -> Result<(Vec<u8>, u32, u32)> {
    let rgb = if img.space == ColorSpace::Rgb {
        img.to_raw()
    } else {
        crate::colorspace::convert(img, ColorSpace::Rgb)?.to_raw()
    };
    let (h, w) = (rgb.height(), rgb.width());
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data.push(quantize(rgb.pixels[[y, x, c]]));
            }
        }
    }
    Ok((data, w as u32, h as u32))
}

/// Write frames (and optionally masks) as `frames/NNNNN.png` and
/// `masks/NNNNN.png` under `dir`.
pub fn save_sequence(dir: &Path, frames: &[Image], masks: Option<&[Array2<u8>]>) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    for (i, img) in frames.iter().enumerate() {
        let (data, w, h) = image_to_rgb8(img)?;
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(w, h, data).expect("buffer matches dimensions");
        buf.save(frames_dir.join(format!("{i:05}.png")))?;
    }
    if let Some(masks) = masks {
        let masks_dir = dir.join("masks");
        std::fs::create_dir_all(&masks_dir)?;
        for (i, m) in masks.iter().enumerate() {
            save_mask(&masks_dir.join(format!("{i:05}.png")), m)?;
        }
    }
    Ok(())
}

/// Write a single label mask as an 8-bit single-channel PNG.
pub fn save_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: image::GrayImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, mask.iter().copied().collect())
            .expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Read a label mask.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| gray.get_pixel(x as u32, y as u32)[0]))
}

#[derive(Debug, Clone)]
pub struct LoadedSequence {
    pub frames: Vec<Image>,
    pub masks: Option<Vec<Array2<u8>>>,
    /// File stems in loading order (lexicographic).
    pub names: Vec<String>,
}

fn list_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|_| Error::MissingFile(dir.to_path_buf()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no image files in {}", dir.display())));
    }
    Ok(files)
}

/// Load a frame directory (and a parallel mask directory when given) in
/// lexicographic order. `target_size = Some(s)` resizes frames bilinearly to
/// `s x s` and masks with nearest-neighbor; `None` keeps native dimensions.
pub fn load_sequence(
    frames_dir: &Path,
    masks_dir: Option<&Path>,
    target_size: Option<usize>,
) -> Result<LoadedSequence> {
    let files = list_image_files(frames_dir)?;
    let mut frames = Vec::with_capacity(files.len());
    let mut names = Vec::with_capacity(files.len());
    let mut dims: Option<(u32, u32)> = None;
    for path in &files {
        let img = image::open(path)?.to_rgb8();
        let img = match target_size {
            Some(s) if img.dimensions() != (s as u32, s as u32) => image::imageops::resize(
                &img,
                s as u32,
                s as u32,
                image::imageops::FilterType::Triangle,
            ),
            _ => img,
        };
        let (w, h) = img.dimensions();
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::invalid(format!(
                    "inconsistent frame dimensions: {}x{} vs {}x{} at {}",
                    d.0,
                    d.1,
                    w,
                    h,
                    path.display()
                )))
            }
            _ => {}
        }
        frames.push(Image::from_rgb8(img.as_raw(), h as usize, w as usize)?);
        names.push(
            path.file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string(),
        );
    }

    let masks = match masks_dir {
        None => None,
        Some(mdir) => {
            let mut available: BTreeMap<String, PathBuf> = BTreeMap::new();
            for p in list_image_files(mdir)? {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    available.insert(stem.to_string(), p);
                }
            }
            let (fw, fh) = dims.expect("at least one frame");
            let mut masks = Vec::with_capacity(names.len());
            for stem in &names {
                let path = available.get(stem).ok_or_else(|| {
                    Error::MissingFile(mdir.join(format!("{stem}.png")))
                })?;
                let raw = image::open(path)?.to_luma8();
                let raw = if raw.dimensions() != (fw, fh) {
                    image::imageops::resize(&raw, fw, fh, image::imageops::FilterType::Nearest)
                } else {
                    raw
                };
                masks.push(Array2::from_shape_fn((fh as usize, fw as usize), |(y, x)| {
                    raw.get_pixel(x as u32, y as u32)[0]
                }));
            }
            Some(masks)
        }
    };
    Ok(LoadedSequence { frames, masks, names })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn static_disk_spec() -> SyntheticSpec {
        SyntheticSpec {
            height: 32,
            width: 32,
            frames: 3,
            seed: 5,
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Disk { radius: 6 },
                start: (16, 16),
                velocity: (0, 0),
            }],
            occluder: None,
            background_velocity: (0, 0),
            texture_cell: 6,
            texture_amplitude: 0.3,
        }
    }

    #[test]
    fn static_disk_gives_identical_frames_and_masks() {
        let seq = generate(&static_disk_spec()).unwrap();
        assert_eq!(seq.frames.len(), 3);
        for t in 1..3 {
            assert_eq!(seq.frames[t].pixels, seq.frames[0].pixels);
            assert_eq!(seq.masks[t], seq.masks[0]);
        }
        assert!(seq.masks[0].iter().any(|&v| v == 1));
    }

    #[test]
    fn translated_rectangle_shifts_its_mask() {
        let spec = SyntheticSpec {
            height: 32,
            width: 32,
            frames: 2,
            seed: 6,
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Rectangle { width: 8, height: 8 },
                start: (4, 12),
                velocity: (4, 0),
            }],
            occluder: None,
            background_velocity: (0, 0),
            texture_cell: 6,
            texture_amplitude: 0.3,
        };
        let seq = generate(&spec).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let shifted = if x >= 4 { seq.masks[0][[y, x - 4]] } else { 0 };
                assert_eq!(seq.masks[1][[y, x]], shifted);
            }
        }
    }

    #[test]
    fn panning_sequence_translates_whole_frames() {
        let spec = preset_translation(9);
        let seq = generate(&spec).unwrap();
        let (vx, vy) = spec.background_velocity;
        for t in 1..spec.frames {
            let prev = &seq.frames[t - 1].pixels;
            let cur = &seq.frames[t].pixels;
            for y in 0..spec.height as i64 {
                for x in 0..spec.width as i64 {
                    let (sx, sy) = (x - vx, y - vy);
                    if sx < 0 || sy < 0 || sx >= spec.width as i64 || sy >= spec.height as i64 {
                        continue;
                    }
                    for c in 0..3 {
                        assert_eq!(
                            cur[[y as usize, x as usize, c]].to_bits(),
                            prev[[sy as usize, sx as usize, c]].to_bits(),
                            "frame {t} pixel ({y},{x})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn occluder_hides_and_releases_the_disk() {
        let spec = preset_occlusion(7);
        let seq = generate(&spec).unwrap();
        let (first, last) = seq.truth.occluded_frames.unwrap();
        for t in first..=last {
            assert!(
                seq.masks[t].iter().all(|&v| v != 1),
                "disk visible during occlusion at frame {t}"
            );
        }
        // before and after: the disk is present at the motion-predicted spot
        for &t in &[0usize, last + 1, spec.frames - 1] {
            let (px, py) = seq.truth.positions[0][t];
            assert_eq!(seq.masks[t][[py as usize, px as usize]], 1, "frame {t}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&static_disk_spec()).unwrap();
        let b = generate(&static_disk_spec()).unwrap();
        for t in 0..3 {
            assert_eq!(a.frames[t].pixels, b.frames[t].pixels);
            assert_eq!(a.masks[t], b.masks[t]);
        }
    }

    #[test]
    fn labels_are_constant_per_shape() {
        let specs = preset_corpus(3, 4);
        for spec in &specs {
            let seq = generate(spec).unwrap();
            let max_label = spec.shapes.len() as u8;
            for m in &seq.masks {
                assert!(m.iter().all(|&v| v <= max_label));
            }
        }
    }

    #[test]
    fn oversized_shape_is_rejected() {
        let mut spec = static_disk_spec();
        spec.shapes[0] = ShapeSpec {
            kind: ShapeKind::Rectangle { width: 64, height: 8 },
            start: (0, 0),
            velocity: (0, 0),
        };
        assert!(matches!(generate(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sequence_io_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate(&static_disk_spec()).unwrap();
        save_sequence(dir.path(), &seq.frames, Some(&seq.masks)).unwrap();
        let loaded = load_sequence(
            &dir.path().join("frames"),
            Some(&dir.path().join("masks")),
            None,
        )
        .unwrap();
        assert_eq!(loaded.frames.len(), 3);
        assert_eq!(loaded.names, vec!["00000", "00001", "00002"]);
        for t in 0..3 {
            assert_eq!(loaded.frames[t].pixels, seq.frames[t].pixels);
            assert_eq!(loaded.masks.as_ref().unwrap()[t], seq.masks[t]);
        }
    }

    #[test]
    fn missing_mask_error_names_the_first_gap() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate(&static_disk_spec()).unwrap();
        save_sequence(dir.path(), &seq.frames, Some(&seq.masks)).unwrap();
        std::fs::remove_file(dir.path().join("masks/00001.png")).unwrap();
        let err = load_sequence(
            &dir.path().join("frames"),
            Some(&dir.path().join("masks")),
            None,
        )
        .unwrap_err();
        match err {
            Error::MissingFile(p) => assert!(p.to_string_lossy().contains("00001")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn loader_resizes_to_the_configured_square() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("frames")).unwrap();
        for i in 0..2 {
            let buf = image::RgbImage::from_fn(854, 480, |x, y| {
                image::Rgb([(x % 256) as u8, (y % 256) as u8, 128])
            });
            buf.save(dir.path().join(format!("frames/{i:05}.png"))).unwrap();
        }
        let loaded = load_sequence(&dir.path().join("frames"), None, Some(256)).unwrap();
        for f in &loaded.frames {
            assert_eq!((f.height(), f.width()), (256, 256));
        }
    }
}
