//! The correspondence core: dilated-window gathering, similarity heatmaps,
//! soft-argmax ROI localization, bilinear key resampling, and the joint
//! affinity used for copying.
//!
//! Coordinate convention: window centers and site coordinates are `(x, y)`
//! in feature cells; array indexing is `[y][x]` (row, column). Dot products
//! use raw features with temperature 1.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};

/// Restricted-attention window: `(2 * radius + 1)^2` sites at `dilation` spacing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub radius: usize,
    pub dilation: usize,
}

impl WindowSpec {
    pub fn new(radius: usize, dilation: usize) -> Result<Self> {
        if dilation < 1 {
            return Err(Error::invalid("window dilation must be >= 1"));
        }
        Ok(WindowSpec { radius, dilation })
    }

    pub fn sites(&self) -> usize {
        let n = 2 * self.radius + 1;
        n * n
    }
}

/// Key vectors gathered over a dilated window, row-major over `(dy, dx)`.
///
/// Out-of-bounds sites hold a zero key, are flagged in `masked`, and report
/// their clamped `(x, y)` coordinate.
#[derive(Debug, Clone)]
pub struct WindowKeys {
    pub keys: Array2<f64>,
    pub coords: Vec<(f64, f64)>,
    pub masked: Vec<bool>,
}

/// Softmax similarity weights over a window, paired with the site coordinates.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub weights: Array1<f64>,
    pub coords: Vec<(f64, f64)>,
}

/// A localized window: soft-argmax center plus the resampled key patch.
#[derive(Debug, Clone)]
pub struct RoiWindow {
    pub center: (f64, f64),
    pub frame_index: usize,
    pub radius: usize,
    pub keys: Array2<f64>,
}

/// Gather the `(2r+1)^2` key vectors at `center + dilation * (dx, dy)`.
pub fn im2col_dilated(fm: &FeatureMap, center: (i64, i64), spec: &WindowSpec) -> Result<WindowKeys> {
    let (c, h, w) = (fm.channels() as i64, fm.height() as i64, fm.width() as i64);
    let (cx, cy) = center;
    if cx < 0 || cy < 0 || cx >= w || cy >= h {
        return Err(Error::invalid(format!(
            "window center ({cx}, {cy}) outside the {w}x{h} feature grid"
        )));
    }
    let r = spec.radius as i64;
    let g = spec.dilation as i64;
    let n = spec.sites();
    let mut keys = Array2::zeros((n, c as usize));
    let mut coords = Vec::with_capacity(n);
    let mut masked = Vec::with_capacity(n);
    let mut s = 0usize;
    for dy in -r..=r {
        for dx in -r..=r {
            let x = cx + g * dx;
            let y = cy + g * dy;
            let inside = x >= 0 && y >= 0 && x < w && y < h;
            coords.push((x.clamp(0, w - 1) as f64, y.clamp(0, h - 1) as f64));
            masked.push(!inside);
            if inside {
                for ch in 0..c as usize {
                    keys[[s, ch]] = fm.values[[ch, y as usize, x as usize]];
                }
            }
            s += 1;
        }
    }
    Ok(WindowKeys { keys, coords, masked })
}

/// Numerically stable softmax over unmasked logits; masked entries get
/// exactly zero weight. Errors when every entry is masked.
pub(crate) fn masked_softmax(logits: &[f64], masked: &[bool]) -> Result<Vec<f64>> {
    let mut max = f64::NEG_INFINITY;
    for (l, &m) in logits.iter().zip(masked) {
        if !m && *l > max {
            max = *l;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyCandidates);
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for i in 0..logits.len() {
        if !masked[i] {
            let e = (logits[i] - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// d(loss)/d(logits) for `weights = softmax(logits)` given d(loss)/d(weights).
pub(crate) fn softmax_backward(weights: &[f64], d_weights: &[f64], d_logits: &mut [f64]) {
    let inner: f64 = weights.iter().zip(d_weights).map(|(w, d)| w * d).sum();
    for i in 0..weights.len() {
        d_logits[i] = weights[i] * (d_weights[i] - inner);
    }
}

/// Similarity heatmap between a query vector and a gathered window.
pub fn heatmap(query: ArrayView1<f64>, window: &WindowKeys) -> Result<Heatmap> {
    if query.len() != window.keys.shape()[1] {
        return Err(Error::shape(format!(
            "query has {} channels, keys have {}",
            query.len(),
            window.keys.shape()[1]
        )));
    }
    let logits: Vec<f64> = window.keys.rows().into_iter().map(|k| k.dot(&query)).collect();
    let weights = masked_softmax(&logits, &window.masked)?;
    Ok(Heatmap { weights: Array1::from(weights), coords: window.coords.clone() })
}

/// Expected `(x, y)` coordinate under the heatmap.
pub fn soft_argmax(hm: &Heatmap) -> (f64, f64) {
    let mut px = 0.0;
    let mut py = 0.0;
    for (w, (x, y)) in hm.weights.iter().zip(&hm.coords) {
        px += w * x;
        py += w * y;
    }
    (px, py)
}

/// Bilinearly resample a `(2r+1)^2` patch of key vectors at unit spacing
/// around a real-valued center, clamping sample coordinates to the grid.
pub fn resample_key(fm: &FeatureMap, center: (f64, f64), radius: usize) -> Result<Array2<f64>> {
    if !center.0.is_finite() || !center.1.is_finite() {
        return Err(Error::invalid("resample center must be finite"));
    }
    let hwc = fm.to_hwc();
    let n = 2 * radius + 1;
    let mut out = Array2::zeros((n * n, fm.channels()));
    bilinear_patch(&hwc.view(), center, radius, &mut out);
    Ok(out)
}

/// Joint softmax over all candidate keys pooled across memory frames.
pub fn fine_affinity(query: ArrayView1<f64>, candidates: ArrayView2<f64>) -> Result<Array1<f64>> {
    if candidates.shape()[0] == 0 {
        return Err(Error::EmptyCandidates);
    }
    if query.len() != candidates.shape()[1] {
        return Err(Error::shape(format!(
            "query has {} channels, candidates have {}",
            query.len(),
            candidates.shape()[1]
        )));
    }
    let logits: Vec<f64> = candidates.rows().into_iter().map(|k| k.dot(&query)).collect();
    let masked = vec![false; logits.len()];
    Ok(Array1::from(masked_softmax(&logits, &masked)?))
}

/// Affinity-weighted sum of candidate values: `sum_j A_j * V_j`.
pub fn copy(affinity: ArrayView1<f64>, values: ArrayView2<f64>) -> Result<Array1<f64>> {
    if affinity.len() != values.shape()[0] {
        return Err(Error::shape(format!(
            "{} affinity weights for {} value rows",
            affinity.len(),
            values.shape()[0]
        )));
    }
    Ok(values.t().dot(&affinity))
}

/// Localize the ROI in one memory frame for a single query: dilated-window
/// heatmap, soft-argmax center, bilinearly resampled key patch.
pub fn localize(
    query: ArrayView1<f64>,
    query_pos: (i64, i64),
    fm: &FeatureMap,
    window: &WindowSpec,
    fine_radius: usize,
    frame_index: usize,
) -> Result<RoiWindow> {
    let gathered = im2col_dilated(fm, query_pos, window)?;
    let hm = heatmap(query, &gathered)?;
    let center = clamp_center(soft_argmax(&hm), fm.width(), fm.height());
    let keys = resample_key(fm, center, fine_radius)?;
    Ok(RoiWindow { center, frame_index, radius: fine_radius, keys })
}

pub(crate) fn clamp_center(p: (f64, f64), w: usize, h: usize) -> (f64, f64) {
    (p.0.clamp(0.0, (w - 1) as f64), p.1.clamp(0.0, (h - 1) as f64))
}

// ---------------------------------------------------------------------------
// Bilinear patch sampling over [h, w, C] maps.
// ---------------------------------------------------------------------------

struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
    gate: f64,
}

fn tap(coord: f64, len: usize) -> Tap {
    if len == 1 {
        return Tap { i0: 0, i1: 0, frac: 0.0, gate: 0.0 };
    }
    let hi = (len - 1) as f64;
    let c = coord.clamp(0.0, hi);
    let mut i0 = c.floor() as usize;
    if i0 > len - 2 {
        i0 = len - 2;
    }
    let frac = c - i0 as f64;
    let gate = if coord > 0.0 && coord < hi { 1.0 } else { 0.0 };
    Tap { i0, i1: i0 + 1, frac, gate }
}

/// Sample a `(2r+1)^2 x C` patch at unit spacing around `center` from an
/// `[h, w, C]` map, writing rows in row-major `(dy, dx)` order.
pub(crate) fn bilinear_patch(map: &ArrayView3<f64>, center: (f64, f64), radius: usize, out: &mut Array2<f64>) {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let n = 2 * radius + 1;
    debug_assert_eq!(out.shape(), &[n * n, c]);
    let (cx, cy) = center;
    let r = radius as f64;
    let interior = cx - r >= 0.0
        && cx + r <= (w - 1) as f64 - 1e-9
        && cy - r >= 0.0
        && cy + r <= (h - 1) as f64 - 1e-9;
    if interior {
        // Shared fractional offsets: lerp rows in y, then columns in x.
        let x0 = (cx - r).floor() as usize;
        let y0 = (cy - r).floor() as usize;
        let fx = cx - r - x0 as f64;
        let fy = cy - r - y0 as f64;
        let ms = map.as_slice().expect("standard layout");
        let out_s = out.as_slice_mut().expect("standard layout");
        let mut ylerp = vec![0.0f64; (n + 1) * c];
        for i in 0..n {
            let row0 = &ms[((y0 + i) * w + x0) * c..((y0 + i) * w + x0 + n + 1) * c];
            let row1 = &ms[((y0 + i + 1) * w + x0) * c..((y0 + i + 1) * w + x0 + n + 1) * c];
            for k in 0..(n + 1) * c {
                ylerp[k] = (1.0 - fy) * row0[k] + fy * row1[k];
            }
            let out_row = &mut out_s[i * n * c..(i + 1) * n * c];
            for j in 0..n {
                let a = &ylerp[j * c..(j + 1) * c];
                let b = &ylerp[(j + 1) * c..(j + 2) * c];
                let o = &mut out_row[j * c..(j + 1) * c];
                for ch in 0..c {
                    o[ch] = (1.0 - fx) * a[ch] + fx * b[ch];
                }
            }
        }
    } else {
        for (s, mut row) in out.rows_mut().into_iter().enumerate() {
            let dy = (s / n) as f64 - r;
            let dx = (s % n) as f64 - r;
            let tx = tap(cx + dx, w);
            let ty = tap(cy + dy, h);
            for ch in 0..c {
                let v00 = map[[ty.i0, tx.i0, ch]];
                let v01 = map[[ty.i0, tx.i1, ch]];
                let v10 = map[[ty.i1, tx.i0, ch]];
                let v11 = map[[ty.i1, tx.i1, ch]];
                row[ch] = (1.0 - ty.frac) * ((1.0 - tx.frac) * v00 + tx.frac * v01)
                    + ty.frac * ((1.0 - tx.frac) * v10 + tx.frac * v11);
            }
        }
    }
}

/// Backward of [`bilinear_patch`]: scatters `d_patch` into `d_map` (when
/// given) and returns the gradient with respect to the center coordinates.
pub(crate) fn bilinear_patch_backward(
    map: &ArrayView3<f64>,
    center: (f64, f64),
    radius: usize,
    d_patch: &ArrayView2<f64>,
    mut d_map: Option<&mut Array3<f64>>,
) -> (f64, f64) {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let n = 2 * radius + 1;
    let (cx, cy) = center;
    let r = radius as f64;
    let mut dcx = 0.0;
    let mut dcy = 0.0;
    for s in 0..n * n {
        let dy = (s / n) as f64 - r;
        let dx = (s % n) as f64 - r;
        let tx = tap(cx + dx, w);
        let ty = tap(cy + dy, h);
        let drow = d_patch.row(s);
        for ch in 0..c {
            let g = drow[ch];
            if g == 0.0 {
                continue;
            }
            let v00 = map[[ty.i0, tx.i0, ch]];
            let v01 = map[[ty.i0, tx.i1, ch]];
            let v10 = map[[ty.i1, tx.i0, ch]];
            let v11 = map[[ty.i1, tx.i1, ch]];
            dcx += g * tx.gate * ((1.0 - ty.frac) * (v01 - v00) + ty.frac * (v11 - v10));
            dcy += g * ty.gate * ((1.0 - tx.frac) * (v10 - v00) + tx.frac * (v11 - v01));
            if let Some(dm) = d_map.as_deref_mut() {
                dm[[ty.i0, tx.i0, ch]] += g * (1.0 - ty.frac) * (1.0 - tx.frac);
                dm[[ty.i0, tx.i1, ch]] += g * (1.0 - ty.frac) * tx.frac;
                dm[[ty.i1, tx.i0, ch]] += g * ty.frac * (1.0 - tx.frac);
                dm[[ty.i1, tx.i1, ch]] += g * ty.frac * tx.frac;
            }
        }
    }
    (dcx, dcy)
}

// ---------------------------------------------------------------------------
// The full two-stage chain for one query pixel, with a hand-derived backward
// pass. Training and propagation both run through this path.
// ---------------------------------------------------------------------------

/// One memory frame's payload in `[h, w, channels]` layout.
pub(crate) struct FramePayload<'a> {
    pub key_hwc: &'a Array3<f64>,
    pub value_hwc: &'a Array3<f64>,
    pub dilation: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ChainConfig {
    pub coarse_radius: usize,
    pub fine_radius: usize,
}

/// Per-query intermediate state kept for the backward pass.
pub(crate) struct ChainState {
    pub coarse_weights: Vec<Vec<f64>>,
    pub coarse_coords: Vec<Vec<(f64, f64)>>,
    pub coarse_masked: Vec<Vec<bool>>,
    pub centers: Vec<(f64, f64)>,
    pub center_gates: Vec<(f64, f64)>,
    pub key_patches: Vec<Array2<f64>>,
    pub value_patches: Vec<Array2<f64>>,
    pub affinity: Vec<f64>,
    pub recon: Vec<f64>,
}

fn coarse_stage(
    query: &[f64],
    query_pos: (i64, i64),
    frame: &FramePayload<'_>,
    radius: usize,
) -> Result<(Vec<f64>, Vec<(f64, f64)>, Vec<bool>)> {
    let (h, w, c) = (
        frame.key_hwc.shape()[0] as i64,
        frame.key_hwc.shape()[1] as i64,
        frame.key_hwc.shape()[2],
    );
    let r = radius as i64;
    let g = frame.dilation as i64;
    let n = (2 * radius + 1) * (2 * radius + 1);
    let mut logits = vec![0.0; n];
    let mut coords = Vec::with_capacity(n);
    let mut masked = Vec::with_capacity(n);
    let ks = frame.key_hwc.as_slice().expect("standard layout");
    let mut s = 0usize;
    for dy in -r..=r {
        for dx in -r..=r {
            let x = query_pos.0 + g * dx;
            let y = query_pos.1 + g * dy;
            let inside = x >= 0 && y >= 0 && x < w && y < h;
            coords.push((x.clamp(0, w - 1) as f64, y.clamp(0, h - 1) as f64));
            masked.push(!inside);
            if inside {
                let base = (y as usize * w as usize + x as usize) * c;
                let key = &ks[base..base + c];
                logits[s] = key.iter().zip(query).map(|(a, b)| a * b).sum();
            }
            s += 1;
        }
    }
    let weights = masked_softmax(&logits, &masked)?;
    Ok((weights, coords, masked))
}

/// Forward pass: localize in every memory frame, resample keys and values,
/// take a joint softmax over all candidates, and copy values.
pub(crate) fn chain_forward(
    query: &[f64],
    query_pos: (i64, i64),
    frames: &[FramePayload<'_>],
    cfg: &ChainConfig,
) -> Result<ChainState> {
    if frames.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let c = query.len();
    let d = frames[0].value_hwc.shape()[2];
    let nf = 2 * cfg.fine_radius + 1;
    let sites = nf * nf;

    let mut state = ChainState {
        coarse_weights: Vec::with_capacity(frames.len()),
        coarse_coords: Vec::with_capacity(frames.len()),
        coarse_masked: Vec::with_capacity(frames.len()),
        centers: Vec::with_capacity(frames.len()),
        center_gates: Vec::with_capacity(frames.len()),
        key_patches: Vec::with_capacity(frames.len()),
        value_patches: Vec::with_capacity(frames.len()),
        affinity: vec![0.0; frames.len() * sites],
        recon: vec![0.0; d],
    };

    let mut logits = vec![0.0; frames.len() * sites];
    for (f, frame) in frames.iter().enumerate() {
        let (h, w) = (frame.key_hwc.shape()[0], frame.key_hwc.shape()[1]);
        let (weights, coords, masked) = coarse_stage(query, query_pos, frame, cfg.coarse_radius)?;
        let mut px = 0.0;
        let mut py = 0.0;
        for (wt, (x, y)) in weights.iter().zip(&coords) {
            px += wt * x;
            py += wt * y;
        }
        let center = clamp_center((px, py), w, h);
        let gates = (
            if px > 0.0 && px < (w - 1) as f64 { 1.0 } else { 0.0 },
            if py > 0.0 && py < (h - 1) as f64 { 1.0 } else { 0.0 },
        );
        let mut keys = Array2::zeros((sites, c));
        bilinear_patch(&frame.key_hwc.view(), center, cfg.fine_radius, &mut keys);
        let mut values = Array2::zeros((sites, d));
        bilinear_patch(&frame.value_hwc.view(), center, cfg.fine_radius, &mut values);
        for (s, key) in keys.rows().into_iter().enumerate() {
            logits[f * sites + s] = key.iter().zip(query).map(|(a, b)| a * b).sum();
        }
        state.coarse_weights.push(weights);
        state.coarse_coords.push(coords);
        state.coarse_masked.push(masked);
        state.centers.push(center);
        state.center_gates.push(gates);
        state.key_patches.push(keys);
        state.value_patches.push(values);
    }

    let masked = vec![false; logits.len()];
    state.affinity = masked_softmax(&logits, &masked)?;
    for (f, values) in state.value_patches.iter().enumerate() {
        for (s, row) in values.rows().into_iter().enumerate() {
            let a = state.affinity[f * sites + s];
            for (o, v) in state.recon.iter_mut().zip(row) {
                *o += a * v;
            }
        }
    }
    Ok(state)
}

/// Backward pass for [`chain_forward`]. Accumulates into `d_query` and into
/// the per-frame key-map gradients. Value maps are treated as data (their
/// spatial derivative still feeds the localization gradient).
pub(crate) fn chain_backward(
    query: &[f64],
    query_pos: (i64, i64),
    frames: &[FramePayload<'_>],
    cfg: &ChainConfig,
    state: &ChainState,
    d_recon: &[f64],
    d_query: &mut [f64],
    d_keys: &mut [Array3<f64>],
) {
    let c = query.len();
    let nf = 2 * cfg.fine_radius + 1;
    let sites = nf * nf;
    let total = frames.len() * sites;

    // copy backward
    let mut d_aff = vec![0.0; total];
    for (f, values) in state.value_patches.iter().enumerate() {
        for (s, row) in values.rows().into_iter().enumerate() {
            d_aff[f * sites + s] = row.iter().zip(d_recon).map(|(v, g)| v * g).sum();
        }
    }
    // joint softmax backward
    let mut d_logits = vec![0.0; total];
    softmax_backward(&state.affinity, &d_aff, &mut d_logits);

    for (f, frame) in frames.iter().enumerate() {
        let keys = &state.key_patches[f];
        let mut d_key_patch = Array2::<f64>::zeros((sites, c));
        let d_val_patch = {
            let dv = frames[f].value_hwc.shape()[2];
            let mut m = Array2::<f64>::zeros((sites, dv));
            for s in 0..sites {
                let a = state.affinity[f * sites + s];
                for ch in 0..dv {
                    m[[s, ch]] = a * d_recon[ch];
                }
            }
            m
        };
        for s in 0..sites {
            let dl = d_logits[f * sites + s];
            if dl != 0.0 {
                for ch in 0..c {
                    d_query[ch] += dl * keys[[s, ch]];
                    d_key_patch[[s, ch]] = dl * query[ch];
                }
            }
        }
        // resample backward: key patch scatters into the key map and both
        // patches contribute to the window-center gradient.
        let (dcx_k, dcy_k) = bilinear_patch_backward(
            &frame.key_hwc.view(),
            state.centers[f],
            cfg.fine_radius,
            &d_key_patch.view(),
            Some(&mut d_keys[f]),
        );
        let (dcx_v, dcy_v) = bilinear_patch_backward(
            &frame.value_hwc.view(),
            state.centers[f],
            cfg.fine_radius,
            &d_val_patch.view(),
            None,
        );
        let dpx = (dcx_k + dcx_v) * state.center_gates[f].0;
        let dpy = (dcy_k + dcy_v) * state.center_gates[f].1;

        // soft-argmax backward
        let weights = &state.coarse_weights[f];
        let coords = &state.coarse_coords[f];
        let masked = &state.coarse_masked[f];
        let n = weights.len();
        let mut d_hm = vec![0.0; n];
        for s in 0..n {
            d_hm[s] = dpx * coords[s].0 + dpy * coords[s].1;
        }
        let mut d_clogits = vec![0.0; n];
        softmax_backward(weights, &d_hm, &mut d_clogits);

        // coarse logits backward into query and the key map at dilated sites
        let (h, w) = (frame.key_hwc.shape()[0] as i64, frame.key_hwc.shape()[1] as i64);
        let r = cfg.coarse_radius as i64;
        let g = frame.dilation as i64;
        let mut s = 0usize;
        for dy in -r..=r {
            for dx in -r..=r {
                if !masked[s] {
                    let dl = d_clogits[s];
                    if dl != 0.0 {
                        let x = (query_pos.0 + g * dx) as usize;
                        let y = (query_pos.1 + g * dy) as usize;
                        debug_assert!((x as i64) < w && (y as i64) < h);
                        for ch in 0..c {
                            d_query[ch] += dl * frame.key_hwc[[y, x, ch]];
                            d_keys[f][[y, x, ch]] += dl * query[ch];
                        }
                    }
                }
                s += 1;
            }
        }
    }
}

/// Numerical self-check of the two-stage chain (heatmap, soft-argmax,
/// resampling, joint affinity, copy): differentiates a projected copy output
/// with respect to a random query on a seeded two-frame instance and compares
/// against central finite differences at `coords` random coordinates.
/// Returns the number of coordinates checked; errors on the first mismatch
/// beyond `tol` relative.
pub fn chain_gradient_probe(seed: u64, coords: usize, tol: f64) -> Result<usize> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let c = 32usize;
    let mk = |rng: &mut rand_chacha::ChaCha8Rng, d: usize| {
        Array3::from_shape_fn((9, 9, d), |_| rng.gen_range(-1.0..1.0))
    };
    let key1 = mk(&mut rng, c);
    let val1 = mk(&mut rng, 3);
    let key2 = mk(&mut rng, c);
    let val2 = mk(&mut rng, 3);
    let query: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let proj: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cfg = ChainConfig { coarse_radius: 2, fine_radius: 2 };

    let loss = |q: &[f64]| -> Result<f64> {
        let frames = [
            FramePayload { key_hwc: &key1, value_hwc: &val1, dilation: 1 },
            FramePayload { key_hwc: &key2, value_hwc: &val2, dilation: 2 },
        ];
        let state = chain_forward(q, (4, 4), &frames, &cfg)?;
        Ok(state.recon.iter().zip(&proj).map(|(r, p)| r * p).sum())
    };
    let frames = [
        FramePayload { key_hwc: &key1, value_hwc: &val1, dilation: 1 },
        FramePayload { key_hwc: &key2, value_hwc: &val2, dilation: 2 },
    ];
    let state = chain_forward(&query, (4, 4), &frames, &cfg)?;
    let mut d_query = vec![0.0; c];
    let mut d_keys = vec![Array3::zeros((9, 9, c)), Array3::zeros((9, 9, c))];
    chain_backward(&query, (4, 4), &frames, &cfg, &state, &proj, &mut d_query, &mut d_keys);

    let h = 1e-6;
    for k in 0..coords {
        let i = (k * 7 + rng.gen_range(0..c)) % c;
        let mut qp = query.clone();
        qp[i] += h;
        let mut qm = query.clone();
        qm[i] -= h;
        let fd = (loss(&qp)? - loss(&qm)?) / (2.0 * h);
        if (d_query[i] - fd).abs() > tol * d_query[i].abs().max(fd.abs()) + 1e-8 {
            return Err(Error::invalid(format!(
                "chain gradient mismatch at query[{i}]: analytic {}, finite difference {fd}",
                d_query[i]
            )));
        }
    }
    Ok(coords)
}
