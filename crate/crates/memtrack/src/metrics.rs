//! Evaluation: region similarity (J), contour accuracy (F), per-sequence and
//! aggregate means, and the seen/unseen generalization gap.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mask IoU for one object id. Both-empty pairs score 1 by convention.
pub fn region_similarity(pred: &Array2<u8>, gt: &Array2<u8>, object_id: u8) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!("pred {:?} vs gt {:?}", pred.dim(), gt.dim())));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let p = p == object_id;
        let g = g == object_id;
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

fn binary(mask: &Array2<u8>, object_id: u8) -> Array2<bool> {
    mask.mapv(|v| v == object_id)
}

/// 4-connectivity boundary: object pixels with a non-object 4-neighbor
/// (pixels on the image border count their missing neighbors as non-object).
fn boundary(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if !mask[[y, x]] {
            return false;
        }
        let neighbors = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        neighbors.iter().any(|&(ny, nx)| ny >= h || nx >= w || !mask[[ny, nx]])
    })
}

// Sentinel for "no source pixel"; larger than any reachable squared distance.
const FAR: f64 = 1e12;

/// 1D squared-distance lower envelope (Felzenszwalb-Huttenlocher). Inputs are
/// finite parabola heights (`FAR` marks empty sources).
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sect = |p: usize, q: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = sect(v[k], q);
        while s <= z[k] {
            k -= 1;
            s = sect(v[k], q);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance to the nearest `true` pixel. Pixels in
/// source-free images report `>= FAR`.
fn squared_distance_transform(mask: &Array2<bool>) -> Array2<f64> {
    let (h, w) = mask.dim();
    // Row pass: squared distance to the nearest source within the row.
    let mut d = Array2::from_elem((h, w), FAR);
    for y in 0..h {
        let mut last: Option<usize> = None;
        for x in 0..w {
            if mask[[y, x]] {
                last = Some(x);
            }
            if let Some(l) = last {
                let dx = (x - l) as f64;
                d[[y, x]] = dx * dx;
            }
        }
        last = None;
        for x in (0..w).rev() {
            if mask[[y, x]] {
                last = Some(x);
            }
            if let Some(l) = last {
                let dx = (l - x) as f64;
                d[[y, x]] = d[[y, x]].min(dx * dx);
            }
        }
    }
    // Column pass: lower envelope over the row results.
    let mut buf_in = vec![0.0f64; h];
    let mut buf_out = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            buf_in[y] = d[[y, x]];
        }
        dt_1d(&buf_in, &mut buf_out);
        for y in 0..h {
            d[[y, x]] = buf_out[y];
        }
    }
    d
}

/// Boundary F-measure: precision/recall of boundary pixels within
/// `tolerance_px` (Euclidean) of the other mask's boundary.
pub fn contour_accuracy(
    pred: &Array2<u8>,
    gt: &Array2<u8>,
    object_id: u8,
    tolerance_px: f64,
) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!("pred {:?} vs gt {:?}", pred.dim(), gt.dim())));
    }
    let bp = boundary(&binary(pred, object_id));
    let bg = boundary(&binary(gt, object_id));
    let np = bp.iter().filter(|&&v| v).count();
    let ng = bg.iter().filter(|&&v| v).count();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let tol2 = tolerance_px * tolerance_px;
    let dg = squared_distance_transform(&bg);
    let dp = squared_distance_transform(&bp);
    let hit_p = bp
        .indexed_iter()
        .filter(|&((y, x), &v)| v && dg[[y, x]] <= tol2 + 1e-9)
        .count();
    let hit_g = bg
        .indexed_iter()
        .filter(|&((y, x), &v)| v && dp[[y, x]] <= tol2 + 1e-9)
        .count();
    let precision = hit_p as f64 / np as f64;
    let recall = hit_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Default boundary tolerance: 0.8% of the image diagonal, rounded, at least 1.
pub fn default_tolerance(height: usize, width: usize) -> f64 {
    let diag = ((height * height + width * width) as f64).sqrt();
    (0.008 * diag).round().max(1.0)
}

/// Mean of the seen-minus-unseen differences in J and F. All four inputs must
/// share a scale: either all in `[0, 1]` or all percentages.
pub fn generalization_gap(j_seen: f64, f_seen: f64, j_unseen: f64, f_unseen: f64) -> Result<f64> {
    let vals = [j_seen, f_seen, j_unseen, f_unseen];
    if vals.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 100.0) {
        return Err(Error::invalid("scores must lie in [0, 100]"));
    }
    let any_big = vals.iter().any(|&v| v > 1.0);
    let any_small = vals.iter().any(|&v| v < 1.0);
    if any_big && any_small {
        return Err(Error::invalid(
            "mixed scales: scores must be all in [0, 1] or all percentages",
        ));
    }
    Ok(((j_seen - j_unseen) + (f_seen - f_unseen)) / 2.0)
}

/// Per-object scores for one sequence; means exclude the first frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceScore {
    pub sequence: String,
    pub object: u8,
    pub j_mean: f64,
    pub f_mean: f64,
    pub j_per_frame: Vec<f64>,
    pub f_per_frame: Vec<f64>,
}

/// Seen/unseen aggregates with the generalization gap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitReport {
    pub j_seen: f64,
    pub f_seen: f64,
    pub j_unseen: f64,
    pub f_unseen: f64,
    pub gen_gap: f64,
}

/// Full evaluation output: per-object rows plus dataset aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Vec<SequenceScore>,
    pub j_overall: f64,
    pub f_overall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitReport>,
}

/// Score one sequence: every annotated frame after the first, every object id
/// present in the ground truth.
pub fn evaluate_sequence(
    sequence: &str,
    pred: &[Array2<u8>],
    gt: &[Array2<u8>],
    tolerance_px: f64,
) -> Result<Vec<SequenceScore>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "sequence `{sequence}`: {} predicted frames vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if gt.len() < 2 {
        return Err(Error::invalid(format!(
            "sequence `{sequence}` needs at least 2 frames to evaluate"
        )));
    }
    let mut ids: std::collections::BTreeSet<u8> = std::collections::BTreeSet::new();
    for m in gt {
        for &v in m.iter() {
            if v != 0 {
                ids.insert(v);
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::invalid(format!("sequence `{sequence}` has no annotated objects")));
    }
    let mut out = Vec::new();
    for id in ids {
        let mut j_per = Vec::new();
        let mut f_per = Vec::new();
        for t in 1..gt.len() {
            j_per.push(region_similarity(&pred[t], &gt[t], id)?);
            f_per.push(contour_accuracy(&pred[t], &gt[t], id, tolerance_px)?);
        }
        let j_mean = j_per.iter().sum::<f64>() / j_per.len() as f64;
        let f_mean = f_per.iter().sum::<f64>() / f_per.len() as f64;
        out.push(SequenceScore {
            sequence: sequence.to_string(),
            object: id,
            j_mean,
            f_mean,
            j_per_frame: j_per,
            f_per_frame: f_per,
        });
    }
    Ok(out)
}

/// Aggregate per-object scores: objects average into their sequence, then
/// sequences average into the dataset mean.
pub fn aggregate(scores: &[SequenceScore]) -> (f64, f64) {
    let mut by_seq: std::collections::BTreeMap<&str, (f64, f64, usize)> =
        std::collections::BTreeMap::new();
    for s in scores {
        let e = by_seq.entry(s.sequence.as_str()).or_insert((0.0, 0.0, 0));
        e.0 += s.j_mean;
        e.1 += s.f_mean;
        e.2 += 1;
    }
    if by_seq.is_empty() {
        return (0.0, 0.0);
    }
    let mut j = 0.0;
    let mut f = 0.0;
    for (_, (js, fs, n)) in &by_seq {
        j += js / *n as f64;
        f += fs / *n as f64;
    }
    (j / by_seq.len() as f64, f / by_seq.len() as f64)
}

/// Build the final report. `split` maps sequence name to `true` for seen,
/// `false` for unseen; the gap is emitted only when a split is provided.
pub fn build_report(
    scores: Vec<SequenceScore>,
    split: Option<&std::collections::BTreeMap<String, bool>>,
) -> Result<EvalReport> {
    let (j_overall, f_overall) = aggregate(&scores);
    let split_report = match split {
        None => None,
        Some(map) => {
            let mut seen = Vec::new();
            let mut unseen = Vec::new();
            for s in &scores {
                match map.get(&s.sequence) {
                    Some(true) => seen.push(s.clone()),
                    Some(false) => unseen.push(s.clone()),
                    None => {
                        return Err(Error::invalid(format!(
                            "sequence `{}` is missing from the split file",
                            s.sequence
                        )))
                    }
                }
            }
            let (j_s, f_s) = aggregate(&seen);
            let (j_u, f_u) = aggregate(&unseen);
            let gen_gap = generalization_gap(j_s, f_s, j_u, f_u)?;
            Some(SplitReport { j_seen: j_s, f_seen: f_s, j_unseen: j_u, f_unseen: f_u, gen_gap })
        }
    };
    Ok(EvalReport { scores, j_overall, f_overall, split: split_report })
}

impl EvalReport {
    /// CSV rows `sequence,object,J_mean,F_mean`, sorted for reproducibility.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<&SequenceScore> = self.scores.iter().collect();
        rows.sort_by(|a, b| (a.sequence.as_str(), a.object).cmp(&(b.sequence.as_str(), b.object)));
        let mut out = String::from("sequence,object,J_mean,F_mean\n");
        for s in rows {
            out.push_str(&format!("{},{},{:.6},{:.6}\n", s.sequence, s.object, s.j_mean, s.f_mean));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rect_mask(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> Array2<u8> {
        Array2::from_shape_fn((h, w), |(y, x)| {
            u8::from(y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw)
        })
    }

    #[test]
    fn region_fixtures() {
        let a = rect_mask(16, 16, 2, 2, 6, 6);
        assert_eq!(region_similarity(&a, &a, 1).unwrap(), 1.0);
        let b = rect_mask(16, 16, 10, 10, 4, 4);
        assert_eq!(region_similarity(&a, &b, 1).unwrap(), 0.0);
        // pred covers exactly the left half of gt, no false positives
        let gt = rect_mask(16, 16, 2, 2, 4, 8);
        let pred = rect_mask(16, 16, 2, 2, 4, 4);
        assert_eq!(region_similarity(&pred, &gt, 1).unwrap(), 0.5);
        // both empty
        let empty = Array2::<u8>::zeros((8, 8));
        assert_eq!(region_similarity(&empty, &empty, 1).unwrap(), 1.0);
    }

    #[test]
    fn region_shape_mismatch() {
        let a = Array2::<u8>::zeros((4, 4));
        let b = Array2::<u8>::zeros((4, 5));
        assert!(matches!(region_similarity(&a, &b, 1), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn contour_identical_masks() {
        let a = rect_mask(16, 16, 3, 4, 6, 5);
        assert_eq!(contour_accuracy(&a, &a, 1, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn contour_distant_boundaries_score_zero() {
        let a = rect_mask(32, 32, 1, 1, 4, 4);
        let b = rect_mask(32, 32, 20, 20, 4, 4);
        assert_eq!(contour_accuracy(&a, &b, 1, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn contour_shifted_square() {
        let a = rect_mask(32, 32, 8, 8, 8, 8);
        let b = rect_mask(32, 32, 8, 9, 8, 8); // shifted 1 px right
        assert_eq!(contour_accuracy(&a, &b, 1, 2.0).unwrap(), 1.0);
        assert!(contour_accuracy(&a, &b, 1, 0.0).unwrap() < 1.0);
    }

    #[test]
    fn contour_empty_conventions() {
        let empty = Array2::<u8>::zeros((8, 8));
        let full = rect_mask(8, 8, 2, 2, 3, 3);
        assert_eq!(contour_accuracy(&empty, &empty, 1, 1.0).unwrap(), 1.0);
        assert_eq!(contour_accuracy(&empty, &full, 1, 1.0).unwrap(), 0.0);
        assert_eq!(contour_accuracy(&full, &empty, 1, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn distance_transform_is_exact_on_a_point() {
        let mut m = Array2::from_elem((7, 9), false);
        m[[3, 4]] = true;
        let d = squared_distance_transform(&m);
        for y in 0..7 {
            for x in 0..9 {
                let expect = (y as f64 - 3.0).powi(2) + (x as f64 - 4.0).powi(2);
                assert_abs_diff_eq!(d[[y, x]], expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn gen_gap_paper_fixtures() {
        assert_abs_diff_eq!(
            generalization_gap(63.9, 64.9, 60.3, 67.7).unwrap(),
            0.4,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            generalization_gap(50.6, 46.6, 43.8, 45.6).unwrap(),
            3.9,
            epsilon = 1e-12
        );
        assert_eq!(generalization_gap(55.0, 60.0, 55.0, 60.0).unwrap(), 0.0);
    }

    #[test]
    fn gen_gap_rejects_mixed_scales() {
        assert!(generalization_gap(63.9, 0.649, 60.3, 67.7).is_err());
        assert!(generalization_gap(120.0, 50.0, 50.0, 50.0).is_err());
    }

    #[test]
    fn default_tolerance_matches_benchmark_convention() {
        assert_eq!(default_tolerance(480, 854), 8.0);
        assert_eq!(default_tolerance(64, 64), 1.0);
    }

    #[test]
    fn sequence_scoring_skips_first_frame() {
        let gt0 = rect_mask(16, 16, 2, 2, 4, 4);
        let gt1 = rect_mask(16, 16, 2, 3, 4, 4);
        let pred_bad0 = Array2::<u8>::zeros((16, 16)); // ignored: first frame
        let scores =
            evaluate_sequence("seq", &[pred_bad0, gt1.clone()], &[gt0, gt1], 2.0).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0].j_mean, 1.0);
        assert_eq!(scores[0].f_mean, 1.0);
    }

    #[test]
    fn report_includes_gap_only_with_split() {
        let gt0 = rect_mask(16, 16, 2, 2, 4, 4);
        let frames = vec![gt0.clone(), gt0.clone(), gt0];
        let s1 = evaluate_sequence("a", &frames, &frames, 1.0).unwrap();
        let s2 = evaluate_sequence("b", &frames, &frames, 1.0).unwrap();
        let mut all = s1;
        all.extend(s2);
        let plain = build_report(all.clone(), None).unwrap();
        assert!(plain.split.is_none());
        assert_eq!(plain.j_overall, 1.0);
        let mut split = std::collections::BTreeMap::new();
        split.insert("a".to_string(), true);
        split.insert("b".to_string(), false);
        let with = build_report(all, Some(&split)).unwrap();
        assert_eq!(with.split.unwrap().gen_gap, 0.0);
    }

    proptest! {
        #[test]
        fn j_and_f_are_symmetric(y0 in 0usize..10, x0 in 0usize..10, y1 in 0usize..10, x1 in 0usize..10) {
            let a = rect_mask(24, 24, y0, x0, 6, 5);
            let b = rect_mask(24, 24, y1, x1, 5, 7);
            prop_assert_eq!(
                region_similarity(&a, &b, 1).unwrap(),
                region_similarity(&b, &a, 1).unwrap()
            );
            let f_ab = contour_accuracy(&a, &b, 1, 2.0).unwrap();
            let f_ba = contour_accuracy(&b, &a, 1, 2.0).unwrap();
            prop_assert!((f_ab - f_ba).abs() < 1e-12);
        }

        #[test]
        fn j_invariant_to_other_labels(fill in 2u8..9) {
            // relabeling pixels outside the object's support does not change J
            let a = rect_mask(16, 16, 4, 4, 5, 5);
            let mut b = a.clone();
            for v in b.iter_mut() {
                if *v == 0 {
                    *v = fill;
                }
            }
            prop_assert_eq!(
                region_similarity(&a, &a, 1).unwrap(),
                region_similarity(&b, &a, 1).unwrap()
            );
        }

        #[test]
        fn gap_scales_linearly(c in 0.1f64..1.0) {
            let g1 = generalization_gap(60.0, 50.0, 40.0, 45.0).unwrap();
            let gc = generalization_gap(60.0 * c, 50.0 * c, 40.0 * c, 45.0 * c);
            // scaling can cross the unit boundary; only compare when valid
            if let Ok(gc) = gc {
                prop_assert!((gc - g1 * c).abs() < 1e-9);
            }
        }
    }
}
