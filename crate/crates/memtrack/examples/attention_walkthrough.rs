//! One query pixel through the two-stage correspondence core, step by step:
//! dilated window gathering, similarity heatmap, soft-argmax localization,
//! bilinear key resampling, joint affinity, value copy.
//!
//!     cargo run --example attention_walkthrough

use memtrack::attention::{
    copy, fine_affinity, heatmap, im2col_dilated, localize, resample_key, soft_argmax, WindowSpec,
};
use memtrack::encoder::FeatureMap;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    FeatureMap {
        values: Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0)),
        stride: 4,
    }
}

fn main() -> memtrack::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (c, h, w) = (8usize, 10usize, 10usize);
    let mut reference = random_map(c, h, w, &mut rng);

    // Plant a strong match four cells to the right of the query position (on
    // the dilation-2 site grid) so the localization stage has something to find.
    let query: Vec<f64> = (0..c).map(|i| (i as f64 * 0.7).sin()).collect();
    for ch in 0..c {
        reference.values[[ch, 5, 9]] = query[ch] * 4.0;
    }
    let q = Array1::from(query.clone());
    let query_pos = (5i64, 5i64);

    let spec = WindowSpec::new(3, 2)?; // radius 3, dilation 2
    let window = im2col_dilated(&reference, query_pos, &spec)?;
    let masked = window.masked.iter().filter(|&&m| m).count();
    println!("gathered {} sites at dilation 2 ({} masked as out of bounds)", spec.sites(), masked);

    let hm = heatmap(q.view(), &window)?;
    let peak = hm.weights.iter().cloned().fold(f64::MIN, f64::max);
    println!("heatmap: peak weight {peak:.3}, total {:.3}", hm.weights.sum());

    let center = soft_argmax(&hm);
    println!("soft-argmax center: ({:.2}, {:.2})  -- planted match sits at (9, 5)", center.0, center.1);

    let patch = resample_key(&reference, center, 1)?;
    println!("resampled a {}x{} key patch around the center", patch.shape()[0], patch.shape()[1]);

    // The same thing in one call, per memory frame:
    let roi = localize(q.view(), query_pos, &reference, &spec, 1, 0)?;
    assert_eq!(roi.keys, patch);

    // Joint affinity across two memory frames, then a value copy.
    let second = random_map(c, h, w, &mut rng);
    let roi2 = localize(q.view(), query_pos, &second, &WindowSpec::new(3, 1)?, 1, 1)?;
    let mut candidates = Array2::zeros((18, c));
    candidates.slice_mut(ndarray::s![..9, ..]).assign(&roi.keys);
    candidates.slice_mut(ndarray::s![9.., ..]).assign(&roi2.keys);
    let affinity = fine_affinity(q.view(), candidates.view())?;
    let frame0_mass: f64 = affinity.iter().take(9).sum();
    println!("joint affinity: frame 0 holds {:.1}% of the mass", 100.0 * frame0_mass);

    let values = Array2::from_shape_fn((18, 3), |(i, d)| ((i * 3 + d) as f64 * 0.21).cos());
    let reconstructed = copy(affinity.view(), values.view())?;
    println!("copied value: [{:.3}, {:.3}, {:.3}]", reconstructed[0], reconstructed[1], reconstructed[2]);
    Ok(())
}
