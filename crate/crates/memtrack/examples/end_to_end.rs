//! The whole pipeline in one sitting, at a micro budget: synthesize a
//! corpus, train the toy encoder for a few hundred steps, propagate a mask
//! through a held-out panning sequence, and score it.
//!
//!     cargo run --release --example end_to_end

use memtrack::data::{generate, preset_corpus, preset_translation};
use memtrack::encoder::align_sample_mask;
use memtrack::metrics::{contour_accuracy, default_tolerance, region_similarity};
use memtrack::propagation::{propagate_sequence, PropagationConfig};
use memtrack::train::{train, RunConfig, TrainDataset};
use memtrack::load_checkpoint;

fn main() -> memtrack::Result<()> {
    let out = std::env::temp_dir().join("memtrack_end_to_end");
    let cfg = RunConfig {
        phase1_steps: 300,
        phase2_steps: 30,
        batch_size: 4,
        frame_size: 0,
        ..Default::default()
    };

    println!("generating a 8-sequence synthetic corpus ...");
    let corpus: Vec<_> = preset_corpus(0, 8)
        .iter()
        .map(|s| generate(s).map(|q| q.frames))
        .collect::<memtrack::Result<_>>()?;
    let dataset = TrainDataset::from_frame_lists(&corpus, &cfg)?;

    println!("training {} + {} steps (a couple of minutes) ...", cfg.phase1_steps, cfg.phase2_steps);
    let report = train(&cfg, &dataset, &out)?;
    let first = report.loss_rows.first().map(|r| r.loss).unwrap_or_default();
    let last = report.loss_rows.last().map(|r| r.loss).unwrap_or_default();
    println!("reconstruction loss: {first:.4} -> {last:.4}");

    let (encoder, _) = load_checkpoint(&report.checkpoint)?;
    let seq = generate(&preset_translation(1000))?;
    let result = propagate_sequence(&encoder, &seq.frames, &seq.masks[0], &PropagationConfig::default())?;

    let tol = default_tolerance(seq.frames[0].height(), seq.frames[0].width());
    println!("\nheld-out panning sequence, per-frame scores:");
    for t in 1..seq.frames.len() {
        let j = region_similarity(&result.masks[t], &seq.masks[t], 1)?;
        let f = contour_accuracy(&result.masks[t], &seq.masks[t], 1, tol)?;
        let cells = align_sample_mask(&seq.masks[t], 4)?;
        let jc = region_similarity(&result.cell_masks[t], &cells, 1)?;
        println!("  frame {t}: J {j:.3}  F {f:.3}  (feature-grid J {jc:.3})");
    }
    println!("\nartifacts in {}", out.display());
    Ok(())
}
