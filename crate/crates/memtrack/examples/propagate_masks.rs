//! Mask propagation with different memory policies on an occlusion sequence:
//! the long-term anchor recovers the object after it reappears, while a
//! short-term-only bank loses it.
//!
//!     cargo run --release --example propagate_masks

use memtrack::data::{generate, preset_corpus, preset_occlusion};
use memtrack::metrics::region_similarity;
use memtrack::propagation::{propagate_sequence, PropagationConfig};
use memtrack::train::{train, RunConfig, TrainDataset};
use memtrack::{load_checkpoint, BankPolicy};

fn main() -> memtrack::Result<()> {
    let cfg = RunConfig {
        phase1_steps: 400,
        phase2_steps: 40,
        batch_size: 4,
        frame_size: 0,
        ..Default::default()
    };
    println!("training a small encoder ({} + {} steps) ...", cfg.phase1_steps, cfg.phase2_steps);
    let corpus: Vec<_> = preset_corpus(0, 8)
        .iter()
        .map(|s| generate(s).map(|q| q.frames))
        .collect::<memtrack::Result<_>>()?;
    let dataset = TrainDataset::from_frame_lists(&corpus, &cfg)?;
    let out = std::env::temp_dir().join("memtrack_propagate_demo");
    let report = train(&cfg, &dataset, &out)?;
    let (encoder, _) = load_checkpoint(&report.checkpoint)?;

    let seq = generate(&preset_occlusion(101))?;
    let (first, last) = seq.truth.occluded_frames.expect("occluder");
    println!("disk hidden during frames {first}..={last}, visible again afterwards\n");

    for (name, policy) in [
        ("long + short", BankPolicy::default()),
        ("only short", BankPolicy::only_short()),
        ("only long", BankPolicy::only_long()),
    ] {
        let cfg = PropagationConfig { policy, ..Default::default() };
        let result = propagate_sequence(&encoder, &seq.frames, &seq.masks[0], &cfg)?;
        print!("{name:>12}: J per frame ");
        for t in 1..seq.frames.len() {
            let j = region_similarity(&result.masks[t], &seq.masks[t], 1)?;
            let mark = if t >= first && t <= last { "*" } else { "" };
            print!("{j:.2}{mark} ");
        }
        println!();
    }
    println!("\n(* = frame inside the occlusion window; both masks are empty there,");
    println!(" so J is 1.0 by the both-empty convention when the tracker stays clean)");
    Ok(())
}
