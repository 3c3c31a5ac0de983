//! Train the toy encoder for a short run and watch the two-phase schedule:
//! pair reconstruction first, then multi-frame fine-tuning at a small
//! learning rate.
//!
//!     cargo run --release --example train_encoder

use memtrack::data::{generate, preset_corpus};
use memtrack::train::{train, RunConfig, TrainDataset};

fn main() -> memtrack::Result<()> {
    let cfg = RunConfig {
        phase1_steps: 200,
        phase2_steps: 20,
        batch_size: 4,
        frame_size: 0,
        ..Default::default()
    };
    let corpus: Vec<_> = preset_corpus(0, 8)
        .iter()
        .map(|s| generate(s).map(|q| q.frames))
        .collect::<memtrack::Result<_>>()?;
    let dataset = TrainDataset::from_frame_lists(&corpus, &cfg)?;
    let out = std::env::temp_dir().join("memtrack_train_demo");
    let report = train(&cfg, &dataset, &out)?;

    println!("step  phase  lr         loss");
    for row in report.loss_rows.iter().step_by(20) {
        println!("{:>4}  {:>5}  {:<9.2e}  {:.5}", row.step, row.phase, row.lr, row.loss);
    }
    if let Some(last) = report.loss_rows.last() {
        println!("{:>4}  {:>5}  {:<9.2e}  {:.5}", last.step, last.phase, last.lr, last.loss);
    }
    println!("\ncheckpoints:");
    println!("  after phase 1: {}", report.phase1_checkpoint.display());
    println!("  final:         {}", report.checkpoint.display());
    println!("loss log: {}", out.join("loss.csv").display());
    Ok(())
}
