//! Generate the synthetic datasets to disk in the same layout the CLI uses:
//! `<out>/seq_NNN/frames/*.png`, `<out>/seq_NNN/masks/*.png`, `truth.json`.
//!
//!     cargo run --example synthesize_dataset [out_dir]

use memtrack::cli::{run_synth, SynthArgs};

fn main() -> memtrack::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("memtrack_datasets"));
    for (preset, count, seed) in [
        ("corpus", 4usize, 0u64),
        ("translation", 2, 1000),
        ("occlusion", 2, 100),
        ("drift", 2, 500),
    ] {
        let dir = out.join(preset);
        run_synth(&SynthArgs {
            out: dir.clone(),
            spec: None,
            preset: Some(preset.into()),
            seed,
            count,
        })?;
        println!("{preset:>12}: {count} sequences -> {}", dir.display());
    }
    println!("\nsame thing via the binary, e.g.:");
    println!("  memtrack synth --preset occlusion --seed 100 --count 10 --out occl/");
    Ok(())
}
