//! Color conversions and the channel-dropout information bottleneck.
//!
//!     cargo run --example colorspace_bottleneck

use memtrack::colorspace::{apply_channel_dropout, convert, ColorSpace, DropoutSpec, Image};
use ndarray::Array3;

fn main() -> memtrack::Result<()> {
    let swatches = [
        ("black", [0.0, 0.0, 0.0]),
        ("white", [1.0, 1.0, 1.0]),
        ("mid gray", [0.5, 0.5, 0.5]),
        ("red", [1.0, 0.0, 0.0]),
        ("teal", [0.2, 0.6, 0.6]),
    ];
    println!("sRGB -> Lab (D65), raw channel values:");
    for (name, rgb) in swatches {
        let img = Image::from_raw(
            Array3::from_shape_fn((4, 4, 3), |(_, _, c)| rgb[c]),
            ColorSpace::Rgb,
        )?;
        let lab = convert(&img, ColorSpace::Lab)?.to_raw();
        println!(
            "  {name:>8}: L {:7.2}  a {:7.2}  b {:7.2}",
            lab.pixels[[0, 0, 0]],
            lab.pixels[[0, 0, 1]],
            lab.pixels[[0, 0, 2]]
        );
    }

    // The bottleneck: with p = 0.5 one channel of the encoder input is zeroed;
    // the same channel must be dropped from both frames of a training pair.
    let img = Image::from_raw(
        Array3::from_shape_fn((4, 4, 3), |(_, x, c)| 0.2 + 0.1 * (x as f64) + 0.2 * c as f64),
        ColorSpace::Rgb,
    )?
    .to_normalized();
    println!("\nchannel dropout at p = 0.5 over ten seeds:");
    for seed in 0..10 {
        let spec = DropoutSpec::new(0.5, seed)?;
        let (_, dropped) = apply_channel_dropout(&img, &spec)?;
        match dropped {
            Some(c) => println!("  seed {seed}: dropped channel {c}"),
            None => println!("  seed {seed}: kept all channels"),
        }
    }
    Ok(())
}
