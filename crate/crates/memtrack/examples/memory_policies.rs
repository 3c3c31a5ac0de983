//! Which frames the memory bank selects, and at what dilation rate each is
//! searched.
//!
//!     cargo run --example memory_policies

use memtrack::memory::{dilation_for, select_frames, BankPolicy};

fn main() -> memtrack::Result<()> {
    let policies = [
        ("default", BankPolicy::default()),
        ("only_short", BankPolicy::only_short()),
        ("only_long", BankPolicy::only_long()),
        ("sized(1,1)", BankPolicy::sized(1, 1)),
        ("sized(4,3)", BankPolicy::sized(4, 3)),
    ];
    for (name, policy) in &policies {
        println!("{name}:");
        for t in [1usize, 4, 6, 10, 30, 100] {
            let frames = select_frames(t, policy)?;
            let dilations: Vec<usize> = frames
                .iter()
                .map(|&f| dilation_for(t - f))
                .collect::<memtrack::Result<_>>()?;
            println!("  t = {t:>3}: frames {frames:?} with dilations {dilations:?}");
        }
    }
    println!("\ndilation grows with temporal distance, one step every 15 frames:");
    for d in [1usize, 15, 16, 30, 31, 45, 100] {
        println!("  distance {d:>3} -> dilation {}", dilation_for(d)?);
    }
    Ok(())
}
