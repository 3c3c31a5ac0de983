//! Memory-bank construction: which past frames serve as references and the
//! dilation rate applied when localizing in each of them.
//!
//! The default policy keeps frames 0 and 5 as long-term anchors (frame 5
//! only once the current index exceeds 5) and offsets {5, 3, 1} as
//! short-term references, deduplicated and ascending, at most five entries.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};

/// Anything that can serve as a memory value: it lives on a spatial grid
/// that must match the key's.
pub trait GridValue {
    fn grid_hw(&self) -> (usize, usize);
}

impl GridValue for ndarray::Array3<f64> {
    fn grid_hw(&self) -> (usize, usize) {
        (self.shape()[0], self.shape()[1])
    }
}

/// A key/value pair retrieved from memory. Values are aligned raw frames
/// during training and label maps at inference.
#[derive(Debug, Clone)]
pub struct MemoryEntry<V> {
    pub frame_index: usize,
    pub key: FeatureMap,
    pub value: V,
}

impl<V: GridValue> MemoryEntry<V> {
    /// Build an entry, checking that key and value share their spatial grid.
    pub fn new(frame_index: usize, key: FeatureMap, value: V) -> Result<Self> {
        let hw = value.grid_hw();
        if (key.height(), key.width()) != hw {
            return Err(Error::shape(format!(
                "memory entry {frame_index}: key grid {}x{} vs value grid {}x{}",
                key.height(),
                key.width(),
                hw.0,
                hw.1
            )));
        }
        Ok(MemoryEntry { frame_index, key, value })
    }
}

/// Frame-selection policy for the memory bank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankPolicy {
    pub long_term: Vec<usize>,
    pub short_term_offsets: Vec<usize>,
    pub max_frames: usize,
}

impl Default for BankPolicy {
    fn default() -> Self {
        BankPolicy { long_term: vec![0, 5], short_term_offsets: vec![1, 3, 5], max_frames: 5 }
    }
}

impl BankPolicy {
    /// Short-term references only (offsets {5, 3, 1}).
    pub fn only_short() -> Self {
        BankPolicy { long_term: vec![], ..Default::default() }
    }

    /// Long-term anchors only (frames 0 and 5).
    pub fn only_long() -> Self {
        BankPolicy { short_term_offsets: vec![], ..Default::default() }
    }

    /// `n` short-term and `m` long-term references, the two lists growing as
    /// in the memory-size sweep: offsets 1, 3, 5, 7, ... and anchors
    /// 0, 5, 10, ....
    pub fn sized(n: usize, m: usize) -> Self {
        BankPolicy {
            long_term: (0..m).map(|i| 5 * i).collect(),
            short_term_offsets: (0..n).map(|i| 2 * i + 1).collect(),
            max_frames: (n + m).max(1),
        }
    }

    /// Parse `default`, `only_short`, `only_long` or `sized:n,m`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(BankPolicy::default()),
            "only_short" => Ok(BankPolicy::only_short()),
            "only_long" => Ok(BankPolicy::only_long()),
            other => {
                if let Some(args) = other.strip_prefix("sized:") {
                    let parts: Vec<&str> = args.split(',').collect();
                    if parts.len() == 2 {
                        let n = parts[0].trim().parse::<usize>();
                        let m = parts[1].trim().parse::<usize>();
                        if let (Ok(n), Ok(m)) = (n, m) {
                            return Ok(BankPolicy::sized(n, m));
                        }
                    }
                }
                Err(Error::Config(format!("unknown memory policy `{other}`")))
            }
        }
    }
}

/// Reference frame indices for target frame `t`: ascending, duplicate-free,
/// all strictly less than `t`, never more than `max_frames` entries.
pub fn select_frames(t: usize, policy: &BankPolicy) -> Result<Vec<usize>> {
    if t < 1 {
        return Err(Error::invalid("select_frames requires t >= 1"));
    }
    let mut set: BTreeSet<usize> = BTreeSet::new();
    for &idx in &policy.long_term {
        if idx < t {
            set.insert(idx);
        }
    }
    for &off in &policy.short_term_offsets {
        if off >= 1 && off <= t {
            set.insert(t - off);
        }
    }
    if set.is_empty() {
        return Err(Error::EmptyBank { frame: t });
    }
    let long: BTreeSet<usize> = policy.long_term.iter().copied().collect();
    while set.len() > policy.max_frames {
        // Drop the oldest short-term entry first; anchors stay.
        let victim = set
            .iter()
            .copied()
            .find(|i| !long.contains(i))
            .or_else(|| set.iter().copied().next())
            .expect("nonempty");
        set.remove(&victim);
    }
    Ok(set.into_iter().collect())
}

/// Dilation rate for a reference at temporal distance `d`:
/// `max(1, ceil(d / 15))`.
pub fn dilation_for(distance: usize) -> Result<usize> {
    if distance < 1 {
        return Err(Error::invalid("temporal distance must be >= 1"));
    }
    Ok(distance.div_ceil(15).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_policy_fixtures() {
        let p = BankPolicy::default();
        assert_eq!(select_frames(1, &p).unwrap(), vec![0]);
        assert_eq!(select_frames(4, &p).unwrap(), vec![0, 1, 3]);
        assert_eq!(select_frames(30, &p).unwrap(), vec![0, 5, 25, 27, 29]);
    }

    #[test]
    fn frame_five_enters_once_current_index_passes_it() {
        let p = BankPolicy::default();
        assert_eq!(select_frames(5, &p).unwrap(), vec![0, 2, 4]);
        assert_eq!(select_frames(6, &p).unwrap(), vec![0, 1, 3, 5]);
        // overlap between anchor 5 and offset hits deduplicates
        assert_eq!(select_frames(8, &p).unwrap(), vec![0, 3, 5, 7]);
    }

    #[test]
    fn ablation_policies() {
        assert_eq!(select_frames(30, &BankPolicy::only_short()).unwrap(), vec![25, 27, 29]);
        assert_eq!(select_frames(30, &BankPolicy::only_long()).unwrap(), vec![0, 5]);
        assert_eq!(select_frames(30, &BankPolicy::sized(1, 1)).unwrap(), vec![0, 29]);
        assert_eq!(select_frames(30, &BankPolicy::sized(3, 2)).unwrap(), vec![0, 5, 25, 27, 29]);
    }

    #[test]
    fn empty_bank_is_an_error() {
        let err = select_frames(10, &BankPolicy::sized(0, 0)).unwrap_err();
        assert!(matches!(err, Error::EmptyBank { frame: 10 }));
    }

    #[test]
    fn dilation_fixtures() {
        assert_eq!(dilation_for(1).unwrap(), 1);
        assert_eq!(dilation_for(15).unwrap(), 1);
        assert_eq!(dilation_for(16).unwrap(), 2);
        assert_eq!(dilation_for(45).unwrap(), 3);
        assert!(dilation_for(0).is_err());
    }

    #[test]
    fn memory_entry_checks_grid_agreement() {
        let key = FeatureMap { values: ndarray::Array3::zeros((4, 3, 3)), stride: 4 };
        let good = ndarray::Array3::<f64>::zeros((3, 3, 2));
        assert!(MemoryEntry::new(0, key.clone(), good).is_ok());
        let bad = ndarray::Array3::<f64>::zeros((3, 5, 2));
        assert!(MemoryEntry::new(0, key, bad).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(BankPolicy::parse("default").unwrap(), BankPolicy::default());
        assert_eq!(BankPolicy::parse("sized:2,1").unwrap(), BankPolicy::sized(2, 1));
        assert!(BankPolicy::parse("bogus").is_err());
    }

    proptest! {
        #[test]
        fn selection_is_ascending_bounded_and_excludes_t(t in 1usize..200) {
            let p = BankPolicy::default();
            let frames = select_frames(t, &p).unwrap();
            prop_assert!(frames.len() <= p.max_frames);
            prop_assert!(frames.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(frames.iter().all(|&f| f < t));
        }

        #[test]
        fn dilation_is_monotone(d in 1usize..500) {
            prop_assert!(dilation_for(d + 1).unwrap() >= dilation_for(d).unwrap());
        }
    }
}
