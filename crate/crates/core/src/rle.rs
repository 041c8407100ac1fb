//! Run-length coding of row-major masks: alternating background and
//! foreground run lengths, always starting with background (possibly 0).

use crate::error::{Error, Result};
use crate::types::BinaryMask;

pub fn encode(mask: &BinaryMask) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &bit in mask.bits() {
        if bit == current {
            len += 1;
        } else {
            runs.push(len);
            current = bit;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn decode(runs: &[u32], width: usize, height: usize) -> Result<BinaryMask> {
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    let expected = (width * height) as u64;
    if total != expected {
        return Err(Error::Invalid(format!(
            "mask runs sum to {total}, expected {width}x{height} = {expected}"
        )));
    }
    let mut bits = Vec::with_capacity(width * height);
    for (i, &run) in runs.iter().enumerate() {
        bits.extend(std::iter::repeat_n(i % 2 == 1, run as usize));
    }
    BinaryMask::new(width, height, bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_right_column() {
        let m = decode(&[1, 1, 1, 1], 2, 2).unwrap();
        assert_eq!(m.bits(), &[false, true, false, true]);
    }

    #[test]
    fn short_runs_rejected() {
        assert!(decode(&[1, 1, 1], 2, 2).is_err());
    }

    #[test]
    fn leading_foreground_gets_zero_run() {
        let m = BinaryMask::new(3, 1, vec![true, true, false]).unwrap();
        assert_eq!(encode(&m), vec![0, 2, 1]);
    }

    proptest::proptest! {
        #[test]
        fn round_trip(w in 1usize..12, h in 1usize..12, seed in proptest::collection::vec(proptest::bool::ANY, 144)) {
            let m = BinaryMask::new(w, h, seed[..w * h].to_vec()).unwrap();
            proptest::prop_assert_eq!(decode(&encode(&m), w, h).unwrap(), m);
        }
    }
}
