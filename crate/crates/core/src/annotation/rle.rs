//! Run-length text encoding of binary masks: comma-separated `value:count`
//! runs in row-major order, e.g. `0:10,1:6` for a 4×4 mask whose last six
//! pixels are set.

use std::fmt::Write;

use crate::data::Mask;
use crate::error::{Error, Result};

pub fn encode(mask: &Mask) -> String {
    let mut out = String::new();
    let mut run: Option<(bool, usize)> = None;
    let flush = |out: &mut String, v: bool, n: usize| {
        if !out.is_empty() {
            out.push(',');
        }
        let _ = write!(out, "{}:{}", v as u8, n);
    };
    for &v in mask.iter() {
        run = match run {
            Some((cur, n)) if cur == v => Some((cur, n + 1)),
            Some((cur, n)) => {
                flush(&mut out, cur, n);
                Some((v, 1))
            }
            None => Some((v, 1)),
        };
    }
    if let Some((v, n)) = run {
        flush(&mut out, v, n);
    }
    out
}

pub fn decode(text: &str, height: usize, width: usize) -> Result<Mask> {
    let total = height * width;
    let mut bits = Vec::with_capacity(total);
    let text = text.trim();
    if !text.is_empty() {
        for token in text.split(',') {
            let (value, count) = token
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Rle(format!("run {token:?} is not value:count")))?;
            let value = match value.trim() {
                "0" => false,
                "1" => true,
                v => return Err(Error::Rle(format!("run value {v:?} is not 0 or 1"))),
            };
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| Error::Rle(format!("run length {count:?} is not a count")))?;
            if count == 0 {
                return Err(Error::Rle("zero-length run".into()));
            }
            if bits.len() + count > total {
                return Err(Error::Rle(format!("runs exceed the {height}x{width} mask")));
            }
            bits.extend(std::iter::repeat_n(value, count));
        }
    }
    if bits.len() != total {
        return Err(Error::Rle(format!(
            "runs cover {} pixels, mask has {total}",
            bits.len()
        )));
    }
    Mask::from_shape_vec((height, width), bits).map_err(|e| Error::Rle(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_example() {
        let m = decode("0:10,1:6", 4, 4).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 6);
        assert!(!m[[2, 1]] && m[[2, 2]] && m[[3, 3]]);
        assert_eq!(encode(&m), "0:10,1:6");
    }

    #[test]
    fn malformed_inputs() {
        for bad in ["0:10,1:5", "0:10,1:7", "2:16", "0:0,1:16", "x", "0:-1", "0:16,"] {
            assert!(decode(bad, 4, 4).is_err(), "{bad}");
        }
        assert_eq!(decode("", 0, 0).unwrap().len(), 0);
    }

    proptest! {
        #[test]
        fn round_trip(h in 1usize..12, w in 1usize..12, bits in proptest::collection::vec(any::<bool>(), 144)) {
            let m = Mask::from_shape_fn((h, w), |(y, x)| bits[y * w + x]);
            prop_assert_eq!(decode(&encode(&m), h, w).unwrap(), m);
        }
    }
}
