//! Binary image-resolution masks, run-length encoding and overlap metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

/// Row-major run lengths alternating off/on, starting with an (possibly
/// empty) off run. Decoding requires the runs to sum to `width · height`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<u32>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::dim(
                "mask",
                format!("{} bits for {width}x{height}", bits.len()),
            ));
        }
        Ok(Mask {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Mask {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn invert(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Intersection over union; two empty masks score 0.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        self.check_same(other)?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        })
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::dim(
                "mask",
                format!(
                    "{}x{} vs {}x{}",
                    self.width, self.height, other.width, other.height
                ),
            ));
        }
        Ok(())
    }

    pub fn encode(&self) -> Rle {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        Rle {
            width: self.width,
            height: self.height,
            runs,
        }
    }

    pub fn decode(rle: &Rle) -> Result<Mask> {
        let total: u64 = rle.runs.iter().map(|&r| r as u64).sum();
        if total != (rle.width * rle.height) as u64 {
            return Err(Error::Contract(format!(
                "mask runs cover {total} pixels, expected {}",
                rle.width * rle.height
            )));
        }
        let mut bits = Vec::with_capacity(rle.width * rle.height);
        for (i, &r) in rle.runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        }
        Mask::new(rle.width, rle.height, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_decode(rle: &Rle) -> Vec<bool> {
        let mut out = Vec::new();
        let mut on = false;
        for &r in &rle.runs {
            for _ in 0..r {
                out.push(on);
            }
            on = !on;
        }
        out
    }

    #[test]
    fn leading_on_pixel_gets_empty_off_run() {
        let m = Mask::new(3, 1, vec![true, true, false]).unwrap();
        assert_eq!(m.encode().runs, vec![0, 2, 1]);
    }

    #[test]
    fn iou_cases() {
        let a = Mask::new(2, 2, vec![true, true, false, false]).unwrap();
        let b = Mask::new(2, 2, vec![true, false, true, false]).unwrap();
        assert!((a.iou(&b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.iou(&a).unwrap(), 1.0);
        assert_eq!(Mask::empty(2, 2).iou(&Mask::empty(2, 2)).unwrap(), 0.0);
        assert!(a.iou(&Mask::empty(3, 3)).is_err());
    }

    #[test]
    fn bad_run_total_rejected() {
        let rle = Rle {
            width: 2,
            height: 2,
            runs: vec![1, 2],
        };
        assert!(Mask::decode(&rle).is_err());
    }

    proptest! {
        #[test]
        fn rle_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let mut rng = crate::rng::Rng::new(seed, crate::rng::StreamId(0));
            let bits: Vec<bool> = (0..w * h).map(|_| rng.uniform() < 0.4).collect();
            let m = Mask::new(w, h, bits.clone()).unwrap();
            let rle = m.encode();
            prop_assert_eq!(naive_decode(&rle), bits);
            prop_assert_eq!(Mask::decode(&rle).unwrap(), m);
        }
    }
}
