use crate::error::{Error, Result};
use crate::tensorops::Tensor;

/// Sub-pixel rearrangement `r²C×H×W → C×rH×rW`:
/// `out[c, h·r+i, w·r+j] = in[c·r²+i·r+j, h, w]`.
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (cin, h, w) = input.dims3()?;
    if r == 0 || cin % (r * r) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("{cin} channels not divisible by r²={}", r * r),
        ));
    }
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let src = input.data();
    let mut out = vec![0.0f32; src.len()];
    for oc in 0..c {
        for i in 0..r {
            for j in 0..r {
                let ic = oc * r * r + i * r + j;
                for y in 0..h {
                    let row = &src[(ic * h + y) * w..(ic * h + y + 1) * w];
                    let dst = (oc * oh + y * r + i) * ow + j;
                    for (x, &v) in row.iter().enumerate() {
                        out[dst + x * r] = v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Exact inverse of [`pixel_shuffle`]; also its backward map.
pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (c, oh, ow) = input.dims3()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::invalid("pixel_unshuffle", format!("{oh}×{ow} not divisible by r={r}")));
    }
    let (h, w) = (oh / r, ow / r);
    let src = input.data();
    let mut out = vec![0.0f32; src.len()];
    for oc in 0..c {
        for i in 0..r {
            for j in 0..r {
                let ic = oc * r * r + i * r + j;
                for y in 0..h {
                    let base = (oc * oh + y * r + i) * ow + j;
                    let dst = &mut out[(ic * h + y) * w..(ic * h + y + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        *d = src[base + x * r];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c * r * r, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::seeded_tensor;
    use proptest::prelude::*;

    #[test]
    fn r1_is_identity() {
        let x = seeded_tensor(&[3, 4, 5], 1);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn four_channels_to_two_by_two() {
        let x = Tensor::new(vec![4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unshuffle_inverts() {
        let x = seeded_tensor(&[8, 3, 3], 2);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 6, 6]);
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
    }

    #[test]
    fn rejects_indivisible_channels() {
        assert!(pixel_shuffle(&Tensor::zeros(&[6, 2, 2]), 2).is_err());
    }

    proptest! {
        #[test]
        fn preserves_multiset(seed in 0u64..1000, r in 1usize..4, c in 1usize..3, h in 1usize..4, w in 1usize..4) {
            let x = seeded_tensor(&[c * r * r, h, w], seed);
            let y = pixel_shuffle(&x, r).unwrap();
            let mut a: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
