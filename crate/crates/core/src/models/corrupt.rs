use rand::Rng;

use crate::error::{Error, Result};
use crate::image::LabelMask;

/// Denoising-autoencoder noise model: every border pixel (one whose label
/// differs from at least one 4-neighbour) independently takes the label of
/// its left neighbour with probability `p`. Column 0 is never modified.
/// Eligibility and the copied labels are read from the input mask.
pub fn corrupt_mask(mask: &LabelMask, p: f64, rng: &mut impl Rng) -> Result<LabelMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg("corrupt_mask", format!("probability {p} outside [0, 1]")));
    }
    let mut out = mask.clone();
    if p == 0.0 {
        return Ok(out);
    }
    let (h, w) = (mask.height, mask.width);
    for r in 0..h {
        for c in 1..w {
            let l = mask.at(r, c);
            let border = mask.at(r, c - 1) != l
                || (c + 1 < w && mask.at(r, c + 1) != l)
                || (r > 0 && mask.at(r - 1, c) != l)
                || (r + 1 < h && mask.at(r + 1, c) != l);
            if border && rng.gen_bool(p) {
                out.set(r, c, mask.at(r, c - 1));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn vertical_boundary() -> LabelMask {
        let mut m = LabelMask::filled(8, 8, 0);
        for r in 0..8 {
            for c in 4..8 {
                m.set(r, c, 1);
            }
        }
        m
    }

    #[test]
    fn zero_probability_and_uniform_masks_are_unchanged() {
        let mut rng = seeded_rng(1);
        let m = vertical_boundary();
        assert_eq!(corrupt_mask(&m, 0.0, &mut rng).unwrap(), m);
        let u = LabelMask::filled(8, 8, 2);
        assert_eq!(corrupt_mask(&u, 1.0, &mut rng).unwrap(), u);
    }

    #[test]
    fn full_probability_copies_left_labels_on_boundary() {
        let m = vertical_boundary();
        let out = corrupt_mask(&m, 1.0, &mut seeded_rng(2)).unwrap();
        // Column 3 (label 0, left neighbour 0) stays; column 4 takes label 0.
        for r in 0..8 {
            assert_eq!(out.at(r, 3), 0);
            assert_eq!(out.at(r, 4), 0);
            assert_eq!(out.at(r, 5), 1);
        }
        assert_eq!(out.diff_count(&m), 8);
    }

    #[test]
    fn monte_carlo_change_rate() {
        let m = vertical_boundary();
        let mut rng = seeded_rng(3);
        let draws = 1000;
        let total: usize = (0..draws).map(|_| corrupt_mask(&m, 0.1, &mut rng).unwrap().diff_count(&m)).sum();
        // 16 border pixels, of which 8 have a differing left neighbour.
        let expected = 0.1 * 8.0;
        let mean = total as f64 / draws as f64;
        assert!((mean - expected).abs() < 0.1 * expected + 0.05, "mean {mean}");
    }

    #[test]
    fn rejects_bad_probability() {
        assert!(corrupt_mask(&vertical_boundary(), 1.5, &mut seeded_rng(0)).is_err());
    }
}
