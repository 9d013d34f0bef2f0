//! Synthetic chest-radiograph stand-in: two lung-like ellipses and a
//! heart-like ellipse rasterized into a four-class mask, with a paired
//! pseudo-intensity image.
//!
//! Labels: 0 background, 1 right lung, 2 left lung, 3 heart. Lungs are drawn
//! first and the heart only claims background pixels, so labels never overlap.
//! Intensities loosely mimic a radiograph: dark lungs, a heart only slightly
//! brighter than the surrounding body, smooth shading and Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMask, NUM_CLASSES};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::warp::{warp_labels_nearest, warp_tensor, DeformationField};
use crate::{seeded_rng, SeededRng};

pub const MAX_RETRIES: usize = 100;

/// Sampling ranges of one elliptical structure, in pixels and radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeRange {
    pub center_row: (f64, f64),
    pub center_col: (f64, f64),
    pub semi_axis_row: (f64, f64),
    pub semi_axis_col: (f64, f64),
    pub rotation: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub size: usize,
    /// Ranges for labels 1, 2, 3 (given for a 64-pixel frame, scaled to `size`).
    pub shapes: [ShapeRange; 3],
    /// Maximum displacement of the elastic shape perturbation.
    pub elastic_amplitude: f64,
    /// Shortest wavelength of the perturbation, pixels.
    pub elastic_scale: f64,
    /// Base intensity per label.
    pub intensities: [f64; NUM_CLASSES],
    /// Peak-to-peak amplitude of the smooth shading.
    pub shading: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 100,
            size: 64,
            shapes: [
                ShapeRange {
                    center_row: (29.0, 35.0),
                    center_col: (17.0, 21.0),
                    semi_axis_row: (15.0, 20.0),
                    semi_axis_col: (7.0, 10.0),
                    rotation: (-0.15, 0.15),
                },
                ShapeRange {
                    center_row: (29.0, 35.0),
                    center_col: (43.0, 47.0),
                    semi_axis_row: (15.0, 20.0),
                    semi_axis_col: (7.0, 10.0),
                    rotation: (-0.15, 0.15),
                },
                ShapeRange {
                    center_row: (41.0, 46.0),
                    center_col: (31.0, 37.0),
                    semi_axis_row: (9.0, 12.0),
                    semi_axis_col: (10.0, 13.0),
                    rotation: (-0.4, 0.4),
                },
            ],
            elastic_amplitude: 1.5,
            elastic_scale: 24.0,
            intensities: [0.55, 0.2, 0.22, 0.62],
            shading: 0.2,
            noise_std: 0.04,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Config(format!("synth: {d}")));
        if self.count == 0 {
            return bad("count must be positive".into());
        }
        if self.size < 16 {
            return bad(format!("size {} below 16", self.size));
        }
        for (k, s) in self.shapes.iter().enumerate() {
            for (name, (lo, hi)) in [
                ("center_row", s.center_row),
                ("center_col", s.center_col),
                ("semi_axis_row", s.semi_axis_row),
                ("semi_axis_col", s.semi_axis_col),
                ("rotation", s.rotation),
            ] {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return bad(format!("structure {} {name} range ({lo}, {hi})", k + 1));
                }
            }
            if s.semi_axis_row.0 <= 0.0 || s.semi_axis_col.0 <= 0.0 {
                return bad(format!("structure {} semi-axes must be positive", k + 1));
            }
        }
        if self.elastic_amplitude < 0.0 || self.elastic_scale <= 0.0 {
            return bad("elastic amplitude must be >= 0 and scale > 0".into());
        }
        if self.noise_std < 0.0 || self.shading < 0.0 {
            return bad("noise and shading must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: Image,
    pub mask: LabelMask,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    row: f64,
    col: f64,
    a_row: f64,
    a_col: f64,
    rot: f64,
}

impl Ellipse {
    fn contains(&self, r: f64, c: f64) -> bool {
        let (dr, dc) = (r - self.row, c - self.col);
        let (s, co) = self.rot.sin_cos();
        let u = co * dr + s * dc;
        let v = -s * dr + co * dc;
        (u / self.a_row).powi(2) + (v / self.a_col).powi(2) <= 1.0
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn sample_ellipse(range: &ShapeRange, scale: f64, rng: &mut impl Rng) -> Ellipse {
    Ellipse {
        row: uniform(rng, range.center_row) * scale,
        col: uniform(rng, range.center_col) * scale,
        a_row: uniform(rng, range.semi_axis_row) * scale,
        a_col: uniform(rng, range.semi_axis_col) * scale,
        rot: uniform(rng, range.rotation),
    }
}

/// Smooth random displacement field: a mixture of low-frequency sinusoids per
/// channel, rescaled so the largest displacement magnitude equals `amplitude`.
pub fn smooth_field(size: usize, amplitude: f64, min_wavelength: f64, rng: &mut impl Rng) -> DeformationField<f32> {
    if amplitude == 0.0 {
        return DeformationField::zeros(1, size, size);
    }
    let mut comps = [vec![0.0f64; size * size], vec![0.0f64; size * size]];
    for comp in comps.iter_mut() {
        for _ in 0..3 {
            let wavelength = rng.gen_range(min_wavelength..=2.5 * min_wavelength);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let weight = rng.gen_range(0.5..1.0);
            let (ky, kx) = (theta.sin() / wavelength, theta.cos() / wavelength);
            for r in 0..size {
                for c in 0..size {
                    let arg = std::f64::consts::TAU * (kx * c as f64 + ky * r as f64) + phase;
                    comp[r * size + c] += weight * arg.sin();
                }
            }
        }
    }
    let peak = comps[0].iter().zip(&comps[1]).map(|(x, y)| x.hypot(*y)).fold(0.0, f64::max);
    let k = if peak > 0.0 { amplitude / peak } else { 0.0 };
    let data = comps[0].iter().zip(&comps[1]).flat_map(|(x, y)| [(x * k) as f32, (y * k) as f32]).collect();
    DeformationField::new(Tensor::new(&[1, size, size, 2], data).expect("field extents")).expect("two channels")
}

fn generate_mask(spec: &SynthSpec, rng: &mut SeededRng) -> Option<LabelMask> {
    let n = spec.size;
    let scale = n as f64 / 64.0;
    let shapes: Vec<Ellipse> = spec.shapes.iter().map(|s| sample_ellipse(s, scale, rng)).collect();
    let mut mask = LabelMask::filled(n, n, 0);
    let mut heart_disc = 0usize;
    for r in 0..n {
        for c in 0..n {
            let (y, x) = (r as f64, c as f64);
            let inside: Vec<bool> = shapes.iter().map(|e| e.contains(y, x)).collect();
            if inside[0] && inside[1] {
                return None;
            }
            if inside[2] {
                heart_disc += 1;
            }
            let label = if inside[0] {
                1
            } else if inside[1] {
                2
            } else if inside[2] {
                3
            } else {
                0
            };
            mask.set(r, c, label);
        }
    }
    // The heart may tuck behind the lungs, but most of it must remain visible.
    if mask.count(3) * 2 < heart_disc {
        return None;
    }
    let field = smooth_field(n, spec.elastic_amplitude, spec.elastic_scale * scale, rng);
    let mask = warp_labels_nearest(&mask, &field).ok()?;
    // Structures stay clear of the frame and every class is present.
    let touches_frame = (0..n).any(|i| mask.at(0, i) != 0 || mask.at(n - 1, i) != 0 || mask.at(i, 0) != 0 || mask.at(i, n - 1) != 0);
    if touches_frame || (0..NUM_CLASSES as u8).any(|k| mask.count(k) == 0) {
        return None;
    }
    Some(mask)
}

fn render_image(spec: &SynthSpec, mask: &LabelMask, rng: &mut SeededRng) -> Image {
    let n = spec.size;
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let data = (0..n * n)
        .map(|i| {
            let (r, c) = ((i / n) as f64, (i % n) as f64);
            let base = spec.intensities[mask.labels[i] as usize];
            let u = (c * theta.cos() + r * theta.sin()) / n as f64;
            let shade = 0.5 * spec.shading * (std::f64::consts::PI * u + phase).sin();
            let eps = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            (base + shade + eps).clamp(0.0, 1.0) as f32
        })
        .collect();
    Image::new(n, n, data).expect("image extents")
}

/// Generate `spec.count` samples. Each sample draws from its own generator
/// derived from the spec seed and the sample id.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.count).map(|id| generate_one(spec, id)).collect()
}

pub fn generate_one(spec: &SynthSpec, id: usize) -> Result<Sample> {
    let mut rng = seeded_rng(spec.seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    for _ in 0..MAX_RETRIES {
        if let Some(mask) = generate_mask(spec, &mut rng) {
            let image = render_image(spec, &mask, &mut rng);
            return Ok(Sample { id, image, mask });
        }
    }
    Err(Error::Infeasible(format!("sample {id}: no valid non-overlapping layout in {MAX_RETRIES} attempts")))
}

/// Train / validation / test partition of sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Folds {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.6, 0.2, 0.2);

/// Seeded shuffle of `0..len` into three folds; validation and test sizes are
/// rounded down and the remainder goes to training.
pub fn split(len: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Folds> {
    if len == 0 {
        return Err(Error::Empty("dataset".into()));
    }
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::arg("split", format!("fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let mut ids: Vec<usize> = (0..len).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut seeded_rng(seed));
    let n_val = (b * len as f64 + 1e-9).floor() as usize;
    let n_test = (c * len as f64 + 1e-9).floor() as usize;
    let test = ids.split_off(len - n_test);
    let val = ids.split_off(len - n_test - n_val);
    Ok(Folds { train: ids, val, test })
}

/// A known-truth deformed copy of a sample: the image is warped bilinearly
/// and the mask by nearest neighbour with the same smooth random field.
pub fn deform_pair(sample: &Sample, amplitude: f64, seed: u64) -> Result<(Image, LabelMask, DeformationField<f32>)> {
    if !(amplitude >= 0.0) {
        return Err(Error::arg("deform_pair", format!("amplitude {amplitude} must be >= 0")));
    }
    let n = sample.image.height;
    if sample.image.width != n || (sample.mask.height, sample.mask.width) != (n, n) {
        return Err(Error::shape("deform_pair", "image and mask must be square and equal-sized"));
    }
    let field = smooth_field(n, amplitude, 24.0 * n as f64 / 64.0, &mut seeded_rng(seed));
    let image = Image::from_tensor(&warp_tensor(&sample.image.to_tensor::<f32>(), &field)?, 0)?;
    let mask = warp_labels_nearest(&sample.mask, &field)?;
    Ok((image, mask, field))
}

/// Bilinear sample of a field at a real-valued location (clamped to the grid).
pub fn sample_field<T: Scalar>(field: &DeformationField<T>, y: f64, x: f64) -> (f64, f64) {
    let (_, h, w) = field.dims();
    let (y, x) = (y.clamp(0.0, (h - 1) as f64), x.clamp(0.0, (w - 1) as f64));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ay, ax) = (y - y0 as f64, x - x0 as f64);
    let get = |r, c| {
        let (dx, dy) = field.at(0, r, c);
        (dx.to_f64c(), dy.to_f64c())
    };
    let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
    lerp(lerp(get(y0, x0), get(y0, x1), ax), lerp(get(y1, x0), get(y1, x1), ax), ay)
}

/// Fixed-point inverse of a backward-warping field: g(q) = -f(q + g(q)).
pub fn invert_field(field: &DeformationField<f32>, iterations: usize) -> DeformationField<f32> {
    let (_, h, w) = field.dims();
    let mut g = vec![(0.0f64, 0.0f64); h * w];
    for _ in 0..iterations {
        g = (0..h * w)
            .map(|i| {
                let (r, c) = ((i / w) as f64, (i % w) as f64);
                let (dx, dy) = sample_field(field, r + g[i].1, c + g[i].0);
                (-dx, -dy)
            })
            .collect();
    }
    let data = g.iter().flat_map(|&(dx, dy)| [dx as f32, dy as f32]).collect();
    DeformationField::new(Tensor::new(&[1, h, w, 2], data).expect("field extents")).expect("two channels")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(count: usize, seed: u64) -> SynthSpec {
        SynthSpec { count, seed, ..SynthSpec::default() }
    }

    #[test]
    fn every_sample_has_all_classes_inside_the_frame() {
        let data = generate(&small_spec(30, 5)).unwrap();
        for s in &data {
            for k in 0..4 {
                assert!(s.mask.count(k) > 0, "sample {} lacks class {k}", s.id);
            }
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate(&small_spec(5, 1)).unwrap();
        let b = generate(&small_spec(5, 1)).unwrap();
        let c = generate(&small_spec(5, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn fixed_parameters_without_perturbation_give_identical_samples() {
        let mut spec = small_spec(3, 9);
        for s in spec.shapes.iter_mut() {
            *s = ShapeRange {
                center_row: (s.center_row.0, s.center_row.0),
                center_col: (s.center_col.0, s.center_col.0),
                semi_axis_row: (s.semi_axis_row.0, s.semi_axis_row.0),
                semi_axis_col: (s.semi_axis_col.0, s.semi_axis_col.0),
                rotation: (0.0, 0.0),
            };
        }
        spec.elastic_amplitude = 0.0;
        spec.noise_std = 0.0;
        spec.shading = 0.0;
        let data = generate(&spec).unwrap();
        assert_eq!(data[0].mask, data[1].mask);
        assert_eq!(data[0].image, data[2].image);
    }

    #[test]
    fn split_sizes_disjointness_and_determinism() {
        let f = split(100, SPLIT_FRACTIONS, 3).unwrap();
        assert_eq!((f.train.len(), f.val.len(), f.test.len()), (60, 20, 20));
        let mut all: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split(100, SPLIT_FRACTIONS, 3).unwrap(), f);
        let g = split(7, SPLIT_FRACTIONS, 3).unwrap();
        assert_eq!((g.train.len(), g.val.len(), g.test.len()), (5, 1, 1));
        assert!(split(0, SPLIT_FRACTIONS, 3).is_err());
        assert!(split(10, (0.5, 0.5, 0.5), 3).is_err());
    }

    #[test]
    fn zero_amplitude_pair_is_identity() {
        let s = generate_one(&small_spec(1, 4), 0).unwrap();
        let (img, mask, field) = deform_pair(&s, 0.0, 1).unwrap();
        assert_eq!(img, s.image);
        assert_eq!(mask, s.mask);
        assert!(field.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn field_magnitude_bounded_by_amplitude() {
        let s = generate_one(&small_spec(1, 4), 0).unwrap();
        for seed in 0..5 {
            let (_, _, field) = deform_pair(&s, 2.5, seed).unwrap();
            let d = field.tensor().data();
            let peak = d.chunks(2).map(|p| (p[0] as f64).hypot(p[1] as f64)).fold(0.0, f64::max);
            assert!(peak <= 2.5 + 1e-5 && peak > 2.0, "peak {peak}");
        }
    }

    #[test]
    fn inverse_field_recovers_mask() {
        let data = generate(&small_spec(4, 8)).unwrap();
        for s in &data {
            let (_, warped, field) = deform_pair(s, 3.0, s.id as u64 + 10).unwrap();
            let back = warp_labels_nearest(&warped, &invert_field(&field, 20)).unwrap();
            for k in 1..4u8 {
                let inter = (0..64 * 64).filter(|&i| back.labels[i] == k && s.mask.labels[i] == k).count();
                let dice = 2.0 * inter as f64 / (back.count(k) + s.mask.count(k)) as f64;
                assert!(dice >= 0.95, "class {k} dice {dice}");
            }
        }
    }
}
