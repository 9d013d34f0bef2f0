//! Independent oracles shared by the integration tests: central finite
//! differences for gradients and brute-force metric definitions.

#![allow(dead_code)]

use acreg::image::{LabelMask, NUM_CLASSES};
use acreg::losses::{ae_loss, ce_loss, composite_loss, ncc_loss, tv_reg, CompositeInputs, LossWeights, TvPenalty};
use acreg::models::{Autoencoder, Forward, CODE_DIM};
use acreg::tensor::{BnStats, Conv2dSpec, ParamSet};
use acreg::{seeded_rng, Result, SeededRng, Tape, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;
/// Elements probed per input (all of them when the input is smaller).
pub const FD_SAMPLES: usize = 48;

/// |a - n| / max(|a|, |n|, floor), with the floor at 1% of the largest numeric
/// entry so that near-zero components are judged on the gradient's own scale.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor).max(f64::MIN_POSITIVE)
}

/// Finite-difference estimate that tolerates a ReLU kink inside the probe
/// interval: central difference, or the one-sided difference on the side
/// without the kink, whichever agrees best with backprop. Away from kinks all
/// three coincide to O(h).
pub fn numeric_derivative(analytic: f64, minus: f64, centre: f64, plus: f64) -> f64 {
    let candidates = [(plus - minus) / (2.0 * FD_STEP), (plus - centre) / FD_STEP, (centre - minus) / FD_STEP];
    candidates.into_iter().min_by(|a, b| (a - analytic).abs().total_cmp(&(b - analytic).abs())).expect("three candidates")
}

fn probe_indices(len: usize, rng: &mut SeededRng) -> Vec<usize> {
    if len <= FD_SAMPLES {
        (0..len).collect()
    } else {
        (0..FD_SAMPLES).map(|_| rng.gen_range(0..len)).collect()
    }
}

pub type ScalarFn<'a> = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a;

/// Reduce an arbitrary output to a scalar with fixed random weights so that
/// every output component contributes a distinct direction.
pub fn weighted_sum<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = seeded_rng(seed);
    let shape = y.shape();
    let w = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    y.mul(y.tape().constant(w))?.sum().reshape(&[1])
}

fn eval_fn(f: &ScalarFn<'_>, inputs: &[Tensor<f64>]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars).expect("forward").item()
}

/// Maximum relative error between backprop and central differences over the
/// inputs flagged in `wrt`.
pub fn check_inputs(inputs: &[Tensor<f64>], wrt: &[bool], f: &ScalarFn<'_>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().zip(wrt).map(|(t, &g)| tape.leaf(t.clone(), g)).collect();
    let loss = f(&tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let mut rng = seeded_rng(0xfd);
    let mut pairs = Vec::new();
    for (k, (input, &g)) in inputs.iter().zip(wrt).enumerate() {
        if !g {
            continue;
        }
        let grad = tape.grad(vars[k]).unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in probe_indices(input.len(), &mut rng) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let analytic = grad.data()[i];
            pairs.push((analytic, numeric_derivative(analytic, eval_fn(f, &minus), eval_fn(f, inputs), eval_fn(f, &plus))));
        }
    }
    max_rel(&pairs)
}

fn max_rel(pairs: &[(f64, f64)]) -> f64 {
    let scale = pairs.iter().fold(0.0f64, |m, &(_, n)| m.max(n.abs()));
    pairs.iter().map(|&(a, n)| rel_err(a, n, 1e-2 * scale)).fold(0.0, f64::max)
}

/// Same check for the trainable parameters of a model.
pub fn check_params<M>(
    model: &mut M,
    params: fn(&mut M) -> &mut ParamSet<f64>,
    f: &dyn for<'t> Fn(&M, &'t Tape<f64>) -> Result<Var<'t, f64>>,
) -> f64 {
    let tape = Tape::new();
    let loss = f(model, &tape).expect("forward");
    tape.backward(loss).expect("backward");
    params(model).zero_grad();
    params(model).accumulate_grads(&tape);
    let mut rng = seeded_rng(0xfe);
    let mut pairs = Vec::new();
    let count = params(model).len();
    for p in 0..count {
        let key = acreg::tensor::ParamKey(p);
        if !params(model).get(key).trainable {
            continue;
        }
        let len = params(model).get(key).value.len();
        for i in probe_indices(len, &mut rng).into_iter().take(6) {
            let analytic = params(model).get(key).grad.data()[i];
            let mut at = |delta: f64| {
                params(model).get_mut(key).value.data_mut()[i] += delta;
                let tape = Tape::new();
                let v = f(model, &tape).expect("forward").item();
                params(model).get_mut(key).value.data_mut()[i] -= delta;
                v
            };
            let numeric = numeric_derivative(analytic, at(-FD_STEP), at(0.0), at(FD_STEP));
            pairs.push((analytic, numeric));
        }
    }
    max_rel(&pairs)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random per-pixel probability vectors, bounded away from zero.
pub fn soft_mask(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
    let mut t = random_tensor(&[n, h, w, c], 0.05, 1.0, seed);
    for px in t.data_mut().chunks_mut(c) {
        let s: f64 = px.iter().sum();
        px.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// A field whose sample points p + d stay inside the grid with fractional
/// parts in [0.25, 0.75], away from bilinear kinks and border clamping.
pub fn jittered_field(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    let mut data = Vec::with_capacity(n * h * w * 2);
    for _ in 0..n {
        for y in 0..h {
            for x in 0..w {
                for (pos, extent) in [(x, w), (y, h)] {
                    let lo = -(pos as f64).min(1.0);
                    let hi = ((extent - 1 - pos) as f64).min(1.0) - 1.0;
                    let whole = rng.gen_range(lo as i64..=hi as i64) as f64;
                    data.push(whole + rng.gen_range(0.25..0.75));
                }
            }
        }
    }
    Tensor::new(&[n, h, w, 2], data).unwrap()
}

/// One entry of the gradient suite.
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn() -> f64,
}

const STRICT: f64 = 1e-4;
const THROUGH_WARP: f64 = 1e-3;

fn conv_case() -> f64 {
    let inputs = [random_tensor(&[2, 6, 5, 3], -1.0, 1.0, 1), random_tensor(&[3, 3, 3, 4], -0.5, 0.5, 2), random_tensor(&[4], -0.5, 0.5, 3)];
    let same = check_inputs(&inputs, &[true; 3], &|_, v| weighted_sum(v[0].conv2d(v[1], v[2], Conv2dSpec::SAME3)?, 9));
    let down = check_inputs(&inputs, &[true; 3], &|_, v| weighted_sum(v[0].conv2d(v[1], v[2], Conv2dSpec::DOWN3)?, 9));
    same.max(down)
}

fn avgpool_case() -> f64 {
    check_inputs(&[random_tensor(&[2, 6, 4, 3], -1.0, 1.0, 4)], &[true], &|_, v| weighted_sum(v[0].avgpool2d((2, 2), (2, 2))?, 9))
}

fn upsample_case() -> f64 {
    check_inputs(&[random_tensor(&[2, 3, 4, 2], -1.0, 1.0, 5)], &[true], &|_, v| weighted_sum(v[0].upsample_nearest2()?, 9))
}

fn batchnorm_case() -> f64 {
    let inputs = [random_tensor(&[3, 4, 4, 3], -2.0, 2.0, 6), random_tensor(&[3], 0.5, 1.5, 7), random_tensor(&[3], -0.5, 0.5, 8)];
    check_inputs(&inputs, &[true; 3], &|_, v| weighted_sum(v[0].batch_norm(v[1], v[2], BnStats::Batch, 1e-5)?.0, 9))
}

fn fully_connected_case() -> f64 {
    let inputs = [random_tensor(&[3, 2, 2, 2], -1.0, 1.0, 10), random_tensor(&[8, 5], -0.5, 0.5, 11), random_tensor(&[5], -0.5, 0.5, 12)];
    check_inputs(&inputs, &[true; 3], &|_, v| weighted_sum(v[0].fully_connected(v[1], v[2])?, 9))
}

fn activations_case() -> f64 {
    // Values kept away from the kink at 0.
    let mut x = random_tensor(&[2, 3, 3, 4], 0.05, 2.0, 13);
    let mut rng = seeded_rng(14);
    x.data_mut().iter_mut().for_each(|v| if rng.gen_bool(0.5) { *v = -*v });
    let inputs = [x];
    let relu = check_inputs(&inputs, &[true], &|_, v| weighted_sum(v[0].relu(), 9));
    let elu = check_inputs(&inputs, &[true], &|_, v| weighted_sum(v[0].elu(), 9));
    let softmax = check_inputs(&inputs, &[true], &|_, v| weighted_sum(v[0].softmax_channel(), 9));
    relu.max(elu).max(softmax)
}

fn warp_case() -> f64 {
    let inputs = [random_tensor(&[2, 6, 7, 1], 0.0, 1.0, 15), jittered_field(2, 6, 7, 16)];
    check_inputs(&inputs, &[true; 2], &|_, v| weighted_sum(v[0].warp(v[1])?, 9))
}

fn warp_onehot_case() -> f64 {
    let inputs = [soft_mask(2, 6, 7, 4, 17), jittered_field(2, 6, 7, 18)];
    check_inputs(&inputs, &[true; 2], &|_, v| weighted_sum(v[0].warp_onehot(v[1])?, 9))
}

fn ncc_case() -> f64 {
    let inputs = [random_tensor(&[2, 5, 6, 1], 0.0, 1.0, 19), random_tensor(&[2, 5, 6, 1], 0.0, 1.0, 20)];
    check_inputs(&inputs, &[true; 2], &|_, v| ncc_loss(v[0], v[1]))
}

fn tv_case() -> f64 {
    let inputs = [random_tensor(&[2, 5, 6, 2], -2.0, 2.0, 21)];
    let l1 = check_inputs(&inputs, &[true], &|_, v| tv_reg(v[0], TvPenalty::L1));
    let smooth = check_inputs(&inputs, &[true], &|_, v| tv_reg(v[0], TvPenalty::Charbonnier(1e-3)));
    l1.max(smooth)
}

fn ce_case() -> f64 {
    let inputs = [soft_mask(2, 5, 6, 4, 22), soft_mask(2, 5, 6, 4, 23)];
    check_inputs(&inputs, &[true, false], &|_, v| ce_loss(v[0], v[1]))
}

fn frozen_autoencoder() -> Autoencoder<f64> {
    let mut ae = Autoencoder::new(24);
    ae.freeze();
    ae
}

fn ae_case() -> f64 {
    let ae = frozen_autoencoder();
    let inputs = [soft_mask(2, 64, 64, NUM_CLASSES, 25), soft_mask(2, 64, 64, NUM_CLASSES, 26)];
    check_inputs(&inputs, &[true, true], &|_, v| ae_loss(v[0], v[1], &ae))
}

fn composite_case() -> f64 {
    let ae = frozen_autoencoder();
    let inputs = [
        random_tensor(&[1, 64, 64, 1], 0.0, 1.0, 27),
        random_tensor(&[1, 64, 64, 1], 0.0, 1.0, 28),
        soft_mask(1, 64, 64, NUM_CLASSES, 29),
        soft_mask(1, 64, 64, NUM_CLASSES, 30),
        jittered_field(1, 64, 64, 31),
    ];
    let weights = LossWeights { lambda_r: 0.3, lambda_ce: 1.0, lambda_ae: 0.1 };
    check_inputs(&inputs, &[true, false, true, false, true], &|_, v| {
        let composite = CompositeInputs {
            warped_image: v[0].warp(v[4])?,
            target_image: v[1],
            warped_mask: Some(v[2].warp_onehot(v[4])?),
            target_mask: Some(v[3]),
            field: v[4],
        };
        Ok(composite_loss(&composite, weights, TvPenalty::Charbonnier(1e-3), Some(&ae))?.0)
    })
}

fn encode_decode_case() -> f64 {
    // Freshly initialized biases, shifts and running means are exactly zero, which
    // parks many ReLU inputs on the kink; jitter every array off that point.
    let mut ae = Autoencoder::<f64>::new(32);
    let mut rng = seeded_rng(36);
    for p in ae.params.iter_mut() {
        let var = p.name.ends_with("running_var");
        p.value.data_mut().iter_mut().for_each(|v| *v += if var { rng.gen_range(0.0..0.5) } else { rng.gen_range(-0.05..0.05) });
    }
    let ae = ae;
    let masks = [soft_mask(2, 64, 64, NUM_CLASSES, 33)];
    let enc = check_inputs(&masks, &[true], &|_, v| weighted_sum(ae.encode_forward(v[0], &mut Forward::eval())?, 9));
    let codes = [random_tensor(&[2, CODE_DIM], -1.0, 1.0, 34)];
    let dec = check_inputs(&codes, &[true], &|_, v| weighted_sum(ae.decode_forward(v[0], &mut Forward::eval())?, 9));
    let mut model = ae;
    let target = soft_mask(2, 64, 64, NUM_CLASSES, 35);
    let params = check_params(&mut model, |m| &mut m.params, &|m, tape| {
        let logits = m.forward(tape.constant(masks[0].clone()), &mut Forward::eval())?;
        acreg::losses::ce_with_logits(logits, tape.constant(target.clone()))
    });
    enc.max(dec).max(params)
}

pub fn gradient_suite() -> Vec<GradCase> {
    vec![
        GradCase { name: "conv2d", tolerance: STRICT, run: conv_case },
        GradCase { name: "avgpool2d", tolerance: STRICT, run: avgpool_case },
        GradCase { name: "upsample", tolerance: STRICT, run: upsample_case },
        GradCase { name: "batchnorm (train)", tolerance: STRICT, run: batchnorm_case },
        GradCase { name: "fully_connected", tolerance: STRICT, run: fully_connected_case },
        GradCase { name: "relu/elu/softmax", tolerance: STRICT, run: activations_case },
        GradCase { name: "warp", tolerance: THROUGH_WARP, run: warp_case },
        GradCase { name: "warp_onehot", tolerance: THROUGH_WARP, run: warp_onehot_case },
        GradCase { name: "ncc_loss", tolerance: STRICT, run: ncc_case },
        GradCase { name: "tv_reg (L1, Charbonnier)", tolerance: STRICT, run: tv_case },
        GradCase { name: "ce_loss", tolerance: STRICT, run: ce_case },
        GradCase { name: "ae_loss", tolerance: STRICT, run: ae_case },
        GradCase { name: "composite_loss", tolerance: THROUGH_WARP, run: composite_case },
        GradCase { name: "encode/decode", tolerance: STRICT, run: encode_decode_case },
    ]
}

/// Hard labels of a random mask with blob-like structure.
pub fn random_mask(size: usize, classes: usize, rng: &mut SeededRng) -> LabelMask {
    let mut labels = vec![0u8; size * size];
    for _ in 0..rng.gen_range(0..5) {
        let (r0, c0) = (rng.gen_range(0..size), rng.gen_range(0..size));
        let (hr, hc) = (rng.gen_range(0..size / 2 + 1), rng.gen_range(0..size / 2 + 1));
        let label = rng.gen_range(0..classes) as u8;
        for r in r0.saturating_sub(hr)..(r0 + hr).min(size) {
            for c in c0.saturating_sub(hc)..(c0 + hc).min(size) {
                labels[r * size + c] = label;
            }
        }
    }
    for v in labels.iter_mut() {
        if rng.gen_bool(0.05) {
            *v = rng.gen_range(0..classes) as u8;
        }
    }
    LabelMask::new(size, size, labels).unwrap()
}

/// Contour by definition: class-`k` pixels with a 4-neighbour outside the
/// class, the frame counting as outside.
pub fn contour_oracle(m: &LabelMask, k: u8) -> Vec<(i64, i64)> {
    let (h, w) = (m.height as i64, m.width as i64);
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && r < h && c < w && m.at(r as usize, c as usize) == k;
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if inside(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !inside(r + dr, c + dc)) {
                out.push((r, c));
            }
        }
    }
    out
}

pub fn dice_oracle(a: &LabelMask, b: &LabelMask, k: u8) -> f64 {
    let na = a.labels.iter().filter(|&&v| v == k).count();
    let nb = b.labels.iter().filter(|&&v| v == k).count();
    let both = a.labels.iter().zip(&b.labels).filter(|(x, y)| **x == k && **y == k).count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Exhaustive nearest-point distances from every point of `from` to `to`.
fn directed_oracle(from: &[(i64, i64)], to: &[(i64, i64)]) -> Vec<f64> {
    from.iter()
        .map(|&(r, c)| {
            let best = to.iter().map(|&(s, d)| (r - s) * (r - s) + (c - d) * (c - d)).min().expect("nonempty");
            (best as f64).sqrt()
        })
        .collect()
}

/// (hausdorff, assd), or None when either contour is empty.
pub fn distance_oracle(a: &LabelMask, b: &LabelMask, k: u8) -> Option<(f64, f64)> {
    let (ca, cb) = (contour_oracle(a, k), contour_oracle(b, k));
    if ca.is_empty() || cb.is_empty() {
        return None;
    }
    let (dab, dba) = (directed_oracle(&ca, &cb), directed_oracle(&cb, &ca));
    let hd = dab.iter().chain(&dba).fold(0.0f64, |m, &d| m.max(d));
    let assd = (dab.iter().sum::<f64>() + dba.iter().sum::<f64>()) / (ca.len() + cb.len()) as f64;
    Some((hd, assd))
}

/// Ranks with ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}
