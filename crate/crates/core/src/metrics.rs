//! Overlap and contour-distance metrics between label masks.
//!
//! Contours live on the pixel lattice: a pixel of class k is on the contour
//! when at least one of its 4-neighbours is not class k, the image border
//! counting as outside.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::{LabelMask, NUM_CLASSES};

fn check_pair(a: &LabelMask, b: &LabelMask, op: &'static str) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(op, format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    Ok(())
}

/// Dice overlap of class `k`; 1 when both masks lack the class.
pub fn dice(a: &LabelMask, b: &LabelMask, k: u8) -> Result<f64> {
    check_pair(a, b, "dice")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        na += (x == k) as usize;
        nb += (y == k) as usize;
        both += (x == k && y == k) as usize;
    }
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * both as f64 / (na + nb) as f64 })
}

/// Contour pixels of class `k` as (row, col), in scan order.
pub fn contour(mask: &LabelMask, k: u8) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask.at(r, c) != k {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || mask.at(r - 1, c) != k
                || mask.at(r + 1, c) != k
                || mask.at(r, c - 1) != k
                || mask.at(r, c + 1) != k;
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// Exact Euclidean distance transform to the nearest point of `points` on an
/// h x w grid (two-pass lower-envelope algorithm, squared distances).
fn distance_map(points: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    const INF: f64 = f64::INFINITY;
    let mut f = vec![INF; h * w];
    for &(r, c) in points {
        f[r * w + c] = 0.0;
    }
    let mut tmp = vec![INF; h * w];
    for c in 0..w {
        let col: Vec<f64> = (0..h).map(|r| f[r * w + c]).collect();
        for (r, v) in edt_1d(&col).into_iter().enumerate() {
            tmp[r * w + c] = v;
        }
    }
    for r in 0..h {
        let row = &tmp[r * w..(r + 1) * w];
        for (c, v) in edt_1d(row).into_iter().enumerate() {
            f[r * w + c] = v;
        }
    }
    f
}

/// One-dimensional squared distance transform of a sampled function.
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if sites.is_empty() {
        return vec![f64::INFINITY; n];
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let inter = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for &q in &sites {
        while let Some(&p) = v.last() {
            let s = inter(q, p);
            if s <= z[z.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            z.clear();
            z.push(f64::NEG_INFINITY);
        } else {
            z.push(inter(q, *v.last().unwrap()));
        }
        v.push(q);
    }
    z.push(f64::INFINITY);
    let mut out = vec![0.0; n];
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
    out
}

/// Directed distances from every point of `from` to its nearest point of `to`.
fn directed(from: &[(usize, usize)], to: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let dist = distance_map(to, h, w);
    from.iter().map(|&(r, c)| dist[r * w + c].sqrt()).collect()
}

fn contours(a: &LabelMask, b: &LabelMask, k: u8, op: &'static str) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    check_pair(a, b, op)?;
    let (ca, cb) = (contour(a, k), contour(b, k));
    if ca.is_empty() || cb.is_empty() {
        return Err(Error::UndefinedMetric(format!("{op}: class {k} is empty in {}", if ca.is_empty() { "the first mask" } else { "the second mask" })));
    }
    Ok((ca, cb))
}

/// Symmetric Hausdorff distance between the class-`k` contours, multiplied by `spacing`.
pub fn hausdorff(a: &LabelMask, b: &LabelMask, k: u8, spacing: Option<f64>) -> Result<f64> {
    let (ca, cb) = contours(a, b, k, "hausdorff")?;
    let (h, w) = (a.height, a.width);
    let dab = directed(&ca, &cb, h, w).into_iter().fold(0.0, f64::max);
    let dba = directed(&cb, &ca, h, w).into_iter().fold(0.0, f64::max);
    Ok(dab.max(dba) * spacing.unwrap_or(1.0))
}

/// Average symmetric surface distance between the class-`k` contours.
pub fn assd(a: &LabelMask, b: &LabelMask, k: u8, spacing: Option<f64>) -> Result<f64> {
    let (ca, cb) = contours(a, b, k, "assd")?;
    let (h, w) = (a.height, a.width);
    let total: f64 = directed(&ca, &cb, h, w).iter().sum::<f64>() + directed(&cb, &ca, h, w).iter().sum::<f64>();
    Ok(total / (ca.len() + cb.len()) as f64 * spacing.unwrap_or(1.0))
}

/// Metrics of one class for one mask pair. Distances are `None` when a
/// contour is empty (the metric is undefined for that pair).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: u8,
    pub dsc: f64,
    pub hd: Option<f64>,
    pub assd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub pair_id: String,
    pub classes: Vec<ClassMetrics>,
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl MetricReport {
    /// Evaluate every foreground class of `predicted` against `truth`.
    pub fn compute(pair_id: impl Into<String>, predicted: &LabelMask, truth: &LabelMask, spacing: Option<f64>) -> Result<Self> {
        let classes = (1..NUM_CLASSES as u8)
            .map(|k| {
                Ok(ClassMetrics {
                    class: k,
                    dsc: dice(predicted, truth, k)?,
                    hd: optional(hausdorff(predicted, truth, k, spacing))?,
                    assd: optional(assd(predicted, truth, k, spacing))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MetricReport { pair_id: pair_id.into(), classes })
    }

    /// Unweighted mean Dice over foreground classes.
    pub fn mean_dsc(&self) -> f64 {
        self.classes.iter().map(|c| c.dsc).sum::<f64>() / self.classes.len() as f64
    }

    pub fn mean_hd(&self) -> Option<f64> {
        mean_defined(self.classes.iter().map(|c| c.hd))
    }

    pub fn mean_assd(&self) -> Option<f64> {
        mean_defined(self.classes.iter().map(|c| c.assd))
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// CSV with one row per (pair, class) and per-pair mean rows (class "mean"),
/// followed by summary rows "mean" and "std" over the per-pair means.
pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("pair_id,class,dsc,hd,assd\n");
    let (mut dscs, mut hds, mut assds) = (Vec::new(), Vec::new(), Vec::new());
    for r in reports {
        for c in &r.classes {
            let _ = writeln!(s, "{},{},{:.6},{},{}", r.pair_id, c.class, c.dsc, cell(c.hd), cell(c.assd));
        }
        let _ = writeln!(s, "{},mean,{:.6},{},{}", r.pair_id, r.mean_dsc(), cell(r.mean_hd()), cell(r.mean_assd()));
        dscs.push(r.mean_dsc());
        hds.extend(r.mean_hd());
        assds.extend(r.mean_assd());
    }
    let (md, sd) = mean_std(&dscs);
    let (mh, sh) = mean_std(&hds);
    let (ma, sa) = mean_std(&assds);
    let _ = writeln!(s, "summary,mean,{md:.6},{mh:.6},{ma:.6}");
    let _ = writeln!(s, "summary,std,{sd:.6},{sh:.6},{sa:.6}");
    s
}
