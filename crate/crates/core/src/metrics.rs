//! Dice, Jaccard, 95th-percentile Hausdorff and average surface distance, in
//! voxel units, plus per-case aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{mean_std, percentile_sorted};
use crate::volume::{LabelMap, Shape3, VoxelMask};

fn check(a: &VoxelMask, b: &VoxelMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("masks {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

fn overlap(a: &VoxelMask, b: &VoxelMask) -> (usize, usize, usize) {
    let mut inter = 0;
    for (x, y) in a.bits().iter().zip(b.bits()) {
        inter += usize::from(*x && *y);
    }
    (inter, a.count(), b.count())
}

/// `2|a∩b| / (|a| + |b|)`; two empty masks score 1.
pub fn dice_score(a: &VoxelMask, b: &VoxelMask) -> Result<f64> {
    check(a, b)?;
    let (i, na, nb) = overlap(a, b);
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * i as f64 / (na + nb) as f64 })
}

/// `|a∩b| / |a∪b|`; two empty masks score 1.
pub fn jaccard_score(a: &VoxelMask, b: &VoxelMask) -> Result<f64> {
    check(a, b)?;
    let (i, na, nb) = overlap(a, b);
    let union = na + nb - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Foreground voxels with at least one face neighbour that is background or
/// outside the volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurfaceSet {
    pub shape: Shape3,
    pub voxels: Vec<[usize; 3]>,
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

pub fn extract_surface(mask: &VoxelMask) -> SurfaceSet {
    let s = mask.shape();
    let mut voxels = Vec::new();
    for z in 0..s.z {
        for y in 0..s.h {
            for x in 0..s.w {
                if !mask.at(x, y, z) {
                    continue;
                }
                let boundary = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == s.w
                    || y + 1 == s.h
                    || z + 1 == s.z
                    || !mask.at(x - 1, y, z)
                    || !mask.at(x + 1, y, z)
                    || !mask.at(x, y - 1, z)
                    || !mask.at(x, y + 1, z)
                    || !mask.at(x, y, z - 1)
                    || !mask.at(x, y, z + 1);
                if boundary {
                    voxels.push([x, y, z]);
                }
            }
        }
    }
    SurfaceSet { shape: s, voxels }
}

/// One dimension of the exact squared Euclidean distance transform
/// (lower envelope of parabolas). `f` holds squared distances, `INF` where
/// no site has been reached.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], zs: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                zs[0] = f64::NEG_INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= zs[k as usize] {
                k -= 1;
            } else {
                k += 1;
                v[k as usize] = q;
                zs[k as usize] = s;
                break;
            }
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while j < k as usize && zs[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared distance from every voxel to the nearest site.
fn squared_distance_to(sites: &SurfaceSet) -> Vec<f64> {
    let s = sites.shape;
    let mut g = vec![f64::INFINITY; s.len()];
    for &[x, y, z] in &sites.voxels {
        g[s.index(x, y, z)] = 0.0;
    }
    let longest = s.w.max(s.h).max(s.z);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut zs = vec![0.0; longest + 1];
    let dims = s.as_array();
    let strides = [1, s.w, s.w * s.h];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        for start in 0..s.len() {
            let c = s.coords(start);
            if [c.0, c.1, c.2][axis] != 0 {
                continue;
            }
            for i in 0..n {
                line[i] = g[start + i * stride];
            }
            edt_1d(&line[..n], &mut out[..n], &mut v, &mut zs);
            for i in 0..n {
                g[start + i * stride] = out[i];
            }
        }
    }
    g
}

/// Both directed sets of surface-to-surface distances, pooled.
pub fn pooled_surface_distances(a: &VoxelMask, b: &VoxelMask) -> Result<Option<Vec<f64>>> {
    check(a, b)?;
    let sa = extract_surface(a);
    let sb = extract_surface(b);
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    let s = a.shape();
    let da = squared_distance_to(&sa);
    let db = squared_distance_to(&sb);
    let mut out = Vec::with_capacity(sa.len() + sb.len());
    out.extend(sa.voxels.iter().map(|&[x, y, z]| db[s.index(x, y, z)].sqrt()));
    out.extend(sb.voxels.iter().map(|&[x, y, z]| da[s.index(x, y, z)].sqrt()));
    Ok(Some(out))
}

/// A surface distance, or a flag that one of the masks was empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceDistance {
    Value(f64),
    Degenerate,
}

impl SurfaceDistance {
    pub fn value(self) -> Option<f64> {
        match self {
            SurfaceDistance::Value(v) => Some(v),
            SurfaceDistance::Degenerate => None,
        }
    }

    pub fn value_or(self, sentinel: f64) -> f64 {
        self.value().unwrap_or(sentinel)
    }
}

fn summarize(a: &VoxelMask, b: &VoxelMask, f: impl Fn(&mut Vec<f64>) -> f64) -> Result<SurfaceDistance> {
    Ok(match pooled_surface_distances(a, b)? {
        Some(mut d) => SurfaceDistance::Value(f(&mut d)),
        None => SurfaceDistance::Degenerate,
    })
}

/// 95th percentile (linear interpolation) of the pooled surface distances.
pub fn hd95(a: &VoxelMask, b: &VoxelMask) -> Result<SurfaceDistance> {
    summarize(a, b, |d| {
        d.sort_by(f64::total_cmp);
        percentile_sorted(d, 95.0)
    })
}

/// Mean of the pooled surface distances.
pub fn asd(a: &VoxelMask, b: &VoxelMask) -> Result<SurfaceDistance> {
    summarize(a, b, |d| d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Value reported for 95HD/ASD when a mask is empty.
    pub sentinel: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { sentinel: -1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub jaccard: f64,
    /// Sentinel when `degenerate`.
    pub hd95: f64,
    pub asd: f64,
    pub degenerate: bool,
}

/// Metrics of a prediction against ground truth on the foreground (label > 0).
pub fn segment_metrics(pred: &LabelMap, gt: &LabelMap, cfg: &MetricsConfig) -> Result<SegMetrics> {
    let (a, b) = (pred.foreground(), gt.foreground());
    let h = hd95(&a, &b)?;
    let s = asd(&a, &b)?;
    Ok(SegMetrics {
        dice: dice_score(&a, &b)?,
        jaccard: jaccard_score(&a, &b)?,
        hd95: h.value_or(cfg.sentinel),
        asd: s.value_or(cfg.sentinel),
        degenerate: h == SurfaceDistance::Degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ids: Vec<String>,
    pub cases: Vec<SegMetrics>,
    pub dice: MeanStd,
    pub jaccard: MeanStd,
    /// Over non-degenerate cases only.
    pub hd95: MeanStd,
    pub asd: MeanStd,
    pub degenerate: usize,
}

pub fn evaluate_cases(
    ids: &[String],
    predictions: &[LabelMap],
    truths: &[LabelMap],
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    if predictions.is_empty() || predictions.len() != truths.len() || ids.len() != truths.len() {
        return Err(Error::invalid(format!(
            "need matching non-empty case lists, got {} ids, {} predictions, {} ground truths",
            ids.len(),
            predictions.len(),
            truths.len()
        )));
    }
    let cases: Vec<SegMetrics> = predictions
        .iter()
        .zip(truths)
        .map(|(p, g)| segment_metrics(p, g, cfg))
        .collect::<Result<_>>()?;
    let col = |f: fn(&SegMetrics) -> f64, all: bool| -> MeanStd {
        let v: Vec<f64> = cases.iter().filter(|c| all || !c.degenerate).map(f).collect();
        MeanStd::of(&v)
    };
    Ok(MetricsReport {
        ids: ids.to_vec(),
        dice: col(|c| c.dice, true),
        jaccard: col(|c| c.jaccard, true),
        hd95: col(|c| c.hd95, false),
        asd: col(|c| c.asd, false),
        degenerate: cases.iter().filter(|c| c.degenerate).count(),
        cases,
    })
}

impl MetricsReport {
    /// Text table: one row per case, then mean, std and a percent row.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let w = self.ids.iter().map(String::len).max().unwrap_or(4).max(8);
        writeln!(s, "# distances in voxels; std = population std over cases").unwrap();
        writeln!(s, "# 95HD/ASD statistics exclude {} degenerate case(s)", self.degenerate).unwrap();
        writeln!(s, "{:<w$}  {:>9}  {:>9}  {:>9}  {:>9}", "case", "Dice↑", "Jaccard↑", "95HD↓", "ASD↓").unwrap();
        for (id, c) in self.ids.iter().zip(&self.cases) {
            let flag = if c.degenerate { "  degenerate" } else { "" };
            writeln!(s, "{id:<w$}  {:>9.4}  {:>9.4}  {:>9.3}  {:>9.3}{flag}", c.dice, c.jaccard, c.hd95, c.asd).unwrap();
        }
        let row = |s: &mut String, name: &str, f: fn(&MeanStd) -> f64| {
            writeln!(
                s,
                "{name:<w$}  {:>9.4}  {:>9.4}  {:>9.3}  {:>9.3}",
                f(&self.dice),
                f(&self.jaccard),
                f(&self.hd95),
                f(&self.asd)
            )
            .unwrap();
        };
        row(&mut s, "mean", |m| m.mean);
        row(&mut s, "std", |m| m.std);
        writeln!(
            s,
            "{:<w$}  Dice(%) {:.2} ± {:.3}  Jaccard(%) {:.2} ± {:.3}  (fraction-scale std {:.4} / {:.4})",
            "percent",
            100.0 * self.dice.mean,
            100.0 * self.dice.std,
            100.0 * self.jaccard.mean,
            100.0 * self.jaccard.std,
            self.dice.std,
            self.jaccard.std,
        )
        .unwrap();
        s
    }
}
