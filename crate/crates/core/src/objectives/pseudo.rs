//! Entropy filtering, the disagreement mask, its L1 regularizer and the
//! reliable/unreliable split.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stats::percentile;
use crate::volume::{ProbMap, VoxelMask};

/// Per-voxel `-sum p ln p`, with `0 ln 0 = 0`.
pub fn entropy_map<T: Scalar>(p: &ProbMap<T>) -> Vec<T> {
    let n = p.voxels();
    let mut h = vec![T::zero(); n];
    for k in 0..p.classes() {
        for (hv, &pv) in h.iter_mut().zip(p.plane(k)) {
            if pv > T::zero() {
                *hv -= pv * pv.ln();
            }
        }
    }
    h
}

/// Keeps voxels whose entropy is at most the `gamma`-th percentile (linear
/// interpolation) of the entropy map.
pub fn entropy_filter<T: Scalar>(p: &ProbMap<T>, gamma: f64) -> Result<VoxelMask> {
    if !(0.0..=100.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma must lie in [0, 100], got {gamma}")));
    }
    let h: Vec<f64> = entropy_map(p).into_iter().map(|v| v.as_f64()).collect();
    let threshold = percentile(&h, gamma).expect("non-empty map");
    Ok(VoxelMask::new(p.shape(), h.iter().map(|&v| v <= threshold).collect()))
}

fn same_layout<T: Scalar>(a: &ProbMap<T>, b: &ProbMap<T>) -> Result<()> {
    if a.shape() != b.shape() || a.classes() != b.classes() {
        return Err(Error::shape(format!(
            "prob maps {}x{} vs {}x{}",
            a.shape(),
            a.classes(),
            b.shape(),
            b.classes()
        )));
    }
    Ok(())
}

/// Voxels where both maps are confident above `t` yet their argmax differs.
pub fn diff_mask<T: Scalar>(pa: &ProbMap<T>, pb: &ProbMap<T>, t: f64) -> Result<VoxelMask> {
    same_layout(pa, pb)?;
    let t = T::lit(t);
    let bits = (0..pa.voxels())
        .map(|v| {
            let (ka, ma) = pa.argmax_at(v);
            let (kb, mb) = pb.argmax_at(v);
            ma > t && mb > t && ka != kb
        })
        .collect();
    Ok(VoxelMask::new(pa.shape(), bits))
}

/// `sum |m*pa - m*pb| / max(1, |m|)` and its (sub)gradients w.r.t. `pa` and `pb`.
pub fn reg_loss_grad<T: Scalar>(pa: &ProbMap<T>, pb: &ProbMap<T>, m: &VoxelMask) -> Result<(T, Vec<T>, Vec<T>)> {
    same_layout(pa, pb)?;
    if m.shape() != pa.shape() {
        return Err(Error::shape(format!("mask {} vs prob maps {}", m.shape(), pa.shape())));
    }
    let n = pa.voxels();
    let norm = T::lit(1.0 / m.count().max(1) as f64);
    let mut ga = vec![T::zero(); pa.data().len()];
    let mut gb = vec![T::zero(); pa.data().len()];
    let mut loss = T::zero();
    for k in 0..pa.classes() {
        let (a, b) = (pa.plane(k), pb.plane(k));
        for v in (0..n).filter(|&v| m.get(v)) {
            let d = a[v] - b[v];
            loss += d.abs();
            let s = if d > T::zero() {
                norm
            } else if d < T::zero() {
                -norm
            } else {
                T::zero()
            };
            ga[k * n + v] = s;
            gb[k * n + v] = -s;
        }
    }
    Ok((loss * norm, ga, gb))
}

pub fn reg_loss<T: Scalar>(pa: &ProbMap<T>, pb: &ProbMap<T>, m: &VoxelMask) -> Result<T> {
    Ok(reg_loss_grad(pa, pb, m)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityPartition<T> {
    pub reliable: VoxelMask,
    pub unreliable: VoxelMask,
    /// `max_k p_k` per voxel.
    pub confidence: Vec<T>,
    pub entropy: Vec<T>,
}

impl<T: Scalar> ReliabilityPartition<T> {
    pub fn reliable_fraction(&self) -> f64 {
        self.reliable.count() as f64 / self.confidence.len() as f64
    }
}

/// Reliable iff confidence `>= t`.
pub fn reliability_partition<T: Scalar>(p: &ProbMap<T>, t: f64) -> ReliabilityPartition<T> {
    let confidence = p.confidence();
    let tt = T::lit(t);
    let reliable = VoxelMask::new(p.shape(), confidence.iter().map(|&c| c >= tt).collect());
    ReliabilityPartition {
        unreliable: reliable.not(),
        reliable,
        confidence,
        entropy: entropy_map(p),
    }
}
