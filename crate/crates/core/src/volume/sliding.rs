//! Sliding-window planning and overlap-averaging fusion.

use super::preprocess::symmetric_padding;
use super::types::{ProbMap, Shape3};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Window origins over a (possibly padded) volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlidingPlan {
    pub patch: Shape3,
    pub stride: Shape3,
    /// Shape of the volume the origins refer to (input padded to at least `patch`).
    pub padded: Shape3,
    /// Low-side padding applied to the input on each axis.
    pub offset: [usize; 3],
    pub origins: Vec<[usize; 3]>,
}

/// Origins `0, s, 2s, ...` with a final origin clamped to `len - patch`.
pub fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    debug_assert!(patch <= len && stride >= 1);
    let mut out = vec![0];
    let mut o = 0;
    while o + patch < len {
        o += stride;
        if o + patch >= len {
            out.push(len - patch);
            break;
        }
        out.push(o);
    }
    out
}

pub fn sliding_window_plan(shape: Shape3, patch: Shape3, stride: Shape3) -> Result<SlidingPlan> {
    shape.check_positive("volume shape")?;
    patch.check_positive("patch size")?;
    stride.check_positive("stride")?;
    if stride.w > patch.w || stride.h > patch.h || stride.z > patch.z {
        return Err(Error::invalid(format!(
            "stride {stride:?} exceeds patch {patch:?} and would leave voxels uncovered"
        )));
    }
    let (offset, padded) = symmetric_padding(shape, patch);
    let p = patch.as_array();
    let s = stride.as_array();
    let d = padded.as_array();
    let axes: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(d[a], p[a], s[a])).collect();
    let mut origins = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &z in &axes[2] {
        for &y in &axes[1] {
            for &x in &axes[0] {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(SlidingPlan {
        patch,
        stride,
        padded,
        offset,
        origins,
    })
}

/// Averages window probabilities into a map of `shape`.
pub fn stitch<T: Scalar>(windows: &[([usize; 3], ProbMap<T>)], shape: Shape3) -> Result<ProbMap<T>> {
    let classes = windows
        .first()
        .map(|(_, p)| p.classes())
        .ok_or_else(|| Error::invalid("stitch needs at least one window"))?;
    let n = shape.len();
    let mut sum = vec![0.0f64; n * classes];
    let mut hits = vec![0u32; n];
    for (origin, p) in windows {
        let ps = p.shape();
        if p.classes() != classes {
            return Err(Error::shape(format!("window with {} classes, expected {classes}", p.classes())));
        }
        if origin[0] + ps.w > shape.w || origin[1] + ps.h > shape.h || origin[2] + ps.z > shape.z {
            return Err(Error::shape(format!("window {ps} at {origin:?} leaves volume {shape}")));
        }
        for z in 0..ps.z {
            for y in 0..ps.h {
                for x in 0..ps.w {
                    let src = ps.index(x, y, z);
                    let dst = shape.index(origin[0] + x, origin[1] + y, origin[2] + z);
                    hits[dst] += 1;
                    for k in 0..classes {
                        sum[k * n + dst] += p.get(src, k).as_f64();
                    }
                }
            }
        }
    }
    if let Some(v) = hits.iter().position(|&h| h == 0) {
        return Err(Error::Uncovered(v));
    }
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, s)| T::lit(s / hits[i % n] as f64))
        .collect();
    ProbMap::new(shape, classes, data)
}

/// Copies the `shape` block at `offset` out of a larger map.
pub fn crop_probs<T: Scalar>(p: &ProbMap<T>, offset: [usize; 3], shape: Shape3) -> ProbMap<T> {
    if offset == [0; 3] && shape == p.shape() {
        return p.clone();
    }
    let src = p.shape();
    let k = p.classes();
    let n = shape.len();
    let mut data = vec![T::zero(); n * k];
    for c in 0..k {
        let plane = p.plane(c);
        for z in 0..shape.z {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    data[c * n + shape.index(x, y, z)] = plane[src.index(x + offset[0], y + offset[1], z + offset[2])];
                }
            }
        }
    }
    ProbMap::from_raw(shape, k, data).expect("sub-block of a valid map")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window_when_shape_equals_patch() {
        let p = sliding_window_plan(Shape3::cube(8), Shape3::cube(8), Shape3::cube(3)).unwrap();
        assert_eq!(p.origins, vec![[0, 0, 0]]);
    }

    #[test]
    fn clamp_to_edge_enumeration() {
        assert_eq!(axis_origins(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(axis_origins(8, 4, 4), vec![0, 4]);
        assert_eq!(axis_origins(4, 4, 1), vec![0]);
        assert_eq!(axis_origins(5, 4, 9), vec![0, 1]);
    }

    #[test]
    fn plan_covers_every_voxel() {
        let shape = Shape3::new(40, 40, 20);
        let plan = sliding_window_plan(shape, Shape3::cube(16), Shape3::cube(8)).unwrap();
        let mut covered = vec![false; shape.len()];
        for o in &plan.origins {
            for z in 0..16 {
                for y in 0..16 {
                    for x in 0..16 {
                        covered[shape.index(o[0] + x, o[1] + y, o[2] + z)] = true;
                    }
                }
            }
        }
        assert!(covered.iter().all(|&c| c));
        assert!(sliding_window_plan(shape, Shape3::cube(16), Shape3::new(0, 1, 1)).is_err());
    }

    #[test]
    fn small_volume_is_padded_for_planning() {
        let plan = sliding_window_plan(Shape3::new(6, 10, 4), Shape3::cube(8), Shape3::cube(4)).unwrap();
        assert_eq!(plan.padded, Shape3::new(8, 10, 8));
        assert_eq!(plan.offset, [1, 0, 2]);
        assert_eq!(plan.origins.len(), 2);
    }

    #[test]
    fn stitch_averages() {
        let s = Shape3::new(3, 1, 1);
        let win = Shape3::new(2, 1, 1);
        let a = ProbMap::<f64>::from_rows(win, &[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let b = ProbMap::<f64>::from_rows(win, &[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let out = stitch(&[([0, 0, 0], a), ([1, 0, 0], b)], s).unwrap();
        assert_eq!(out.row(0), vec![1.0, 0.0]);
        assert_eq!(out.row(1), vec![0.5, 0.5]);
        assert_eq!(out.row(2), vec![0.0, 1.0]);

        let c = ProbMap::<f64>::from_rows(win, &[vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        let out = stitch(&[([0, 0, 0], c.clone()), ([1, 0, 0], c.clone())], s).unwrap();
        for v in 0..3 {
            assert!((out.get(v, 0) - 0.3).abs() < 1e-12);
        }
        assert!(matches!(stitch(&[([0, 0, 0], c.clone())], s), Err(Error::Uncovered(2))));
        assert_eq!(stitch(&[([0, 0, 0], c.clone())], win).unwrap(), c);
    }
}
