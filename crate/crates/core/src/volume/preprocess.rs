//! Intensity windowing, normalization, ROI cropping and random patch sampling.

use rand::Rng;

use super::types::{LabelMap, Shape3, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Soft-tissue CT window in Hounsfield units.
pub const SOFT_TISSUE_HU: (f64, f64) = (-120.0, 240.0);

/// Clamps every voxel into `[lo, hi]`.
pub fn hu_window<T: Scalar>(v: &Volume<T>, lo: f64, hi: f64) -> Result<Volume<T>> {
    if !(lo < hi) {
        return Err(Error::invalid(format!("window requires lo < hi, got ({lo}, {hi})")));
    }
    let (lo, hi) = (T::lit(lo), T::lit(hi));
    Ok(v.map(|x| x.max(lo).min(hi)))
}

/// Per-volume z-score. A constant volume maps to all zeros.
pub fn normalize<T: Scalar>(v: &Volume<T>) -> Volume<T> {
    let n = v.values().len() as f64;
    let mean = v.values().iter().map(|x| x.as_f64()).sum::<f64>() / n;
    let var = v
        .values()
        .iter()
        .map(|x| {
            let d = x.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return v.map(|_| T::zero());
    }
    v.map(|x| T::lit((x.as_f64() - mean) / std))
}

/// Inclusive bounding box `[lo, hi]` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn size(&self) -> Shape3 {
        Shape3::new(
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        )
    }
}

/// Tight box around the non-zero labels.
pub fn foreground_box(l: &LabelMap) -> Option<BoundingBox> {
    let s = l.shape();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &c) in l.values().iter().enumerate() {
        if c == 0 {
            continue;
        }
        any = true;
        let (x, y, z) = s.coords(i);
        for (a, p) in [x, y, z].into_iter().enumerate() {
            lo[a] = lo[a].min(p);
            hi[a] = hi[a].max(p);
        }
    }
    any.then_some(BoundingBox { lo, hi })
}

/// Copies the sub-block starting at `origin` of size `size`.
pub fn extract<T: Scalar>(v: &Volume<T>, origin: [usize; 3], size: Shape3) -> Volume<T> {
    let s = v.shape();
    Volume::from_fn(size, |x, y, z| v.values()[s.index(origin[0] + x, origin[1] + y, origin[2] + z)])
        .expect("sub-block of a valid volume")
        .with_spacing(v.spacing())
}

pub fn extract_labels(l: &LabelMap, origin: [usize; 3], size: Shape3) -> LabelMap {
    let s = l.shape();
    let mut values = Vec::with_capacity(size.len());
    for z in 0..size.z {
        for y in 0..size.h {
            for x in 0..size.w {
                values.push(l.values()[s.index(origin[0] + x, origin[1] + y, origin[2] + z)]);
            }
        }
    }
    LabelMap::new(size, l.classes(), values).expect("sub-block of a valid label map")
}

/// Crops image and labels to the foreground box grown by `margin` voxels per
/// side, clipped to the volume.
pub fn crop_to_roi<T: Scalar>(v: &Volume<T>, l: &LabelMap, margin: usize) -> Result<(Volume<T>, LabelMap)> {
    if v.shape() != l.shape() {
        return Err(Error::shape(format!("image {} vs labels {}", v.shape(), l.shape())));
    }
    let b = foreground_box(l).ok_or(Error::EmptyForeground)?;
    let dims = v.shape().as_array();
    let mut lo = [0; 3];
    let mut hi = [0; 3];
    for a in 0..3 {
        lo[a] = b.lo[a].saturating_sub(margin);
        hi[a] = (b.hi[a] + margin).min(dims[a] - 1);
    }
    let size = BoundingBox { lo, hi }.size();
    Ok((extract(v, lo, size), extract_labels(l, lo, size)))
}

/// Low-side padding that centres `shape` inside `max(shape, target)`.
pub fn symmetric_padding(shape: Shape3, target: Shape3) -> ([usize; 3], Shape3) {
    let s = shape.as_array();
    let t = target.as_array();
    let mut before = [0; 3];
    let mut out = [0; 3];
    for a in 0..3 {
        let need = t[a].saturating_sub(s[a]);
        before[a] = need / 2;
        out[a] = s[a] + need;
    }
    (before, Shape3::from_array(out))
}

/// Zero-pads symmetrically so every axis is at least `target`.
pub fn pad_symmetric<T: Scalar>(v: &Volume<T>, target: Shape3) -> (Volume<T>, [usize; 3]) {
    let (before, out) = symmetric_padding(v.shape(), target);
    if out == v.shape() {
        return (v.clone(), before);
    }
    let s = v.shape();
    let padded = Volume::from_fn(out, |x, y, z| {
        let (px, py, pz) = (x.wrapping_sub(before[0]), y.wrapping_sub(before[1]), z.wrapping_sub(before[2]));
        if px < s.w && py < s.h && pz < s.z {
            v.get(px, py, pz)
        } else {
            T::zero()
        }
    })
    .expect("padded volume")
    .with_spacing(v.spacing());
    (padded, before)
}

pub fn pad_labels_symmetric(l: &LabelMap, target: Shape3) -> LabelMap {
    let (before, out) = symmetric_padding(l.shape(), target);
    if out == l.shape() {
        return l.clone();
    }
    let s = l.shape();
    let mut values = vec![0u8; out.len()];
    for z in 0..s.z {
        for y in 0..s.h {
            for x in 0..s.w {
                values[out.index(x + before[0], y + before[1], z + before[2])] = l.get(x, y, z);
            }
        }
    }
    LabelMap::new(out, l.classes(), values).expect("padded labels")
}

/// A cropped training patch and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T> {
    pub image: Volume<T>,
    pub label: Option<LabelMap>,
    /// Origin in the (possibly padded) source volume.
    pub origin: [usize; 3],
}

/// Crops a patch of `size` at a uniformly drawn origin; image and labels
/// share the origin. Volumes smaller than `size` are zero-padded first.
pub fn random_crop<T: Scalar, R: Rng>(
    v: &Volume<T>,
    l: Option<&LabelMap>,
    size: Shape3,
    rng: &mut R,
) -> Result<Patch<T>> {
    size.check_positive("patch size")?;
    if let Some(l) = l {
        if l.shape() != v.shape() {
            return Err(Error::shape(format!("image {} vs labels {}", v.shape(), l.shape())));
        }
    }
    let (image, _) = pad_symmetric(v, size);
    let label = l.map(|l| pad_labels_symmetric(l, size));
    let s = image.shape().as_array();
    let p = size.as_array();
    let mut origin = [0; 3];
    for a in 0..3 {
        origin[a] = rng.gen_range(0..=s[a] - p[a]);
    }
    Ok(Patch {
        image: extract(&image, origin, size),
        label: label.map(|l| extract_labels(&l, origin, size)),
        origin,
    })
}
