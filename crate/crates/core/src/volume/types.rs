use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Spatial extent `(W, H, Z)`; voxel `(x, y, z)` lives at `x + W * (y + H * z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub w: usize,
    pub h: usize,
    pub z: usize,
}

impl Shape3 {
    pub const fn new(w: usize, h: usize, z: usize) -> Self {
        Self { w, h, z }
    }

    pub const fn cube(n: usize) -> Self {
        Self { w: n, h: n, z: n }
    }

    pub const fn len(&self) -> usize {
        self.w * self.h * self.z
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.w, self.h, self.z]
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.w && y < self.h && z < self.z);
        x + self.w * (y + self.h * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (i % self.w, (i / self.w) % self.h, i / (self.w * self.h))
    }

    pub fn fits_in(&self, other: &Shape3) -> bool {
        self.w <= other.w && self.h <= other.h && self.z <= other.z
    }

    pub(crate) fn check_positive(&self, what: &str) -> Result<()> {
        if self.w == 0 || self.h == 0 || self.z == 0 {
            return Err(Error::invalid(format!("{what} must be positive on every axis, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.w, self.h, self.z)
    }
}

/// A scalar 3D image with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    shape: Shape3,
    spacing: [f64; 3],
    values: Vec<T>,
}

impl<T: Scalar> Volume<T> {
    pub fn new(shape: Shape3, spacing: [f64; 3], values: Vec<T>) -> Result<Self> {
        shape.check_positive("volume shape")?;
        if values.len() != shape.len() {
            return Err(Error::shape(format!(
                "volume {shape} needs {} values, got {}",
                shape.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at voxel {i}")));
        }
        Ok(Self { shape, spacing, values })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            spacing: [1.0; 3],
            values: vec![T::zero(); shape.len()],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let mut values = Vec::with_capacity(shape.len());
        for z in 0..shape.z {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    values.push(f(x, y, z));
                }
            }
        }
        Self::new(shape, [1.0; 3], values)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.values[self.shape.index(x, y, z)]
    }

    /// Applies `f` voxel-wise. `f` must keep values finite.
    pub(crate) fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            spacing: self.spacing,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        Volume {
            shape: self.shape,
            spacing: self.spacing,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Hard class assignment per voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: Shape3,
    classes: usize,
    values: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: Shape3, classes: usize, values: Vec<u8>) -> Result<Self> {
        shape.check_positive("label shape")?;
        if !(2..=256).contains(&classes) {
            return Err(Error::invalid(format!("class count must be in [2, 256], got {classes}")));
        }
        if values.len() != shape.len() {
            return Err(Error::shape(format!(
                "label map {shape} needs {} values, got {}",
                shape.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|&v| v as usize >= classes) {
            return Err(Error::invalid(format!(
                "voxel {i} has class {} >= {classes}",
                values[i]
            )));
        }
        Ok(Self { shape, classes, values })
    }

    pub fn filled(shape: Shape3, classes: usize, class: u8) -> Result<Self> {
        Self::new(shape, classes, vec![class; shape.len()])
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.values[self.shape.index(x, y, z)]
    }

    /// Voxels whose class is non-zero.
    pub fn foreground(&self) -> VoxelMask {
        VoxelMask::new(self.shape, self.values.iter().map(|&v| v != 0).collect())
    }

    /// Binary mask of a single class.
    pub fn class_mask(&self, class: u8) -> VoxelMask {
        VoxelMask::new(self.shape, self.values.iter().map(|&v| v == class).collect())
    }

    pub fn count(&self, class: u8) -> usize {
        self.values.iter().filter(|&&v| v == class).count()
    }
}

/// Boolean mask over the voxels of a volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelMask {
    shape: Shape3,
    bits: Vec<bool>,
}

impl VoxelMask {
    pub fn new(shape: Shape3, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), shape.len(), "mask length must equal voxel count");
        Self { shape, bits }
    }

    pub fn full(shape: Shape3, value: bool) -> Self {
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.shape.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn not(&self) -> Self {
        Self::new(self.shape, self.bits.iter().map(|b| !b).collect())
    }

    pub fn and(&self, other: &Self) -> Self {
        Self::new(
            self.shape,
            self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        )
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }
}

/// Per-voxel class distribution, stored class-major: `data[k * voxels + v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<T> {
    shape: Shape3,
    classes: usize,
    data: Vec<T>,
}

/// Tolerance on the per-voxel row sum of a [`ProbMap`].
pub const PROB_SUM_TOL: f64 = 1e-5;

impl<T: Scalar> ProbMap<T> {
    /// Validates non-negativity and the row sums.
    pub fn new(shape: Shape3, classes: usize, data: Vec<T>) -> Result<Self> {
        let map = Self::from_raw(shape, classes, data)?;
        let n = shape.len();
        for v in 0..n {
            let mut s = 0.0;
            for k in 0..classes {
                let p = map.data[k * n + v].as_f64();
                if !(p >= 0.0) {
                    return Err(Error::invalid(format!("voxel {v} class {k} has probability {p}")));
                }
                s += p;
            }
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::invalid(format!("voxel {v} probabilities sum to {s}")));
            }
        }
        Ok(map)
    }

    /// Construction checking only sizes. Useful for perturbed maps in
    /// finite-difference checks.
    pub fn from_raw(shape: Shape3, classes: usize, data: Vec<T>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
        }
        if data.len() != shape.len() * classes {
            return Err(Error::shape(format!(
                "prob map {shape}x{classes} needs {} values, got {}",
                shape.len() * classes,
                data.len()
            )));
        }
        Ok(Self { shape, classes, data })
    }

    /// Builds a map from per-voxel rows `rows[v][k]`.
    pub fn from_rows(shape: Shape3, rows: &[Vec<T>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.len() != shape.len() || rows.iter().any(|r| r.len() != classes) {
            return Err(Error::shape("rows must match the voxel count and share a class count"));
        }
        let n = shape.len();
        let mut data = vec![T::zero(); n * classes];
        for (v, row) in rows.iter().enumerate() {
            for (k, &p) in row.iter().enumerate() {
                data[k * n + v] = p;
            }
        }
        Self::new(shape, classes, data)
    }

    /// Exact one-hot encoding of a label map.
    pub fn one_hot(labels: &LabelMap) -> Self {
        let n = labels.shape().len();
        let k = labels.classes();
        let mut data = vec![T::zero(); n * k];
        for (v, &c) in labels.values().iter().enumerate() {
            data[c as usize * n + v] = T::one();
        }
        Self {
            shape: labels.shape(),
            classes: k,
            data,
        }
    }

    pub fn uniform(shape: Shape3, classes: usize) -> Self {
        let p = T::one() / T::lit(classes as f64);
        Self {
            shape,
            classes,
            data: vec![p; shape.len() * classes],
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn voxels(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, v: usize, k: usize) -> T {
        self.data[k * self.shape.len() + v]
    }

    pub fn plane(&self, k: usize) -> &[T] {
        let n = self.shape.len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn row(&self, v: usize) -> Vec<T> {
        (0..self.classes).map(|k| self.get(v, k)).collect()
    }

    /// `(argmax class, max probability)` at voxel `v`; ties resolve to the lower class.
    #[inline]
    pub fn argmax_at(&self, v: usize) -> (usize, T) {
        let mut best = (0, self.get(v, 0));
        for k in 1..self.classes {
            let p = self.get(v, k);
            if p > best.1 {
                best = (k, p);
            }
        }
        best
    }

    pub fn argmax(&self) -> LabelMap {
        let values = (0..self.voxels()).map(|v| self.argmax_at(v).0 as u8).collect();
        LabelMap {
            shape: self.shape,
            classes: self.classes,
            values,
        }
    }

    pub fn confidence(&self) -> Vec<T> {
        (0..self.voxels()).map(|v| self.argmax_at(v).1).collect()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.voxels())
            .map(|v| {
                let s: f64 = (0..self.classes).map(|k| self.get(v, k).as_f64()).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> ProbMap<U> {
        ProbMap {
            shape: self.shape,
            classes: self.classes,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Per-voxel embedding vectors, stored dimension-major: `data[d * voxels + v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap<T> {
    shape: Shape3,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> EmbeddingMap<T> {
    pub fn new(shape: Shape3, dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 || data.len() != shape.len() * dim {
            return Err(Error::shape(format!(
                "embedding map {shape}x{dim} needs {} values, got {}",
                shape.len() * dim,
                data.len()
            )));
        }
        Ok(Self { shape, dim, data })
    }

    pub fn from_rows(shape: Shape3, rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != shape.len() || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("rows must match the voxel count and share a width"));
        }
        let n = shape.len();
        let mut data = vec![T::zero(); n * dim];
        for (v, row) in rows.iter().enumerate() {
            for (d, &e) in row.iter().enumerate() {
                data[d * n + v] = e;
            }
        }
        Self::new(shape, dim, data)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn voxels(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, v: usize, d: usize) -> T {
        self.data[d * self.shape.len() + v]
    }

    pub fn vector(&self, v: usize) -> Vec<T> {
        (0..self.dim).map(|d| self.get(v, d)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_and_coords_agree() {
        let s = Shape3::new(3, 4, 5);
        for i in 0..s.len() {
            let (x, y, z) = s.coords(i);
            assert_eq!(s.index(x, y, z), i);
        }
    }

    #[test]
    fn volume_rejects_non_finite() {
        let s = Shape3::cube(2);
        let mut vals = vec![0.0f32; 8];
        vals[3] = f32::NAN;
        assert!(Volume::new(s, [1.0; 3], vals).is_err());
    }

    #[test]
    fn label_map_rejects_out_of_range_class() {
        assert!(LabelMap::new(Shape3::cube(1), 2, vec![2]).is_err());
        assert!(LabelMap::new(Shape3::cube(1), 1, vec![0]).is_err());
    }

    #[test]
    fn prob_map_checks_row_sums() {
        let s = Shape3::new(2, 1, 1);
        assert!(ProbMap::<f64>::from_rows(s, &[vec![0.3, 0.7], vec![0.5, 0.5]]).is_ok());
        assert!(ProbMap::<f64>::from_rows(s, &[vec![0.3, 0.6], vec![0.5, 0.5]]).is_err());
        assert!(ProbMap::<f64>::from_rows(s, &[vec![-0.1, 1.1], vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let p = ProbMap::<f64>::from_rows(Shape3::cube(1), &[vec![0.5, 0.5]]).unwrap();
        assert_eq!(p.argmax_at(0).0, 0);
    }
}
