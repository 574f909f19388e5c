use crate::scalar::Scalar;
use crate::volume::Shape3;

/// Dense batch of multi-channel volumes laid out as `[n][c][voxel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub dims: Shape3,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, dims: Shape3) -> Self {
        Self {
            n,
            c,
            dims,
            data: vec![T::zero(); n * c * dims.len()],
        }
    }

    pub fn from_vec(n: usize, c: usize, dims: Shape3, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * dims.len(), "tensor buffer size");
        Self { n, c, dims, data }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims.len()
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.dims.len()
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn channel(&self, i: usize, ch: usize) -> &[T] {
        let v = self.voxels();
        let off = (i * self.c + ch) * v;
        &self.data[off..off + v]
    }

    pub fn channel_mut(&mut self, i: usize, ch: usize) -> &mut [T] {
        let v = self.voxels();
        let off = (i * self.c + ch) * v;
        &mut self.data[off..off + v]
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.n == other.n && self.c == other.c && self.dims == other.dims
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_layout(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Zero-pads every sample on the high side of each axis up to `dims`.
    pub fn pad_to(&self, dims: Shape3) -> Self {
        if dims == self.dims {
            return self.clone();
        }
        let mut out = Self::zeros(self.n, self.c, dims);
        let src = self.dims;
        for i in 0..self.n {
            for ch in 0..self.c {
                let s = self.channel(i, ch);
                let d = out.channel_mut(i, ch);
                for z in 0..src.z {
                    for y in 0..src.h {
                        let so = src.index(0, y, z);
                        let doff = dims.index(0, y, z);
                        d[doff..doff + src.w].copy_from_slice(&s[so..so + src.w]);
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`Tensor::pad_to`]: keeps the low corner of size `dims`.
    pub fn crop_to(&self, dims: Shape3) -> Self {
        if dims == self.dims {
            return self.clone();
        }
        let mut out = Self::zeros(self.n, self.c, dims);
        let src = self.dims;
        for i in 0..self.n {
            for ch in 0..self.c {
                let s = self.channel(i, ch);
                let d = out.channel_mut(i, ch);
                for z in 0..dims.z {
                    for y in 0..dims.h {
                        let so = src.index(0, y, z);
                        let doff = dims.index(0, y, z);
                        d[doff..doff + dims.w].copy_from_slice(&s[so..so + dims.w]);
                    }
                }
            }
        }
        out
    }
}
