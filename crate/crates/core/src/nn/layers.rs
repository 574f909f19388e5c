//! Convolution, transposed convolution and instance normalization with
//! hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::kernels;
use super::tensor::Tensor;
use crate::scalar::Scalar;
use crate::volume::Shape3;

/// A trainable buffer with its gradient and momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
    /// Whether weight decay applies (normalization parameters are exempt).
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>, decay: bool) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![T::zero(); n],
            velocity: vec![T::zero(); n],
            decay,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

pub(crate) fn gaussian<T: Scalar, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dims(&self, d: Shape3) -> Shape3 {
        let f = |n: usize| (n + 2 * self.pad - self.k) / self.stride + 1;
        Shape3::new(f(d.w), f(d.h), f(d.z))
    }
}

/// Unfolds one `[cin][voxel]` sample into `[cin * k^3][out voxel]`.
fn im2col<T: Scalar>(src: &[T], cin: usize, din: Shape3, g: ConvGeom, dout: Shape3, col: &mut [T]) {
    let k = g.k;
    let nout = dout.len();
    let p = g.pad as isize;
    let s = g.stride as isize;
    for ci in 0..cin {
        let plane = &src[ci * din.len()..(ci + 1) * din.len()];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let dst = &mut col[row * nout..(row + 1) * nout];
                    for zo in 0..dout.z {
                        let zi = zo as isize * s + kz as isize - p;
                        for yo in 0..dout.h {
                            let yi = yo as isize * s + ky as isize - p;
                            let seg = &mut dst[dout.index(0, yo, zo)..][..dout.w];
                            if zi < 0 || zi >= din.z as isize || yi < 0 || yi >= din.h as isize {
                                seg.iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            let base = din.index(0, yi as usize, zi as usize);
                            let line = &plane[base..base + din.w];
                            if s == 1 {
                                // xi = xo + kx - p
                                let off = kx as isize - p;
                                let lo = (-off).max(0) as usize;
                                let hi = ((din.w as isize - off).min(dout.w as isize)).max(lo as isize) as usize;
                                seg[..lo].iter_mut().for_each(|v| *v = T::zero());
                                if hi > lo {
                                    let a = (lo as isize + off) as usize;
                                    seg[lo..hi].copy_from_slice(&line[a..a + (hi - lo)]);
                                }
                                seg[hi..].iter_mut().for_each(|v| *v = T::zero());
                            } else {
                                for (xo, v) in seg.iter_mut().enumerate() {
                                    let xi = xo as isize * s + kx as isize - p;
                                    *v = if xi >= 0 && xi < din.w as isize {
                                        line[xi as usize]
                                    } else {
                                        T::zero()
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `[cin][voxel]` sample.
fn col2im<T: Scalar>(col: &[T], cin: usize, din: Shape3, g: ConvGeom, dout: Shape3, dst: &mut [T]) {
    let k = g.k;
    let nout = dout.len();
    let p = g.pad as isize;
    let s = g.stride as isize;
    for ci in 0..cin {
        let plane = &mut dst[ci * din.len()..(ci + 1) * din.len()];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let src = &col[row * nout..(row + 1) * nout];
                    for zo in 0..dout.z {
                        let zi = zo as isize * s + kz as isize - p;
                        if zi < 0 || zi >= din.z as isize {
                            continue;
                        }
                        for yo in 0..dout.h {
                            let yi = yo as isize * s + ky as isize - p;
                            if yi < 0 || yi >= din.h as isize {
                                continue;
                            }
                            let seg = &src[dout.index(0, yo, zo)..][..dout.w];
                            let base = din.index(0, yi as usize, zi as usize);
                            let line = &mut plane[base..base + din.w];
                            if s == 1 {
                                let off = kx as isize - p;
                                let lo = (-off).max(0) as usize;
                                let hi = ((din.w as isize - off).min(dout.w as isize)).max(lo as isize) as usize;
                                if hi > lo {
                                    let a = (lo as isize + off) as usize;
                                    for (d, &v) in line[a..a + (hi - lo)].iter_mut().zip(&seg[lo..hi]) {
                                        *d += v;
                                    }
                                }
                            } else {
                                for (xo, &v) in seg.iter().enumerate() {
                                    let xi = xo as isize * s + kx as isize - p;
                                    if xi >= 0 && xi < din.w as isize {
                                        line[xi as usize] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3D convolution with weights `[cout][cin * k^3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, geom: ConvGeom, gain: f64, rng: &mut R) -> Self {
        let fan_in = cin * geom.k.pow(3);
        let std = (gain / fan_in as f64).sqrt();
        Self {
            cin,
            cout,
            geom,
            weight: Param::new(gaussian(rng, cout * fan_in, std), true),
            bias: Param::new(vec![T::zero(); cout], true),
        }
    }

    fn is_same3(&self) -> bool {
        self.geom == ConvGeom { k: 3, stride: 1, pad: 1 }
    }

    fn is_pointwise(&self) -> bool {
        self.geom.k == 1 && self.geom.stride == 1 && self.geom.pad == 0
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        if self.is_same3() {
            let mut out = Tensor::zeros(x.n, self.cout, x.dims);
            for i in 0..x.n {
                let xp = kernels::pad_planes(x.sample(i), self.cin, x.dims);
                let o = out.sample_mut(i);
                kernels::conv3_same(&xp, self.cin, x.dims, &self.weight.value, Some(&self.bias.value), self.cout, o);
            }
            return out;
        }
        let dout = self.geom.out_dims(x.dims);
        let nout = dout.len();
        let kk = self.cin * self.geom.k.pow(3);
        let mut out = Tensor::zeros(x.n, self.cout, dout);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * nout] };
        for i in 0..x.n {
            let o = out.sample_mut(i);
            for (co, chunk) in o.chunks_mut(nout).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.value[co]);
            }
            let rhs: &[T] = if self.is_pointwise() {
                x.sample(i)
            } else {
                im2col(x.sample(i), self.cin, x.dims, self.geom, dout, &mut col);
                &col
            };
            T::gemm(self.cout, kk, nout, &self.weight.value, false, rhs, false, o, true);
        }
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when requested.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        if self.is_same3() {
            return self.backward_same3(x, dy, need_dx);
        }
        let dout = dy.dims;
        let nout = dout.len();
        let kk = self.cin * self.geom.k.pow(3);
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, self.cin, x.dims));
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * nout] };
        let mut dcol = if need_dx && !self.is_pointwise() { vec![T::zero(); kk * nout] } else { Vec::new() };
        for i in 0..x.n {
            let g = dy.sample(i);
            for (co, chunk) in g.chunks(nout).enumerate() {
                let s: T = chunk.iter().copied().sum();
                self.bias.grad[co] += s;
            }
            let rhs: &[T] = if self.is_pointwise() {
                x.sample(i)
            } else {
                im2col(x.sample(i), self.cin, x.dims, self.geom, dout, &mut col);
                &col
            };
            // dW += dY * col^T
            T::gemm(self.cout, nout, kk, g, false, rhs, true, &mut self.weight.grad, true);
            if let Some(dx) = dx.as_mut() {
                if self.is_pointwise() {
                    T::gemm(kk, self.cout, nout, &self.weight.value, true, g, false, dx.sample_mut(i), false);
                } else {
                    T::gemm(kk, self.cout, nout, &self.weight.value, true, g, false, &mut dcol, false);
                    col2im(&dcol, self.cin, x.dims, self.geom, dout, dx.sample_mut(i));
                }
            }
        }
        dx
    }

    fn backward_same3(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let nv = x.voxels();
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, self.cin, x.dims));
        let wt = need_dx.then(|| kernels::adjoint_weights(&self.weight.value, self.cin, self.cout));
        for i in 0..x.n {
            let g = dy.sample(i);
            for co in 0..self.cout {
                let s: T = g[co * nv..(co + 1) * nv].iter().copied().sum();
                self.bias.grad[co] += s;
            }
            let xp = kernels::pad_planes(x.sample(i), self.cin, x.dims);
            kernels::conv3_weight_grad(&xp, self.cin, x.dims, g, self.cout, &mut self.weight.grad);
            if let (Some(dx), Some(wt)) = (dx.as_mut(), wt.as_ref()) {
                let gp = kernels::pad_planes(g, self.cout, x.dims);
                kernels::conv3_same(&gp, self.cout, x.dims, wt, None, self.cin, dx.sample_mut(i));
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
///
/// Weights are `[cout * 8][cin]`, row `co * 8 + (dz * 4 + dy * 2 + dx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpConv3d<T> {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> UpConv3d<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, gain: f64, rng: &mut R) -> Self {
        let std = (gain / cin as f64).sqrt();
        Self {
            cin,
            cout,
            weight: Param::new(gaussian(rng, cout * 8 * cin, std), true),
            bias: Param::new(vec![T::zero(); cout], true),
        }
    }

    #[inline]
    fn scatter_index(din: Shape3, dout: Shape3, v: usize, o: usize) -> usize {
        let (x, y, z) = din.coords(v);
        let (ox, oy, oz) = (o & 1, (o >> 1) & 1, o >> 2);
        dout.index(2 * x + ox, 2 * y + oy, 2 * z + oz)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "up-conv input channels");
        let din = x.dims;
        let dout = Shape3::new(2 * din.w, 2 * din.h, 2 * din.z);
        let nin = din.len();
        let rows = self.cout * 8;
        let mut out = Tensor::zeros(x.n, self.cout, dout);
        let mut tmp = vec![T::zero(); rows * nin];
        let targets: Vec<[usize; 8]> = (0..nin)
            .map(|v| std::array::from_fn(|o| Self::scatter_index(din, dout, v, o)))
            .collect();
        for i in 0..x.n {
            T::gemm(rows, self.cin, nin, &self.weight.value, false, x.sample(i), false, &mut tmp, false);
            let o = out.sample_mut(i);
            for co in 0..self.cout {
                let plane = &mut o[co * dout.len()..(co + 1) * dout.len()];
                let b = self.bias.value[co];
                for off in 0..8 {
                    let src = &tmp[(co * 8 + off) * nin..][..nin];
                    for (v, &val) in src.iter().enumerate() {
                        plane[targets[v][off]] = val + b;
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let din = x.dims;
        let dout = dy.dims;
        let nin = din.len();
        let rows = self.cout * 8;
        let mut gathered = vec![T::zero(); rows * nin];
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, self.cin, din));
        let targets: Vec<[usize; 8]> = (0..nin)
            .map(|v| std::array::from_fn(|o| Self::scatter_index(din, dout, v, o)))
            .collect();
        for i in 0..x.n {
            let g = dy.sample(i);
            for co in 0..self.cout {
                let plane = &g[co * dout.len()..(co + 1) * dout.len()];
                let s: T = plane.iter().copied().sum();
                self.bias.grad[co] += s;
                for off in 0..8 {
                    let dst = &mut gathered[(co * 8 + off) * nin..][..nin];
                    for (v, d) in dst.iter_mut().enumerate() {
                        *d = plane[targets[v][off]];
                    }
                }
            }
            T::gemm(rows, nin, self.cin, &gathered, false, x.sample(i), true, &mut self.weight.grad, true);
            if let Some(dx) = dx.as_mut() {
                T::gemm(self.cin, rows, nin, &self.weight.value, true, &gathered, false, dx.sample_mut(i), false);
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-sample, per-channel normalization with a learned affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNorm<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

/// Saved statistics of an [`InstanceNorm`] forward pass.
#[derive(Debug, Clone)]
pub struct NormTape<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

impl<T: Scalar> InstanceNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![T::one(); channels], false),
            beta: Param::new(vec![T::zero(); channels], false),
        }
    }

    pub fn forward(&self, x: Tensor<T>) -> (Tensor<T>, NormTape<T>) {
        let nvox = T::lit(x.voxels() as f64);
        let eps = T::lit(NORM_EPS);
        let mut xhat = x;
        let mut out = xhat.clone();
        let mut inv_std = Vec::with_capacity(xhat.n * xhat.c);
        for i in 0..xhat.n {
            for ch in 0..xhat.c {
                let plane = xhat.channel_mut(i, ch);
                let mean = plane.iter().copied().sum::<T>() / nvox;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nvox;
                let is = T::one() / (var + eps).sqrt();
                plane.iter_mut().for_each(|v| *v = (*v - mean) * is);
                inv_std.push(is);
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                let src = xhat.channel(i, ch);
                for (o, &h) in out.channel_mut(i, ch).iter_mut().zip(src) {
                    *o = g * h + b;
                }
            }
        }
        (out, NormTape { xhat, inv_std })
    }

    pub fn backward(&mut self, tape: &NormTape<T>, mut dy: Tensor<T>) -> Tensor<T> {
        let nvox = T::lit(dy.voxels() as f64);
        let channels = dy.c;
        for i in 0..dy.n {
            for ch in 0..channels {
                let xh = tape.xhat.channel(i, ch);
                let plane = dy.channel_mut(i, ch);
                let mut sum_dy = T::zero();
                let mut sum_dy_xh = T::zero();
                for (&d, &h) in plane.iter().zip(xh) {
                    sum_dy += d;
                    sum_dy_xh += d * h;
                }
                self.gamma.grad[ch] += sum_dy_xh;
                self.beta.grad[ch] += sum_dy;
                let g = self.gamma.value[ch];
                let scale = g * tape.inv_std[i * channels + ch];
                let m1 = sum_dy / nvox;
                let m2 = sum_dy_xh / nvox;
                for (d, &h) in plane.iter_mut().zip(xh) {
                    *d = scale * (*d - m1 - h * m2);
                }
            }
        }
        dy
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }
}

pub(crate) fn relu_inplace<T: Scalar>(t: &mut Tensor<T>) {
    t.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Masks `dy` by the positive entries of a ReLU output.
pub(crate) fn relu_backward<T: Scalar>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (d, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}
