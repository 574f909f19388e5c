//! Direct kernels for 3x3x3, stride 1, zero-padding 1 convolutions.
//!
//! Inputs are padded by one voxel on every side and the whole volume is then
//! treated as one flat array with padded strides: a kernel tap becomes a
//! constant offset, so every tap is a long contiguous multiply-add. Outputs
//! are produced in the same padded-stride layout and compacted afterwards.

use crate::scalar::Scalar;
use crate::volume::Shape3;

const CHUNK: usize = 2048;

/// Strides of the padded layout of a `d`-shaped volume.
#[derive(Clone, Copy)]
pub(crate) struct Padded {
    d: Shape3,
    pw: usize,
    pwh: usize,
}

impl Padded {
    pub(crate) fn new(d: Shape3) -> Self {
        let pw = d.w + 2;
        Self { d, pw, pwh: pw * (d.h + 2) }
    }

    fn len(&self) -> usize {
        self.pwh * (self.d.z + 2)
    }

    /// Length of the flat output span covering every valid output voxel.
    fn span(&self) -> usize {
        (self.d.z - 1) * self.pwh + (self.d.h - 1) * self.pw + self.d.w
    }

    fn taps(&self, kz: usize) -> [usize; 9] {
        std::array::from_fn(|j| kz * self.pwh + (j / 3) * self.pw + j % 3)
    }
}

/// Copies `[c][voxel]` planes into the padded layout with a zero border.
pub(crate) fn pad_planes<T: Scalar>(src: &[T], c: usize, d: Shape3) -> Vec<T> {
    let p = Padded::new(d);
    let mut out = vec![T::zero(); c * p.len()];
    for ch in 0..c {
        let s = &src[ch * d.len()..(ch + 1) * d.len()];
        let o = &mut out[ch * p.len()..(ch + 1) * p.len()];
        for z in 0..d.z {
            for y in 0..d.h {
                let so = d.index(0, y, z);
                let po = (z + 1) * p.pwh + (y + 1) * p.pw + 1;
                o[po..po + d.w].copy_from_slice(&s[so..so + d.w]);
            }
        }
    }
    out
}

/// Copies `[c][voxel]` planes into output-span layout (row stride `W + 2`), zeros elsewhere.
fn spread_planes<T: Scalar>(src: &[T], c: usize, d: Shape3) -> Vec<T> {
    let p = Padded::new(d);
    let span = p.span();
    let mut out = vec![T::zero(); c * span];
    for ch in 0..c {
        let s = &src[ch * d.len()..(ch + 1) * d.len()];
        let o = &mut out[ch * span..(ch + 1) * span];
        for z in 0..d.z {
            for y in 0..d.h {
                let so = d.index(0, y, z);
                let po = z * p.pwh + y * p.pw;
                o[po..po + d.w].copy_from_slice(&s[so..so + d.w]);
            }
        }
    }
    out
}

/// `out[co] = bias[co] + sum_ci w[co][ci] (*) x[ci]` over one sample.
///
/// `xp` is the padded input from [`pad_planes`]; `w` is `[cout][cin][27]`.
pub(crate) fn conv3_same<T: Scalar>(
    xp: &[T],
    cin: usize,
    d: Shape3,
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
    out: &mut [T],
) {
    let p = Padded::new(d);
    let span = p.span();
    let plen = p.len();
    let n = d.len();
    let mut acc = vec![T::zero(); cout * span];
    let mut start = 0;
    while start < span {
        let len = CHUNK.min(span - start);
        for co in 0..cout {
            let a = &mut acc[co * span + start..co * span + start + len];
            let b = bias.map_or(T::zero(), |b| b[co]);
            a.iter_mut().for_each(|v| *v = b);
            for ci in 0..cin {
                let plane = &xp[ci * plen..(ci + 1) * plen];
                for kz in 0..3 {
                    let taps = p.taps(kz);
                    let wo = ((co * cin + ci) * 3 + kz) * 9;
                    let wk: [T; 9] = std::array::from_fn(|j| w[wo + j]);
                    let s: [&[T]; 9] = std::array::from_fn(|j| &plane[start + taps[j]..start + taps[j] + len]);
                    for i in 0..len {
                        a[i] += wk[0] * s[0][i]
                            + wk[1] * s[1][i]
                            + wk[2] * s[2][i]
                            + wk[3] * s[3][i]
                            + wk[4] * s[4][i]
                            + wk[5] * s[5][i]
                            + wk[6] * s[6][i]
                            + wk[7] * s[7][i]
                            + wk[8] * s[8][i];
                    }
                }
            }
        }
        start += len;
    }
    for co in 0..cout {
        let a = &acc[co * span..(co + 1) * span];
        for z in 0..d.z {
            for y in 0..d.h {
                let src = z * p.pwh + y * p.pw;
                let dst = co * n + d.index(0, y, z);
                out[dst..dst + d.w].copy_from_slice(&a[src..src + d.w]);
            }
        }
    }
}

/// Weights of the adjoint convolution: `[cin][cout][27]` with the kernel flipped.
pub(crate) fn adjoint_weights<T: Scalar>(w: &[T], cin: usize, cout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..27 {
                out[(ci * cout + co) * 27 + (26 - k)] = w[(co * cin + ci) * 27 + k];
            }
        }
    }
    out
}

/// Nine dot products `g . r[off_j..off_j + g.len()]`, with 8-lane accumulators
/// the compiler keeps in vector registers.
#[inline]
fn dot9<T: Scalar>(g: &[T], r: &[T], offs: &[usize; 9]) -> [T; 9] {
    const L: usize = 8;
    let n = g.len() / L * L;
    let mut acc = [[T::zero(); L]; 9];
    let mut i = 0;
    while i < n {
        let gb = &g[i..i + L];
        for j in 0..9 {
            let s = &r[offs[j] + i..offs[j] + i + L];
            let a = &mut acc[j];
            for l in 0..L {
                a[l] += gb[l] * s[l];
            }
        }
        i += L;
    }
    let mut out = [T::zero(); 9];
    for j in 0..9 {
        out[j] = acc[j].iter().copied().sum();
        for t in n..g.len() {
            out[j] += g[t] * r[offs[j] + t];
        }
    }
    out
}

/// `dw[co][ci][k] += sum_v dy[co][v] * x[ci][v + k - 1]` for one sample.
pub(crate) fn conv3_weight_grad<T: Scalar>(
    xp: &[T],
    cin: usize,
    d: Shape3,
    dy: &[T],
    cout: usize,
    dw: &mut [T],
) {
    let p = Padded::new(d);
    let span = p.span();
    let plen = p.len();
    let g = spread_planes(dy, cout, d);
    for co in 0..cout {
        let gc = &g[co * span..(co + 1) * span];
        for ci in 0..cin {
            let plane = &xp[ci * plen..(ci + 1) * plen];
            for kz in 0..3 {
                let t = dot9(gc, plane, &p.taps(kz));
                let wo = ((co * cin + ci) * 3 + kz) * 9;
                for (d, v) in dw[wo..wo + 9].iter_mut().zip(t) {
                    *d += v;
                }
            }
        }
    }
}
