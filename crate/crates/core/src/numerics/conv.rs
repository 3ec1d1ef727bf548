//! Cross-correlation over 1D and 2D inputs via chunked im2col.
//!
//! Inputs are channel-first: `[batch, channels, height, width]`. A 1D
//! convolution is the `height = 1` case. The column buffer is built for a
//! band of output rows at a time so large maps never materialize a full
//! `im2col` matrix.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Column-buffer budget in elements.
const COL_BUDGET: usize = 1 << 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    pub fn unit() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
        }
    }

    /// Stride-1, dilation-1 with symmetric "same" padding for an odd kernel.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (kh / 2, kw / 2),
        }
    }

    pub fn conv1d(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride: (1, stride),
            dilation: (1, dilation),
            padding: (0, padding),
        }
    }
}

pub fn output_extent(input: usize, kernel: usize, stride: usize, dilation: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        return Err(Error::InvalidArgument(
            "kernel, stride and dilation must be >= 1".into(),
        ));
    }
    let span = dilation * (kernel - 1) + 1;
    if input + 2 * pad < span {
        return Err(Error::Shape(format!(
            "kernel span {span} exceeds padded input extent {}",
            input + 2 * pad
        )));
    }
    Ok((input + 2 * pad - span) / stride + 1)
}

/// Shapes resolved for one convolution call.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    pub fn resolve(x: [usize; 4], weight: [usize; 4], geom: ConvGeom) -> Result<Self> {
        let [batch, c_in, h, w] = x;
        let [c_out, wc_in, kh, kw] = weight;
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv weight expects {wc_in} input channels, input has {c_in}"
            )));
        }
        let ho = output_extent(h, kh, geom.stride.0, geom.dilation.0, geom.padding.0)?;
        let wo = output_extent(w, kw, geom.stride.1, geom.dilation.1, geom.padding.1)?;
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            ho,
            wo,
            geom,
        })
    }

    fn ckk(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.ckk() * self.wo).max(1)).clamp(1, self.ho)
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.c_out * self.ho * self.wo
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> usize {
        self.batch * self.c_out * self.ho * self.wo * self.ckk()
    }

    /// Valid output column range for kernel column `kj`.
    fn ow_range(&self, kj: usize) -> (usize, usize) {
        let (sw, dw, pw) = (self.geom.stride.1, self.geom.dilation.1, self.geom.padding.1);
        let off = kj * dw;
        // iw = ow*sw + off - pw must lie in [0, w)
        let lo = if off >= pw { 0 } else { (pw - off).div_ceil(sw) };
        let hi = if self.w + pw > off {
            ((self.w + pw - off - 1) / sw + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Fills `col` (`ckk x rows*wo`) for output rows `r0..r1` of sample `x`.
    fn im2col<T: Scalar>(&self, x: &[T], r0: usize, r1: usize, col: &mut [T]) {
        let p = (r1 - r0) * self.wo;
        let (sh, dh, ph) = (self.geom.stride.0, self.geom.dilation.0, self.geom.padding.0);
        let sw = self.geom.stride.1;
        let dw = self.geom.dilation.1;
        let pw = self.geom.padding.1;
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let q = (ci * self.kh + ki) * self.kw + kj;
                    let dst_row = &mut col[q * p..(q + 1) * p];
                    let (lo, hi) = self.ow_range(kj);
                    for (ri, oh) in (r0..r1).enumerate() {
                        let dst = &mut dst_row[ri * self.wo..(ri + 1) * self.wo];
                        let ih = (oh * sh + ki * dh) as isize - ph as isize;
                        if ih < 0 || ih as usize >= self.h || lo >= hi {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        let iw0 = lo * sw + kj * dw - pw;
                        if sw == 1 {
                            dst[lo..hi].copy_from_slice(&src[iw0..iw0 + (hi - lo)]);
                        } else {
                            for (t, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[iw0 + t * sw];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into the input gradient of one sample.
    fn col2im<T: Scalar>(&self, col: &[T], r0: usize, r1: usize, dx: &mut [T]) {
        let p = (r1 - r0) * self.wo;
        let (sh, dh, ph) = (self.geom.stride.0, self.geom.dilation.0, self.geom.padding.0);
        let sw = self.geom.stride.1;
        let dw = self.geom.dilation.1;
        let pw = self.geom.padding.1;
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let q = (ci * self.kh + ki) * self.kw + kj;
                    let src_row = &col[q * p..(q + 1) * p];
                    let (lo, hi) = self.ow_range(kj);
                    if lo >= hi {
                        continue;
                    }
                    for (ri, oh) in (r0..r1).enumerate() {
                        let ih = (oh * sh + ki * dh) as isize - ph as isize;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        let src = &src_row[ri * self.wo..(ri + 1) * self.wo];
                        let dst = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        let iw0 = lo * sw + kj * dw - pw;
                        for t in 0..hi - lo {
                            dst[iw0 + t * sw] += src[lo + t];
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x; weight) + bias`, output `[batch, c_out, ho, wo]`.
pub fn forward<T: Scalar>(d: &ConvDims, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut y = vec![T::zero(); d.out_len()];
    let ckk = d.ckk();
    let plane_out = d.ho * d.wo;
    let in_len = d.c_in * d.h * d.w;
    let rows = d.rows_per_chunk();
    let mut col = vec![T::zero(); ckk * rows * d.wo];
    for b in 0..d.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let yb = &mut y[b * d.c_out * plane_out..(b + 1) * d.c_out * plane_out];
        let mut r0 = 0;
        while r0 < d.ho {
            let r1 = (r0 + rows).min(d.ho);
            let p = (r1 - r0) * d.wo;
            let col = &mut col[..ckk * p];
            d.im2col(xb, r0, r1, col);
            T::gemm(
                d.c_out,
                ckk,
                p,
                T::one(),
                (weight, ckk as isize, 1),
                (col, p as isize, 1),
                T::zero(),
                (&mut yb[r0 * d.wo..], plane_out as isize, 1),
            );
            r0 = r1;
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut yb[co * plane_out..(co + 1) * plane_out] {
                    *v += bv;
                }
            }
        }
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

pub fn backward<T: Scalar>(d: &ConvDims, x: &[T], weight: &[T], dy: &[T], need_dx: bool) -> ConvGrads<T> {
    let ckk = d.ckk();
    let plane_out = d.ho * d.wo;
    let in_len = d.c_in * d.h * d.w;
    let rows = d.rows_per_chunk();
    let mut col = vec![T::zero(); ckk * rows * d.wo];
    let mut dcol = if need_dx {
        vec![T::zero(); ckk * rows * d.wo]
    } else {
        Vec::new()
    };
    let mut dweight = vec![T::zero(); d.c_out * ckk];
    let mut dbias = vec![T::zero(); d.c_out];
    let mut dx = need_dx.then(|| vec![T::zero(); d.batch * in_len]);
    for b in 0..d.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * d.c_out * plane_out..(b + 1) * d.c_out * plane_out];
        for (co, db) in dbias.iter_mut().enumerate() {
            *db += dyb[co * plane_out..(co + 1) * plane_out].iter().copied().sum::<T>();
        }
        let mut r0 = 0;
        while r0 < d.ho {
            let r1 = (r0 + rows).min(d.ho);
            let p = (r1 - r0) * d.wo;
            let col = &mut col[..ckk * p];
            d.im2col(xb, r0, r1, col);
            let dy_chunk = &dyb[r0 * d.wo..];
            T::gemm(
                d.c_out,
                p,
                ckk,
                T::one(),
                (dy_chunk, plane_out as isize, 1),
                (col, 1, p as isize),
                T::one(),
                (&mut dweight, ckk as isize, 1),
            );
            if let Some(dx) = dx.as_mut() {
                let dcol = &mut dcol[..ckk * p];
                T::gemm(
                    ckk,
                    d.c_out,
                    p,
                    T::one(),
                    (weight, 1, ckk as isize),
                    (dy_chunk, plane_out as isize, 1),
                    T::zero(),
                    (dcol, p as isize, 1),
                );
                d.col2im(dcol, r0, r1, &mut dx[b * in_len..(b + 1) * in_len]);
            }
            r0 = r1;
        }
    }
    ConvGrads { dx, dweight, dbias }
}
