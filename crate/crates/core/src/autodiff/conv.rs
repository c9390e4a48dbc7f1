//! im2col-based convolution and transposed-convolution kernels.
//!
//! Layouts: images are `(N, C, H, W)`; conv weights are `(F, C, KH, KW)`;
//! transposed-conv weights are `(C_in, C_out, KH, KW)`. Work is split into
//! sample chunks so the column buffer stays bounded.

use crate::real::{gemm, MatRef, Real};

const COL_BUDGET: usize = 1 << 23;

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    (input + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1)
}

pub fn deconv_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    if stride == 0 || input == 0 || output_padding >= stride {
        return None;
    }
    ((input - 1) * stride + kernel + output_padding).checked_sub(2 * padding).filter(|&v| v > 0)
}

/// Geometry of a convolution from a `(c, h, w)` image to `(oh, ow)` positions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Plane {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Plane {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Writes one image's patches into columns `[offset, offset + oh*ow)` of a
/// `rows × row_len` matrix.
fn im2col<T: Real>(img: &[T], p: &Plane, cols: &mut [T], row_len: usize, offset: usize) {
    let (h, w) = (p.h as isize, p.w as isize);
    for c in 0..p.c {
        let plane = &img[c * p.h * p.w..(c + 1) * p.h * p.w];
        for ki in 0..p.kh {
            for kj in 0..p.kw {
                let row = (c * p.kh + ki) * p.kw + kj;
                let dst = &mut cols[row * row_len + offset..row * row_len + offset + p.positions()];
                for oy in 0..p.oh {
                    let iy = (oy * p.stride + ki) as isize - p.pad as isize;
                    let seg = &mut dst[oy * p.ow..(oy + 1) * p.ow];
                    if iy < 0 || iy >= h {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * p.w..(iy as usize + 1) * p.w];
                    for (ox, d) in seg.iter_mut().enumerate() {
                        let ix = (ox * p.stride + kj) as isize - p.pad as isize;
                        *d = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im<T: Real>(cols: &[T], p: &Plane, row_len: usize, offset: usize, img: &mut [T]) {
    let (h, w) = (p.h as isize, p.w as isize);
    for c in 0..p.c {
        let plane = &mut img[c * p.h * p.w..(c + 1) * p.h * p.w];
        for ki in 0..p.kh {
            for kj in 0..p.kw {
                let row = (c * p.kh + ki) * p.kw + kj;
                let src = &cols[row * row_len + offset..row * row_len + offset + p.positions()];
                for oy in 0..p.oh {
                    let iy = (oy * p.stride + ki) as isize - p.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * p.w..(iy as usize + 1) * p.w];
                    for ox in 0..p.ow {
                        let ix = (ox * p.stride + kj) as isize - p.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * p.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn chunk_size(per_sample: usize) -> usize {
    (COL_BUDGET / per_sample.max(1)).max(1)
}

/// Copies `(N, F, L)` rows of samples `[start, end)` into an `F × (B·L)` matrix.
fn gather_channels<T: Real>(src: &[T], f: usize, l: usize, start: usize, end: usize, dst: &mut [T]) {
    let bl = (end - start) * l;
    for (b, n) in (start..end).enumerate() {
        for ch in 0..f {
            let s = &src[(n * f + ch) * l..(n * f + ch + 1) * l];
            dst[ch * bl + b * l..ch * bl + (b + 1) * l].copy_from_slice(s);
        }
    }
}

fn scatter_channels<T: Real>(src: &[T], f: usize, l: usize, start: usize, end: usize, dst: &mut [T]) {
    let bl = (end - start) * l;
    for (b, n) in (start..end).enumerate() {
        for ch in 0..f {
            let d = &mut dst[(n * f + ch) * l..(n * f + ch + 1) * l];
            d.copy_from_slice(&src[ch * bl + b * l..ch * bl + (b + 1) * l]);
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub plane: Plane,
    pub filters: usize,
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let p = &d.plane;
    let (rows, l, f) = (p.rows(), p.positions(), d.filters);
    let mut out = vec![T::zero(); d.n * f * l];
    let chunk = chunk_size(rows * l);
    let mut cols = vec![T::zero(); rows * l * chunk.min(d.n)];
    let mut res = vec![T::zero(); f * l * chunk.min(d.n)];
    let mut start = 0;
    while start < d.n {
        let end = (start + chunk).min(d.n);
        let bl = (end - start) * l;
        for (b, n) in (start..end).enumerate() {
            im2col(&x[n * p.image_len()..(n + 1) * p.image_len()], p, &mut cols, bl, b * l);
        }
        gemm(MatRef::new(w, f, rows), MatRef::new(&cols[..rows * bl], rows, bl), &mut res[..f * bl], T::zero());
        scatter_channels(&res[..f * bl], f, l, start, end, &mut out);
        start = end;
    }
    if let Some(b) = bias {
        for chunk in out.chunks_mut(l).enumerate() {
            let ch = chunk.0 % f;
            for v in chunk.1.iter_mut() {
                *v = *v + b[ch];
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    d: &ConvDims,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let p = &d.plane;
    let (rows, l, f) = (p.rows(), p.positions(), d.filters);
    let mut dx = need.0.then(|| vec![T::zero(); d.n * p.image_len()]);
    let mut dw = need.1.then(|| vec![T::zero(); f * rows]);
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); f];
        for (i, chunk) in gout.chunks(l).enumerate() {
            db[i % f] = db[i % f] + chunk.iter().copied().sum::<T>();
        }
        db
    });
    if need.0 || need.1 {
        let chunk = chunk_size(rows * l);
        let mut cols = vec![T::zero(); rows * l * chunk.min(d.n)];
        let mut g = vec![T::zero(); f * l * chunk.min(d.n)];
        let mut start = 0;
        while start < d.n {
            let end = (start + chunk).min(d.n);
            let bl = (end - start) * l;
            gather_channels(gout, f, l, start, end, &mut g[..f * bl]);
            if let Some(dw) = dw.as_mut() {
                for (b, n) in (start..end).enumerate() {
                    im2col(&x[n * p.image_len()..(n + 1) * p.image_len()], p, &mut cols, bl, b * l);
                }
                gemm(
                    MatRef::new(&g[..f * bl], f, bl),
                    MatRef::new(&cols[..rows * bl], rows, bl).t(),
                    dw,
                    T::one(),
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    MatRef::new(w, f, rows).t(),
                    MatRef::new(&g[..f * bl], f, bl),
                    &mut cols[..rows * bl],
                    T::zero(),
                );
                for (b, n) in (start..end).enumerate() {
                    col2im(&cols, p, bl, b * l, &mut dx[n * p.image_len()..(n + 1) * p.image_len()]);
                }
            }
            start = end;
        }
    }
    ConvGrads { dx, dw, db }
}

/// Transposed convolution. `plane` describes the *output* image and the
/// forward convolution that maps it back onto the input grid.
pub(crate) struct DeconvDims {
    pub n: usize,
    pub in_channels: usize,
    pub plane: Plane,
}

pub(crate) fn deconv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, d: &DeconvDims) -> Vec<T> {
    let p = &d.plane;
    let (rows, l, cin) = (p.rows(), p.positions(), d.in_channels);
    let out_len = p.image_len();
    let mut out = vec![T::zero(); d.n * out_len];
    let chunk = chunk_size(rows * l);
    let mut xs = vec![T::zero(); cin * l * chunk.min(d.n)];
    let mut cols = vec![T::zero(); rows * l * chunk.min(d.n)];
    let mut start = 0;
    while start < d.n {
        let end = (start + chunk).min(d.n);
        let bl = (end - start) * l;
        gather_channels(x, cin, l, start, end, &mut xs[..cin * bl]);
        gemm(
            MatRef::new(w, cin, rows).t(),
            MatRef::new(&xs[..cin * bl], cin, bl),
            &mut cols[..rows * bl],
            T::zero(),
        );
        for (b, n) in (start..end).enumerate() {
            col2im(&cols, p, bl, b * l, &mut out[n * out_len..(n + 1) * out_len]);
        }
        start = end;
    }
    if let Some(b) = bias {
        let hw = p.h * p.w;
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let ch = i % p.c;
            for v in chunk.iter_mut() {
                *v = *v + b[ch];
            }
        }
    }
    out
}

pub(crate) fn deconv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    d: &DeconvDims,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let p = &d.plane;
    let (rows, l, cin) = (p.rows(), p.positions(), d.in_channels);
    let out_len = p.image_len();
    let mut dx = need.0.then(|| vec![T::zero(); d.n * cin * l]);
    let mut dw = need.1.then(|| vec![T::zero(); cin * rows]);
    let db = need.2.then(|| {
        let hw = p.h * p.w;
        let mut db = vec![T::zero(); p.c];
        for (i, chunk) in gout.chunks(hw).enumerate() {
            db[i % p.c] = db[i % p.c] + chunk.iter().copied().sum::<T>();
        }
        db
    });
    if need.0 || need.1 {
        let chunk = chunk_size(rows * l);
        let mut cols = vec![T::zero(); rows * l * chunk.min(d.n)];
        let mut xs = vec![T::zero(); cin * l * chunk.min(d.n)];
        let mut start = 0;
        while start < d.n {
            let end = (start + chunk).min(d.n);
            let bl = (end - start) * l;
            for (b, n) in (start..end).enumerate() {
                im2col(&gout[n * out_len..(n + 1) * out_len], p, &mut cols, bl, b * l);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    MatRef::new(w, cin, rows),
                    MatRef::new(&cols[..rows * bl], rows, bl),
                    &mut xs[..cin * bl],
                    T::zero(),
                );
                scatter_channels(&xs[..cin * bl], cin, l, start, end, dx);
            }
            if let Some(dw) = dw.as_mut() {
                gather_channels(x, cin, l, start, end, &mut xs[..cin * bl]);
                gemm(
                    MatRef::new(&xs[..cin * bl], cin, bl),
                    MatRef::new(&cols[..rows * bl], rows, bl).t(),
                    dw,
                    T::one(),
                );
            }
            start = end;
        }
    }
    ConvGrads { dx, dw, db }
}
