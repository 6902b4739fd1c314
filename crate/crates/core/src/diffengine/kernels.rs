//! Forward and adjoint kernels shared by the tape and by undifferentiated
//! evaluation. Every tape op calls into these, so values computed with and
//! without recording are identical.

use super::array::{axis_extents, Array};
use crate::error::{Error, Result};

pub(crate) fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Array::from_parts(a.shape().to_vec(), data)
}

/// `out[.., i, ..] = a[.., (i - offset) mod n, ..]`, so a shift of +1 moves
/// every entry one place towards higher indices.
pub fn circular_shift(a: &Array, axis: usize, offset: isize) -> Array {
    let (outer, n, inner) = axis_extents(a.shape(), axis);
    let mut out = vec![0.0; a.len()];
    let src = a.data();
    let off = offset.rem_euclid(n as isize) as usize;
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..n {
            let from = (i + n - off) % n;
            let dst = base + i * inner;
            let s = base + from * inner;
            out[dst..dst + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    Array::from_parts(a.shape().to_vec(), out)
}

pub fn concat(parts: &[&Array], axis: usize) -> Result<Array> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let mut shape = first.shape().to_vec();
    if axis >= shape.len() {
        return Err(Error::shape("concat", "axis out of range"));
    }
    let mut total = 0;
    for p in parts {
        if p.ndim() != shape.len()
            || p.shape()
                .iter()
                .enumerate()
                .any(|(d, &s)| d != axis && s != shape[d])
        {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        total += p.shape()[axis];
    }
    shape[axis] = total;
    let (outer, _, inner) = axis_extents(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Array::from_parts(shape, out))
}

pub fn slice(a: &Array, axis: usize, start: usize, len: usize) -> Result<Array> {
    if axis >= a.ndim() || start + len > a.shape()[axis] {
        return Err(Error::shape(
            "slice",
            format!("{:?} axis {} [{}..{}]", a.shape(), axis, start, start + len),
        ));
    }
    let (outer, n, inner) = axis_extents(a.shape(), axis);
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * n + start) * inner;
        out.extend_from_slice(&a.data()[s..s + len * inner]);
    }
    Ok(Array::from_parts(shape, out))
}

/// Adjoint of `slice`: scatter `g` into a zero array of `full_shape`.
pub(crate) fn unslice(g: &Array, full_shape: &[usize], axis: usize, start: usize) -> Array {
    let (outer, n, inner) = axis_extents(full_shape, axis);
    let len = g.shape()[axis];
    let mut out = vec![0.0; full_shape.iter().product()];
    for o in 0..outer {
        let d = (o * n + start) * inner;
        let s = o * len * inner;
        out[d..d + len * inner].copy_from_slice(&g.data()[s..s + len * inner]);
    }
    Array::from_parts(full_shape.to_vec(), out)
}

pub fn upsample_nearest(a: &Array, axis: usize, factor: usize) -> Array {
    let (outer, n, inner) = axis_extents(a.shape(), axis);
    let mut shape = a.shape().to_vec();
    shape[axis] = n * factor;
    let mut out = Vec::with_capacity(a.len() * factor);
    for o in 0..outer {
        for i in 0..n * factor {
            let s = (o * n + i / factor) * inner;
            out.extend_from_slice(&a.data()[s..s + inner]);
        }
    }
    Array::from_parts(shape, out)
}

pub(crate) fn upsample_adjoint(g: &Array, axis: usize, factor: usize) -> Array {
    let (outer, nf, inner) = axis_extents(g.shape(), axis);
    let n = nf / factor;
    let mut shape = g.shape().to_vec();
    shape[axis] = n;
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for i in 0..nf {
            let s = (o * nf + i) * inner;
            let d = (o * n + i / factor) * inner;
            for q in 0..inner {
                out[d + q] += g.data()[s + q];
            }
        }
    }
    Array::from_parts(shape, out)
}

/// Maximum along `axis`; ties resolve to the lowest index.
pub fn max_over_axis(a: &Array, axis: usize) -> (Array, Vec<usize>) {
    let (outer, n, inner) = axis_extents(a.shape(), axis);
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    let mut out = vec![f64::NEG_INFINITY; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..n {
            let row = &a.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
            for (q, &v) in row.iter().enumerate() {
                let slot = o * inner + q;
                if v > out[slot] {
                    out[slot] = v;
                    arg[slot] = i;
                }
            }
        }
    }
    (Array::from_parts(shape, out), arg)
}

pub(crate) fn max_adjoint(g: &Array, full_shape: &[usize], axis: usize, arg: &[usize]) -> Array {
    let (outer, n, inner) = axis_extents(full_shape, axis);
    let mut out = vec![0.0; full_shape.iter().product()];
    for o in 0..outer {
        for q in 0..inner {
            let slot = o * inner + q;
            out[(o * n + arg[slot]) * inner + q] += g.data()[slot];
        }
    }
    Array::from_parts(full_shape.to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride_h: usize,
    pub stride_w: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride_h: 1,
            stride_w: 1,
        }
    }
}

/// Geometry of a convolution over `[N, C, H, W]` with zero padding along
/// `H` and circular padding along `W`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    pub(crate) fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(Error::shape(
                "conv",
                format!("input {:?} weight {:?}", x, w),
            ));
        }
        let (sh, sw) = (spec.stride_h.max(1), spec.stride_w.max(1));
        if x[3] % sw != 0 {
            return Err(Error::shape(
                "conv",
                format!("width {} not divisible by stride {}", x[3], sw),
            ));
        }
        let (kh, kw) = (w[2], w[3]);
        let ph = kh / 2;
        let pw = kw / 2;
        if x[2] + 2 * ph < kh {
            return Err(Error::shape("conv", "kernel taller than padded input"));
        }
        let ho = (x[2] + 2 * ph - kh) / sh + 1;
        let wo = x[3] / sw;
        Ok(ConvGeom {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            ho,
            wo,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.ho, self.wo]
    }

    /// Source column of output column `wo` for kernel column `j`.
    fn wrap_table(&self) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.kw * self.wo);
        for j in 0..self.kw {
            t.extend((0..self.wo).map(|wo| (wo * self.sw + j + self.w - self.pw) % self.w));
        }
        t
    }

    /// Writes the patches of one sample into columns `off..off + P` of the
    /// row-major `[R, ld]` matrix `cols`.
    fn im2col(&self, x: &[f64], cols: &mut [f64], ld: usize, off: usize, table: &[usize]) {
        let p = self.cols();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let r = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[r * ld + off..r * ld + off + p];
                    let idx = &table[j * self.wo..(j + 1) * self.wo];
                    for ho in 0..self.ho {
                        let hh = (ho * self.sh + i) as isize - self.ph as isize;
                        let seg = &mut dst[ho * self.wo..(ho + 1) * self.wo];
                        if hh < 0 || hh as usize >= self.h {
                            seg.fill(0.0);
                            continue;
                        }
                        let src = &plane[hh as usize * self.w..(hh as usize + 1) * self.w];
                        for (v, &ww) in seg.iter_mut().zip(idx) {
                            *v = src[ww];
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], ld: usize, off: usize, dx: &mut [f64], table: &[usize]) {
        let p = self.cols();
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let r = (c * self.kh + i) * self.kw + j;
                    let src = &cols[r * ld + off..r * ld + off + p];
                    let idx = &table[j * self.wo..(j + 1) * self.wo];
                    for ho in 0..self.ho {
                        let hh = (ho * self.sh + i) as isize - self.ph as isize;
                        if hh < 0 || hh as usize >= self.h {
                            continue;
                        }
                        let row = &mut plane[hh as usize * self.w..(hh as usize + 1) * self.w];
                        for (&v, &ww) in src[ho * self.wo..(ho + 1) * self.wo].iter().zip(idx) {
                            row[ww] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(m == 0 || n == 0 || (m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above spell out the bounds every caller
    // satisfies; all slices are distinct allocations.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub fn conv_forward(x: &Array, w: &Array, b: Option<&Array>, spec: ConvSpec) -> Result<Array> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    if let Some(b) = b {
        if b.len() != g.o {
            return Err(Error::shape("conv", "bias length != output channels"));
        }
    }
    let (r, p) = (g.rows(), g.cols());
    let np = g.n * p;
    let in_sz = g.c * g.h * g.w;
    let table = g.wrap_table();
    // all samples side by side: cols [R, N*P], product [O, N*P]
    let mut cols = vec![0.0; r * np];
    for n in 0..g.n {
        g.im2col(&x.data()[n * in_sz..(n + 1) * in_sz], &mut cols, np, n * p, &table);
    }
    let mut prod = vec![0.0; g.o * np];
    gemm(g.o, r, np, w.data(), (r, 1), &cols, (np, 1), 0.0, &mut prod, (np, 1));
    let mut out = vec![0.0; g.n * g.o * p];
    for o in 0..g.o {
        let bo = b.map(|b| b.data()[o]).unwrap_or(0.0);
        for n in 0..g.n {
            let src = &prod[o * np + n * p..o * np + (n + 1) * p];
            let dst = &mut out[(n * g.o + o) * p..(n * g.o + o + 1) * p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bo;
            }
        }
    }
    Ok(Array::from_parts(g.out_shape(), out))
}

pub(crate) struct ConvGrads {
    pub dx: Option<Array>,
    pub dw: Option<Array>,
    pub db: Option<Array>,
}

pub(crate) fn conv_backward(
    x: &Array,
    w: &Array,
    gout: &Array,
    spec: ConvSpec,
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    let (r, p) = (g.rows(), g.cols());
    let np = g.n * p;
    let in_sz = g.c * g.h * g.w;
    let table = g.wrap_table();
    // gout as [O, N*P]
    let mut gmat = vec![0.0; g.o * np];
    for n in 0..g.n {
        for o in 0..g.o {
            gmat[o * np + n * p..o * np + (n + 1) * p]
                .copy_from_slice(&gout.data()[(n * g.o + o) * p..(n * g.o + o + 1) * p]);
        }
    }
    let db = need.2.then(|| {
        let db = (0..g.o).map(|o| gmat[o * np..(o + 1) * np].iter().sum()).collect();
        Array::from_parts(vec![g.o], db)
    });
    let dw = if need.1 {
        let mut cols = vec![0.0; r * np];
        for n in 0..g.n {
            g.im2col(&x.data()[n * in_sz..(n + 1) * in_sz], &mut cols, np, n * p, &table);
        }
        // dW[O, R] = gout[O, NP] * cols[R, NP]^T
        let mut dw = vec![0.0; w.len()];
        gemm(g.o, np, r, &gmat, (np, 1), &cols, (1, np), 0.0, &mut dw, (r, 1));
        Some(Array::from_parts(w.shape().to_vec(), dw))
    } else {
        None
    };
    let dx = if need.0 {
        // dcols[R, NP] = W[O, R]^T * gout[O, NP]
        let mut dcols = vec![0.0; r * np];
        gemm(r, g.o, np, w.data(), (1, r), &gmat, (np, 1), 0.0, &mut dcols, (np, 1));
        let mut dx = vec![0.0; x.len()];
        for n in 0..g.n {
            g.col2im(&dcols, np, n * p, &mut dx[n * in_sz..(n + 1) * in_sz], &table);
        }
        Some(Array::from_parts(x.shape().to_vec(), dx))
    } else {
        None
    };
    Ok(ConvGrads { dx, dw, db })
}

/// Per-channel statistics over all axes except axis 1.
pub(crate) struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape("batch_norm", format!("{:?}", shape)));
    }
    let n = shape[0];
    let c = shape[1];
    let s = shape[2..].iter().product();
    Ok((n, c, s))
}

pub(crate) fn channel_stats(x: &Array) -> Result<ChannelStats> {
    let (n, c, s) = channel_layout(x.shape())?;
    let count = n * s;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for i in 0..n {
            acc += x.data()[(i * c + ch) * s..(i * c + ch + 1) * s]
                .iter()
                .sum::<f64>();
        }
        let m = acc / count as f64;
        let mut v = 0.0;
        for i in 0..n {
            for &val in &x.data()[(i * c + ch) * s..(i * c + ch + 1) * s] {
                v += (val - m) * (val - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count as f64;
    }
    Ok(ChannelStats { mean, var, count })
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel.
pub(crate) fn normalize(
    x: &Array,
    gamma: &Array,
    beta: &Array,
    mean: &[f64],
    inv_std: &[f64],
) -> Result<Array> {
    let (n, c, s) = channel_layout(x.shape())?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("batch_norm", "scale/shift length != channels"));
    }
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * s;
            let (g, b, m, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for q in 0..s {
                out[base + q] = g * ((x.data()[base + q] - m) * is) + b;
            }
        }
    }
    Ok(Array::from_parts(x.shape().to_vec(), out))
}

pub(crate) struct NormGrads {
    pub dx: Array,
    pub dgamma: Array,
    pub dbeta: Array,
}

pub(crate) fn normalize_backward(
    x: &Array,
    gamma: &Array,
    mean: &[f64],
    inv_std: &[f64],
    gout: &Array,
    batch_stats: bool,
) -> Result<NormGrads> {
    let (n, c, s) = channel_layout(x.shape())?;
    let count = (n * s) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (m, is) = (mean[ch], inv_std[ch]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * s;
            for q in 0..s {
                let xh = (x.data()[base + q] - m) * is;
                let gq = gout.data()[base + q];
                sum_g += gq;
                sum_gx += gq * xh;
            }
        }
        dbeta[ch] = sum_g;
        dgamma[ch] = sum_gx;
        let g = gamma.data()[ch];
        for i in 0..n {
            let base = (i * c + ch) * s;
            for q in 0..s {
                let gq = gout.data()[base + q];
                dx[base + q] = if batch_stats {
                    let xh = (x.data()[base + q] - m) * is;
                    g * is * (gq - sum_g / count - xh * sum_gx / count)
                } else {
                    g * is * gq
                };
            }
        }
    }
    Ok(NormGrads {
        dx: Array::from_parts(x.shape().to_vec(), dx),
        dgamma: Array::from_parts(vec![c], dgamma),
        dbeta: Array::from_parts(vec![c], dbeta),
    })
}
