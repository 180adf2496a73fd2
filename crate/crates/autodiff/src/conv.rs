//! Convolution kernels over NCHW slices: im2col/col2im with periodic,
//! zero, and reflective padding, plus the strided, depthwise and transposed
//! variants with their backward passes.

use crate::error::AutodiffError;
use crate::par;
use crate::scalar::{MatRef, Real};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PaddingMode {
    /// Periodic wraparound.
    Circular,
    Zero,
    /// Mirror about the edge sample without repeating it.
    Reflect,
}

impl std::str::FromStr for PaddingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "circular" => Ok(PaddingMode::Circular),
            "zero" | "zeros" => Ok(PaddingMode::Zero),
            "reflect" => Ok(PaddingMode::Reflect),
            other => Err(format!("unknown padding mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub mode: PaddingMode,
}

impl ConvSpec {
    pub fn same(kernel: usize, mode: PaddingMode) -> Self {
        ConvSpec { stride: 1, padding: kernel / 2, mode }
    }

    pub fn strided(stride: usize) -> Self {
        ConvSpec { stride, padding: 0, mode: PaddingMode::Zero }
    }
}

const OUTSIDE: usize = usize::MAX;

/// Source index along one axis for padded coordinate `i` (may be negative).
pub fn source_index(i: isize, n: usize, mode: PaddingMode) -> Option<usize> {
    let ni = n as isize;
    match mode {
        PaddingMode::Circular => Some(i.rem_euclid(ni) as usize),
        PaddingMode::Zero => (0..ni).contains(&i).then_some(i as usize),
        PaddingMode::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (ni - 1);
            let m = i.rem_euclid(period);
            Some(if m >= ni { period - m } else { m } as usize)
        }
    }
}

/// Geometry of a convolution from a `cin x h x w` grid to `ho x wo`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
    pub mode: PaddingMode,
}

impl Geometry {
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, spec: ConvSpec) -> Result<Self, AutodiffError> {
        if spec.stride == 0 {
            return Err(AutodiffError::Shape("stride must be positive".into()));
        }
        if spec.mode == PaddingMode::Reflect && (spec.padding >= h || spec.padding >= w) {
            return Err(AutodiffError::Shape(format!(
                "reflect padding {} needs spatial extent > padding, got {h}x{w}",
                spec.padding
            )));
        }
        let ph = h + 2 * spec.padding;
        let pw = w + 2 * spec.padding;
        if ph < kh || pw < kw {
            return Err(AutodiffError::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            ho: (ph - kh) / spec.stride + 1,
            wo: (pw - kw) / spec.stride + 1,
            mode: spec.mode,
        })
    }

    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn maps(&self) -> (Vec<usize>, Vec<usize>) {
        let mut ymap = Vec::with_capacity(self.kh * self.ho);
        for a in 0..self.kh {
            for i in 0..self.ho {
                let src = (i * self.stride + a) as isize - self.pad as isize;
                ymap.push(source_index(src, self.h, self.mode).unwrap_or(OUTSIDE));
            }
        }
        let mut xmap = Vec::with_capacity(self.kw * self.wo);
        for b in 0..self.kw {
            for j in 0..self.wo {
                let src = (j * self.stride + b) as isize - self.pad as isize;
                xmap.push(source_index(src, self.w, self.mode).unwrap_or(OUTSIDE));
            }
        }
        (ymap, xmap)
    }

    /// Unfold one sample into a `k() x out_plane()` column matrix.
    pub fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (ymap, xmap) = self.maps();
        let plane = self.h * self.w;
        let op = self.out_plane();
        for ci in 0..self.cin {
            let xs = &x[ci * plane..(ci + 1) * plane];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (ci * self.kh + a) * self.kw + b;
                    let dst = &mut cols[row * op..(row + 1) * op];
                    let xm = &xmap[b * self.wo..(b + 1) * self.wo];
                    for i in 0..self.ho {
                        let sy = ymap[a * self.ho + i];
                        let d = &mut dst[i * self.wo..(i + 1) * self.wo];
                        if sy == OUTSIDE {
                            d.fill(T::zero());
                            continue;
                        }
                        let src = &xs[sy * self.w..(sy + 1) * self.w];
                        for (dv, &sx) in d.iter_mut().zip(xm) {
                            *dv = if sx == OUTSIDE { T::zero() } else { src[sx] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-add columns back onto the grid.
    pub fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let (ymap, xmap) = self.maps();
        let plane = self.h * self.w;
        let op = self.out_plane();
        for ci in 0..self.cin {
            let xs = &mut x[ci * plane..(ci + 1) * plane];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (ci * self.kh + a) * self.kw + b;
                    let src = &cols[row * op..(row + 1) * op];
                    let xm = &xmap[b * self.wo..(b + 1) * self.wo];
                    for i in 0..self.ho {
                        let sy = ymap[a * self.ho + i];
                        if sy == OUTSIDE {
                            continue;
                        }
                        let dst = &mut xs[sy * self.w..(sy + 1) * self.w];
                        for (&sv, &sx) in src[i * self.wo..(i + 1) * self.wo].iter().zip(xm) {
                            if sx != OUTSIDE {
                                dst[sx] += sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Real>(bias: Option<&Tensor<T>>, channels: usize) -> Result<(), AutodiffError> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(AutodiffError::Shape(format!(
                "bias has {} values for {channels} channels",
                b.len()
            )));
        }
    }
    Ok(())
}

fn add_bias<T: Real>(out: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (c, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad<T: Real>(dout: &Tensor<T>) -> Vec<T> {
    let [bs, c, _, _] = dout.shape();
    let mut g = vec![T::zero(); c];
    for b in 0..bs {
        for (ci, gv) in g.iter_mut().enumerate() {
            *gv += dout.plane(b, ci).iter().copied().sum::<T>();
        }
    }
    g
}

/// Per-input gradients requested from a backward kernel.
#[derive(Clone, Copy, Debug)]
pub struct Needs {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

pub struct Grads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

fn sum_in_order<T: Real>(parts: impl Iterator<Item = Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    acc
}

pub(crate) fn conv2d_geometry<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Geometry, AutodiffError> {
    let [_, ci, h, wd] = x.shape();
    let [_, wci, kh, kw] = w.shape();
    if ci != wci {
        return Err(AutodiffError::Shape(format!(
            "conv2d input has {ci} channels, weight expects {wci}"
        )));
    }
    Geometry::new(ci, h, wd, kh, kw, spec)
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>, AutodiffError> {
    let g = conv2d_geometry(x, w, spec)?;
    let co = w.shape()[0];
    check_bias(bias, co)?;
    let bs = x.shape()[0];
    let op = g.out_plane();
    let k = g.k();
    let mut out = Tensor::zeros([bs, co, g.ho, g.wo]);
    par::for_each_chunk(out.data_mut(), co * op, |b, o| {
        let xb = x.sample(b);
        if g.is_pointwise() {
            T::gemm(co, k, op, MatRef::row_major(w.data(), k), MatRef::row_major(xb, op), o, false);
        } else {
            let mut cols = vec![T::zero(); k * op];
            g.im2col(xb, &mut cols);
            T::gemm(co, k, op, MatRef::row_major(w.data(), k), MatRef::row_major(&cols, op), o, false);
        }
        add_bias(o, bias, op);
    });
    Ok(out)
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    spec: ConvSpec,
    needs: Needs,
) -> Result<Grads<T>, AutodiffError> {
    let g = conv2d_geometry(x, w, spec)?;
    let co = w.shape()[0];
    let bs = x.shape()[0];
    let op = g.out_plane();
    let k = g.k();
    let per_sample = par::map(bs, |b| {
        let xb = x.sample(b);
        let db = dout.sample(b);
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else if needs.weight {
            let mut c = vec![T::zero(); k * op];
            g.im2col(xb, &mut c);
            owned = c;
            &owned
        } else {
            &[]
        };
        let dw = needs.weight.then(|| {
            let mut dw = vec![T::zero(); co * k];
            T::gemm(co, op, k, MatRef::row_major(db, op), MatRef::transposed(cols, op), &mut dw, false);
            dw
        });
        let dx = needs.input.then(|| {
            let mut dx = vec![T::zero(); x.sample_len()];
            if g.is_pointwise() {
                T::gemm(k, co, op, MatRef::transposed(w.data(), k), MatRef::row_major(db, op), &mut dx, false);
            } else {
                let mut dcols = vec![T::zero(); k * op];
                T::gemm(k, co, op, MatRef::transposed(w.data(), k), MatRef::row_major(db, op), &mut dcols, false);
                g.col2im(&dcols, &mut dx);
            }
            dx
        });
        (dx, dw)
    });
    let mut input = needs.input.then(|| Vec::with_capacity(x.len()));
    let mut weights = Vec::new();
    for (dx, dw) in per_sample {
        if let (Some(acc), Some(dx)) = (input.as_mut(), dx) {
            acc.extend(dx);
        }
        if let Some(dw) = dw {
            weights.push(dw);
        }
    }
    Ok(Grads {
        input,
        weight: needs.weight.then(|| sum_in_order(weights.into_iter(), co * k)),
        bias: needs.bias.then(|| bias_grad(dout)),
    })
}

/// Shape of the transposed convolution output, i.e. the input grid of the
/// matching forward convolution.
pub fn conv_transpose2d_shape(x: Shape, w: Shape, spec: ConvSpec) -> Result<Shape, AutodiffError> {
    let [bs, cx, hx, wx] = x;
    let [wcx, cy, kh, kw] = w;
    if cx != wcx {
        return Err(AutodiffError::Shape(format!(
            "conv_transpose2d input has {cx} channels, weight expects {wcx}"
        )));
    }
    let hy = ((hx - 1) * spec.stride + kh).checked_sub(2 * spec.padding);
    let wy = ((wx - 1) * spec.stride + kw).checked_sub(2 * spec.padding);
    match (hy, wy) {
        (Some(hy), Some(wy)) if hy > 0 && wy > 0 => Ok([bs, cy, hy, wy]),
        _ => Err(AutodiffError::Shape("conv_transpose2d output would be empty".into())),
    }
}

fn transpose_geometry(x: Shape, w: Shape, spec: ConvSpec) -> Result<(Shape, Geometry), AutodiffError> {
    let out = conv_transpose2d_shape(x, w, spec)?;
    let g = Geometry::new(out[1], out[2], out[3], w[2], w[3], spec)?;
    debug_assert_eq!((g.ho, g.wo), (x[2], x[3]));
    Ok((out, g))
}

/// Adjoint (with respect to its input) of [`conv2d`] sharing the weight.
pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>, AutodiffError> {
    let (shape, g) = transpose_geometry(x.shape(), w.shape(), spec)?;
    let cx = x.shape()[1];
    check_bias(bias, shape[1])?;
    let k = g.k();
    let ip = g.out_plane();
    let mut out = Tensor::zeros(shape);
    let plane = shape[2] * shape[3];
    let sample = shape[1] * plane;
    par::for_each_chunk(out.data_mut(), sample, |b, o| {
        let xb = x.sample(b);
        let mut cols = vec![T::zero(); k * ip];
        T::gemm(k, cx, ip, MatRef::transposed(w.data(), k), MatRef::row_major(xb, ip), &mut cols, false);
        g.col2im(&cols, o);
        add_bias(o, bias, plane);
    });
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    spec: ConvSpec,
    needs: Needs,
) -> Result<Grads<T>, AutodiffError> {
    let (_, g) = transpose_geometry(x.shape(), w.shape(), spec)?;
    let cx = x.shape()[1];
    let bs = x.shape()[0];
    let k = g.k();
    let ip = g.out_plane();
    let per_sample = par::map(bs, |b| {
        let mut cols = vec![T::zero(); k * ip];
        g.im2col(dout.sample(b), &mut cols);
        let dx = needs.input.then(|| {
            let mut dx = vec![T::zero(); cx * ip];
            T::gemm(cx, k, ip, MatRef::row_major(w.data(), k), MatRef::row_major(&cols, ip), &mut dx, false);
            dx
        });
        let dw = needs.weight.then(|| {
            let mut dw = vec![T::zero(); cx * k];
            T::gemm(cx, ip, k, MatRef::row_major(x.sample(b), ip), MatRef::transposed(&cols, ip), &mut dw, false);
            dw
        });
        (dx, dw)
    });
    let mut input = needs.input.then(|| Vec::with_capacity(x.len()));
    let mut weights = Vec::new();
    for (dx, dw) in per_sample {
        if let (Some(acc), Some(dx)) = (input.as_mut(), dx) {
            acc.extend(dx);
        }
        if let Some(dw) = dw {
            weights.push(dw);
        }
    }
    Ok(Grads {
        input,
        weight: needs.weight.then(|| sum_in_order(weights.into_iter(), cx * k)),
        bias: needs.bias.then(|| bias_grad(dout)),
    })
}

fn depthwise_geometry<T: Real>(x: &Tensor<T>, w: &Tensor<T>, mode: PaddingMode) -> Result<Geometry, AutodiffError> {
    let [_, c, h, wd] = x.shape();
    let [wc, one, kh, kw] = w.shape();
    if wc != c || one != 1 {
        return Err(AutodiffError::Shape(format!(
            "depthwise weight {:?} does not match {c} channels",
            w.shape()
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 || kh != kw {
        return Err(AutodiffError::Shape("depthwise kernel must be square and odd".into()));
    }
    Geometry::new(1, h, wd, kh, kw, ConvSpec::same(kh, mode))
}

/// Padded copy of one plane (`(h + 2p) x (w + 2p)`).
fn pad_plane<T: Real>(g: &Geometry, x: &[T], out: &mut [T]) {
    let pw = g.w + 2 * g.pad;
    for py in 0..g.h + 2 * g.pad {
        let sy = source_index(py as isize - g.pad as isize, g.h, g.mode);
        let row = &mut out[py * pw..(py + 1) * pw];
        match sy {
            None => row.fill(T::zero()),
            Some(sy) => {
                for (px, v) in row.iter_mut().enumerate() {
                    *v = match source_index(px as isize - g.pad as isize, g.w, g.mode) {
                        Some(sx) => x[sy * g.w + sx],
                        None => T::zero(),
                    };
                }
            }
        }
    }
}

/// Fold a padded gradient plane back onto the unpadded grid (adjoint of `pad_plane`).
fn fold_plane<T: Real>(g: &Geometry, padded: &[T], out: &mut [T]) {
    let pw = g.w + 2 * g.pad;
    for py in 0..g.h + 2 * g.pad {
        let Some(sy) = source_index(py as isize - g.pad as isize, g.h, g.mode) else {
            continue;
        };
        for px in 0..pw {
            if let Some(sx) = source_index(px as isize - g.pad as isize, g.w, g.mode) {
                out[sy * g.w + sx] += padded[py * pw + px];
            }
        }
    }
}

/// One kernel per channel, stride 1, "same" padding.
pub fn depthwise_conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    mode: PaddingMode,
) -> Result<Tensor<T>, AutodiffError> {
    let g = depthwise_geometry(x, w, mode)?;
    let [_, c, h, wd] = x.shape();
    check_bias(bias, c)?;
    let k = g.kh;
    let pw = wd + 2 * g.pad;
    let plane = h * wd;
    let mut out = Tensor::zeros(x.shape());
    par::for_each_chunk(out.data_mut(), plane, |idx, o| {
        let ci = idx % c;
        let xs = &x.data()[idx * plane..(idx + 1) * plane];
        let mut padded = vec![T::zero(); (h + 2 * g.pad) * pw];
        pad_plane(&g, xs, &mut padded);
        let kern = &w.data()[ci * k * k..(ci + 1) * k * k];
        for a in 0..k {
            for b in 0..k {
                let wv = kern[a * k + b];
                for i in 0..h {
                    let src = &padded[(i + a) * pw + b..(i + a) * pw + b + wd];
                    for (ov, &sv) in o[i * wd..(i + 1) * wd].iter_mut().zip(src) {
                        *ov += wv * sv;
                    }
                }
            }
        }
        if let Some(bv) = bias {
            let bv = bv.data()[ci];
            o.iter_mut().for_each(|v| *v += bv);
        }
    });
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    mode: PaddingMode,
    needs: Needs,
) -> Result<Grads<T>, AutodiffError> {
    let g = depthwise_geometry(x, w, mode)?;
    let [bs, c, h, wd] = x.shape();
    let k = g.kh;
    let pw = wd + 2 * g.pad;
    let ph = h + 2 * g.pad;
    let plane = h * wd;
    let per_plane = par::map(bs * c, |idx| {
        let ci = idx % c;
        let xs = &x.data()[idx * plane..(idx + 1) * plane];
        let ds = &dout.data()[idx * plane..(idx + 1) * plane];
        let kern = &w.data()[ci * k * k..(ci + 1) * k * k];
        let dw = needs.weight.then(|| {
            let mut padded = vec![T::zero(); ph * pw];
            pad_plane(&g, xs, &mut padded);
            let mut dw = vec![T::zero(); k * k];
            for a in 0..k {
                for b in 0..k {
                    let mut acc = T::zero();
                    for i in 0..h {
                        let src = &padded[(i + a) * pw + b..(i + a) * pw + b + wd];
                        for (&dv, &sv) in ds[i * wd..(i + 1) * wd].iter().zip(src) {
                            acc += dv * sv;
                        }
                    }
                    dw[a * k + b] = acc;
                }
            }
            dw
        });
        let dx = needs.input.then(|| {
            let mut dpad = vec![T::zero(); ph * pw];
            for a in 0..k {
                for b in 0..k {
                    let wv = kern[a * k + b];
                    for i in 0..h {
                        let dst = &mut dpad[(i + a) * pw + b..(i + a) * pw + b + wd];
                        for (dv, &gv) in dst.iter_mut().zip(&ds[i * wd..(i + 1) * wd]) {
                            *dv += wv * gv;
                        }
                    }
                }
            }
            let mut dx = vec![T::zero(); plane];
            fold_plane(&g, &dpad, &mut dx);
            dx
        });
        (dx, dw)
    });
    let mut input = needs.input.then(|| Vec::with_capacity(x.len()));
    let mut weight = needs.weight.then(|| vec![T::zero(); c * k * k]);
    for (idx, (dx, dw)) in per_plane.into_iter().enumerate() {
        if let (Some(acc), Some(dx)) = (input.as_mut(), dx) {
            acc.extend(dx);
        }
        if let (Some(acc), Some(dw)) = (weight.as_mut(), dw) {
            let ci = idx % c;
            acc[ci * k * k..(ci + 1) * k * k].iter_mut().zip(dw).for_each(|(a, v)| *a += v);
        }
    }
    Ok(Grads { input, weight, bias: needs.bias.then(|| bias_grad(dout)) })
}
