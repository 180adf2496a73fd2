//! Channel LayerNorm (per spatial location) and ConvNeXt-V2 global response
//! normalization.

use crate::error::AutodiffError;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub(crate) struct LayerNormSaved<T> {
    pub xhat: Vec<T>,
    /// One reciprocal standard deviation per (sample, pixel).
    pub rstd: Vec<T>,
}

fn check_affine<T: Real>(name: &str, t: &Tensor<T>, c: usize) -> Result<(), AutodiffError> {
    if t.len() != c {
        return Err(AutodiffError::Shape(format!("{name} has {} values for {c} channels", t.len())));
    }
    Ok(())
}

pub(crate) fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormSaved<T>), AutodiffError> {
    let [bs, c, h, w] = x.shape();
    check_affine("layer_norm gamma", gamma, c)?;
    check_affine("layer_norm beta", beta, c)?;
    let plane = h * w;
    let inv_c = T::from_f64(1.0 / c as f64);
    let eps = T::from_f64(eps);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); bs * plane];
    let mut out = Tensor::zeros(x.shape());
    for b in 0..bs {
        let xs = x.sample(b);
        let mut mean = vec![T::zero(); plane];
        for ci in 0..c {
            mean.iter_mut().zip(&xs[ci * plane..(ci + 1) * plane]).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![T::zero(); plane];
        for ci in 0..c {
            for ((v, &xv), &m) in var.iter_mut().zip(&xs[ci * plane..(ci + 1) * plane]).zip(&mean) {
                let d = xv - m;
                *v += d * d;
            }
        }
        let rs = &mut rstd[b * plane..(b + 1) * plane];
        for (r, &v) in rs.iter_mut().zip(&var) {
            *r = T::one() / (v * inv_c + eps).sqrt();
        }
        let xh = &mut xhat[b * c * plane..(b + 1) * c * plane];
        let o = &mut out.data_mut()[b * c * plane..(b + 1) * c * plane];
        for ci in 0..c {
            let (g, be) = (gamma.data()[ci], beta.data()[ci]);
            let range = ci * plane..(ci + 1) * plane;
            for (((xhv, ov), &xv), (&m, &r)) in xh[range.clone()]
                .iter_mut()
                .zip(&mut o[range.clone()])
                .zip(&xs[range])
                .zip(mean.iter().zip(rs.iter()))
            {
                *xhv = (xv - m) * r;
                *ov = *xhv * g + be;
            }
        }
    }
    Ok((out, LayerNormSaved { xhat, rstd }))
}

pub(crate) fn layer_norm_backward<T: Real>(
    shape: [usize; 4],
    gamma: &Tensor<T>,
    saved: &LayerNormSaved<T>,
    dout: &Tensor<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [bs, c, h, w] = shape;
    let plane = h * w;
    let inv_c = T::from_f64(1.0 / c as f64);
    let mut dx = vec![T::zero(); dout.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..bs {
        let ds = dout.sample(b);
        let xh = &saved.xhat[b * c * plane..(b + 1) * c * plane];
        let rs = &saved.rstd[b * plane..(b + 1) * plane];
        let mut mean_dxh = vec![T::zero(); plane];
        let mut mean_dxh_xh = vec![T::zero(); plane];
        for ci in 0..c {
            let g = gamma.data()[ci];
            let range = ci * plane..(ci + 1) * plane;
            let mut sg = T::zero();
            let mut sb = T::zero();
            for (((&dv, &xv), m1), m2) in ds[range.clone()]
                .iter()
                .zip(&xh[range])
                .zip(mean_dxh.iter_mut())
                .zip(mean_dxh_xh.iter_mut())
            {
                sg += dv * xv;
                sb += dv;
                let dxh = dv * g;
                *m1 += dxh;
                *m2 += dxh * xv;
            }
            dgamma[ci] += sg;
            dbeta[ci] += sb;
        }
        let dxs = &mut dx[b * c * plane..(b + 1) * c * plane];
        for ci in 0..c {
            let g = gamma.data()[ci];
            let range = ci * plane..(ci + 1) * plane;
            for (p, ((dxv, &dv), &xv)) in dxs[range.clone()].iter_mut().zip(&ds[range.clone()]).zip(&xh[range]).enumerate() {
                let dxh = dv * g;
                *dxv = rs[p] * (dxh - mean_dxh[p] * inv_c - xv * mean_dxh_xh[p] * inv_c);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) struct GrnSaved<T> {
    /// Spatial L2 norm per (sample, channel).
    pub norms: Vec<T>,
    /// Norm divided by (mean norm + eps) per (sample, channel).
    pub ratio: Vec<T>,
    /// Mean norm + eps per sample.
    pub denom: Vec<T>,
}

pub(crate) fn grn<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, GrnSaved<T>), AutodiffError> {
    let [bs, c, _, _] = x.shape();
    check_affine("grn gamma", gamma, c)?;
    check_affine("grn beta", beta, c)?;
    let mut norms = vec![T::zero(); bs * c];
    let mut ratio = vec![T::zero(); bs * c];
    let mut denom = vec![T::zero(); bs];
    let mut out = Tensor::zeros(x.shape());
    let plane = x.plane_len();
    for b in 0..bs {
        for ci in 0..c {
            norms[b * c + ci] = x.plane(b, ci).iter().map(|&v| v * v).sum::<T>().sqrt();
        }
        let mean = norms[b * c..(b + 1) * c].iter().copied().sum::<T>() / T::from_f64(c as f64);
        denom[b] = mean + T::from_f64(eps);
        for ci in 0..c {
            let r = norms[b * c + ci] / denom[b];
            ratio[b * c + ci] = r;
            let scale = gamma.data()[ci] * r + T::one();
            let be = beta.data()[ci];
            let off = (b * c + ci) * plane;
            for (o, &v) in out.data_mut()[off..off + plane].iter_mut().zip(x.plane(b, ci)) {
                *o = v * scale + be;
            }
        }
    }
    Ok((out, GrnSaved { norms, ratio, denom }))
}

pub(crate) fn grn_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &GrnSaved<T>,
    dout: &Tensor<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [bs, c, _, _] = x.shape();
    let plane = x.plane_len();
    let inv_c = T::from_f64(1.0 / c as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..bs {
        // dL/dratio_c = gamma_c * sum(dy * x)
        let mut dratio = vec![T::zero(); c];
        for ci in 0..c {
            let s: T = dout.plane(b, ci).iter().zip(x.plane(b, ci)).map(|(&d, &v)| d * v).sum();
            dratio[ci] = gamma.data()[ci] * s;
            dgamma[ci] += s * saved.ratio[b * c + ci];
            dbeta[ci] += dout.plane(b, ci).iter().copied().sum::<T>();
        }
        let den = saved.denom[b];
        let cross: T = (0..c).map(|ci| dratio[ci] * saved.norms[b * c + ci]).sum::<T>() / (den * den) * inv_c;
        for ci in 0..c {
            let g = gamma.data()[ci];
            let scale = g * saved.ratio[b * c + ci] + T::one();
            let norm = saved.norms[b * c + ci];
            let dnorm = dratio[ci] / den - cross;
            let coef = if norm > T::zero() { dnorm / norm } else { T::zero() };
            let off = (b * c + ci) * plane;
            for ((dxv, &dv), &xv) in dx[off..off + plane].iter_mut().zip(dout.plane(b, ci)).zip(x.plane(b, ci)) {
                *dxv = dv * scale + coef * xv;
            }
        }
    }
    (dx, dgamma, dbeta)
}
