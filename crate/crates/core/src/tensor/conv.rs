//! Spatial kernels on `[N, C, H, W]` tensors: convolution, its adjoint, and
//! 2x2 max pooling. All loops run in a fixed order so results are
//! bit-reproducible.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    // "small" side of the convolution (conv output / transposed-conv input)
    c_small: usize,
    h_small: usize,
    w_small: usize,
    // "large" side (conv input / transposed-conv output)
    c_large: usize,
    h_large: usize,
    w_large: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// Iterates valid `(small, large)` coordinate pairs along one spatial
    /// axis for kernel offset `kk`.
    #[inline]
    fn taps(&self, small_len: usize, large_len: usize, kk: usize) -> impl Iterator<Item = (usize, usize)> {
        let (stride, pad) = (self.stride, self.pad);
        (0..small_len).filter_map(move |o| {
            let i = (o * stride + kk) as isize - pad as isize;
            (i >= 0 && (i as usize) < large_len).then_some((o, i as usize))
        })
    }
}

/// `small[n, cs, o] += Σ w[cs, cl, kh, kw] · large[n, cl, o·s + k − p]`.
/// Weight layout is `[c_small, c_large, k, k]`.
fn correlate(g: &Geometry, large: &[f64], w: &[f64], small: &mut [f64]) {
    let (hs, ws, hl, wl, k) = (g.h_small, g.w_small, g.h_large, g.w_large, g.k);
    let rows: Vec<Vec<(usize, usize)>> = (0..k).map(|kh| g.taps(hs, hl, kh).collect()).collect();
    let cols: Vec<Vec<(usize, usize)>> = (0..k).map(|kw| g.taps(ws, wl, kw).collect()).collect();
    for n in 0..g.n {
        for cs in 0..g.c_small {
            let out = &mut small[(n * g.c_small + cs) * hs * ws..][..hs * ws];
            for cl in 0..g.c_large {
                let inp = &large[(n * g.c_large + cl) * hl * wl..][..hl * wl];
                let wk = &w[(cs * g.c_large + cl) * k * k..][..k * k];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wk[kh * k + kw];
                        for &(oh, ih) in &rows[kh] {
                            let orow = &mut out[oh * ws..][..ws];
                            let irow = &inp[ih * wl..][..wl];
                            for &(ow, iw) in &cols[kw] {
                                orow[ow] += wv * irow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`correlate`] in `large`: scatters `small` back through `w`.
fn scatter(g: &Geometry, small: &[f64], w: &[f64], large: &mut [f64]) {
    let (hs, ws, hl, wl, k) = (g.h_small, g.w_small, g.h_large, g.w_large, g.k);
    let rows: Vec<Vec<(usize, usize)>> = (0..k).map(|kh| g.taps(hs, hl, kh).collect()).collect();
    let cols: Vec<Vec<(usize, usize)>> = (0..k).map(|kw| g.taps(ws, wl, kw).collect()).collect();
    for n in 0..g.n {
        for cl in 0..g.c_large {
            let out = &mut large[(n * g.c_large + cl) * hl * wl..][..hl * wl];
            for cs in 0..g.c_small {
                let inp = &small[(n * g.c_small + cs) * hs * ws..][..hs * ws];
                let wk = &w[(cs * g.c_large + cl) * k * k..][..k * k];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wk[kh * k + kw];
                        for &(oh, ih) in &rows[kh] {
                            let srow = &inp[oh * ws..][..ws];
                            let lrow = &mut out[ih * wl..][..wl];
                            for &(ow, iw) in &cols[kw] {
                                lrow[iw] += wv * srow[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `dw[cs, cl, kh, kw] = Σ small[n, cs, o] · large[n, cl, o·s + k − p]`.
fn weight_grad(g: &Geometry, small: &[f64], large: &[f64]) -> Vec<f64> {
    let (hs, ws, hl, wl, k) = (g.h_small, g.w_small, g.h_large, g.w_large, g.k);
    let rows: Vec<Vec<(usize, usize)>> = (0..k).map(|kh| g.taps(hs, hl, kh).collect()).collect();
    let cols: Vec<Vec<(usize, usize)>> = (0..k).map(|kw| g.taps(ws, wl, kw).collect()).collect();
    let mut dw = vec![0.0; g.c_small * g.c_large * k * k];
    for n in 0..g.n {
        for cs in 0..g.c_small {
            let s = &small[(n * g.c_small + cs) * hs * ws..][..hs * ws];
            for cl in 0..g.c_large {
                let l = &large[(n * g.c_large + cl) * hl * wl..][..hl * wl];
                let dk = &mut dw[(cs * g.c_large + cl) * k * k..][..k * k];
                for kh in 0..k {
                    for kw in 0..k {
                        let mut acc = 0.0;
                        for &(oh, ih) in &rows[kh] {
                            let srow = &s[oh * ws..][..ws];
                            let lrow = &l[ih * wl..][..wl];
                            for &(ow, iw) in &cols[kw] {
                                acc += srow[ow] * lrow[iw];
                            }
                        }
                        dk[kh * k + kw] += acc;
                    }
                }
            }
        }
    }
    dw
}

/// Per-channel sums of an `[N, C, H·W]` buffer.
fn channel_sums(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += x[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
    }
    out
}

fn add_bias(y: &mut [f64], bias: &[f64], n: usize, hw: usize) {
    let c = bias.len();
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate() {
            y[(b * c + ch) * hw..][..hw].iter_mut().for_each(|v| *v = bv);
        }
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::Shape(format!("{what} must be 4-D, got {s:?}"))),
    }
}

fn check_weight(w: &Tensor, bias: Option<&Tensor>, chan_in: usize, in_axis: usize) -> Result<[usize; 4]> {
    let wd = dims4(w, "weight")?;
    if wd[2] != wd[3] {
        return Err(Error::Shape(format!("kernel must be square, got {wd:?}")));
    }
    if wd[in_axis] != chan_in {
        return Err(Error::Shape(format!(
            "weight {wd:?} expects {} input channels, got {chan_in}",
            wd[in_axis]
        )));
    }
    if let Some(b) = bias {
        let out = wd[1 - in_axis];
        if b.shape() != [out] {
            return Err(Error::Shape(format!("bias {:?} does not match {out} output channels", b.shape())));
        }
    }
    Ok(wd)
}

impl Tensor {
    /// 2-D cross-correlation. `weight` is `[C_out, C_in, k, k]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        let [n, ci, h, w] = dims4(self, "conv2d input")?;
        let [co, _, k, _] = check_weight(weight, bias, ci, 1)?;
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if hp < k || wp < k {
            return Err(Error::Shape(format!("padded input {hp}x{wp} smaller than kernel {k}")));
        }
        if (hp - k) % stride != 0 || (wp - k) % stride != 0 {
            return Err(Error::Shape(format!(
                "output extent of {h}x{w} with k={k}, pad={pad}, stride={stride} is not integral"
            )));
        }
        let (ho, wo) = ((hp - k) / stride + 1, (wp - k) / stride + 1);
        let geo = Geometry {
            n,
            c_small: co,
            h_small: ho,
            w_small: wo,
            c_large: ci,
            h_large: h,
            w_large: w,
            k,
            stride,
            pad,
        };
        let mut y = vec![0.0; n * co * ho * wo];
        if let Some(b) = bias {
            add_bias(&mut y, &b.data(), n, ho * wo);
        }
        correlate(&geo, &self.data(), &weight.data(), &mut y);

        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(Tensor::from_op(
            "conv2d",
            vec![n, co, ho, wo],
            y,
            &parents,
            Box::new(move |g, parents, needs| {
                let x = parents[0].data();
                let w = parents[1].data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; x.len()];
                    scatter(&geo, g, &w, &mut dx);
                    dx
                });
                let dw = needs[1].then(|| weight_grad(&geo, g, &x));
                let mut out = vec![dx, dw];
                if parents.len() == 3 {
                    out.push(needs[2].then(|| channel_sums(g, geo.n, co, ho * wo)));
                }
                out
            }),
        ))
    }

    /// Transposed convolution (the adjoint of [`Tensor::conv2d`] in its
    /// input). `weight` is `[C_in, C_out, k, k]`, i.e. the weight of the
    /// forward convolution mapping `C_out` channels to `C_in`. Output extent
    /// is `(H − 1)·stride − 2·pad + k + output_pad`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Tensor> {
        let [n, ci, h, w] = dims4(self, "conv_transpose2d input")?;
        let [_, co, k, _] = check_weight(weight, bias, ci, 0)?;
        if stride == 0 || output_pad >= stride {
            return Err(Error::Shape("output padding must be smaller than the stride".into()));
        }
        let full_h = (h - 1) * stride + k + output_pad;
        let full_w = (w - 1) * stride + k + output_pad;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::Shape("padding leaves an empty output".into()));
        }
        let (ho, wo) = (full_h - 2 * pad, full_w - 2 * pad);
        let geo = Geometry {
            n,
            c_small: ci,
            h_small: h,
            w_small: w,
            c_large: co,
            h_large: ho,
            w_large: wo,
            k,
            stride,
            pad,
        };
        let mut y = vec![0.0; n * co * ho * wo];
        if let Some(b) = bias {
            add_bias(&mut y, &b.data(), n, ho * wo);
        }
        scatter(&geo, &self.data(), &weight.data(), &mut y);

        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(Tensor::from_op(
            "conv_transpose2d",
            vec![n, co, ho, wo],
            y,
            &parents,
            Box::new(move |g, parents, needs| {
                let x = parents[0].data();
                let w = parents[1].data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; x.len()];
                    correlate(&geo, g, &w, &mut dx);
                    dx
                });
                let dw = needs[1].then(|| weight_grad(&geo, &x, g));
                let mut out = vec![dx, dw];
                if parents.len() == 3 {
                    out.push(needs[2].then(|| channel_sums(g, geo.n, co, ho * wo)));
                }
                out
            }),
        ))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool2x2(&self) -> Result<Tensor> {
        let [n, c, h, w] = dims4(self, "max_pool2x2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("max_pool2x2 needs even extents, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data();
        let mut y = Vec::with_capacity(n * c * ho * wo);
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + 2 * oh * w + 2 * ow;
                    for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oh + dh) * w + 2 * ow + dw;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    y.push(x[best]);
                    arg.push(best);
                }
            }
        }
        let len = x.len();
        drop(x);
        Ok(Tensor::from_op(
            "max_pool2x2",
            vec![n, c, ho, wo],
            y,
            &[self],
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0; len];
                for (&gv, &i) in g.iter().zip(&arg) {
                    dx[i] += gv;
                }
                vec![Some(dx)]
            }),
        ))
    }
}
