use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Axis selection for reductions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Axes {
    All,
    /// Listed axes are reduced to extent 1; the rank is kept.
    Some(Vec<usize>),
}

impl From<&[usize]> for Axes {
    fn from(a: &[usize]) -> Self {
        Axes::Some(a.to_vec())
    }
}

/// For each element of `a_shape`, the flat index of the `b` element it pairs
/// with. `b` aligns against the trailing axes of `a`; an extent of 1 stretches.
/// Returns `None` when the shapes are identical.
fn broadcast_map(a_shape: &[usize], b_shape: &[usize]) -> Result<Option<Vec<usize>>> {
    if a_shape == b_shape {
        return Ok(None);
    }
    let err = || Error::Shape(format!("cannot broadcast {b_shape:?} onto {a_shape:?}"));
    if b_shape.len() > a_shape.len() {
        return Err(err());
    }
    let offset = a_shape.len() - b_shape.len();
    for (i, &bd) in b_shape.iter().enumerate() {
        if bd != 1 && bd != a_shape[offset + i] {
            return Err(err());
        }
    }
    // Strides of b, zeroed on stretched axes, laid out against a's rank.
    let mut b_strides = vec![0usize; a_shape.len()];
    let mut s = 1;
    for i in (0..b_shape.len()).rev() {
        if b_shape[i] != 1 {
            b_strides[offset + i] = s;
        }
        s *= b_shape[i];
    }
    Ok(Some(index_map(a_shape, &b_strides)))
}

/// Maps every flat index of `shape` through per-axis `strides`.
fn index_map(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        out.push(flat);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            flat -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn reduce_map(shape: &[usize], axes: &Axes) -> Result<(Vec<usize>, Vec<usize>)> {
    let reduced: Vec<bool> = match axes {
        Axes::All => return Ok((vec![1], vec![0; numel(shape)])),
        Axes::Some(list) => {
            let mut r = vec![false; shape.len()];
            for &a in list {
                if a >= shape.len() {
                    return Err(Error::Axis { axis: a, rank: shape.len() });
                }
                r[a] = true;
            }
            r
        }
    };
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let mut strides = vec![0usize; shape.len()];
    let mut s = 1;
    for ax in (0..shape.len()).rev() {
        if !reduced[ax] {
            strides[ax] = s;
        }
        s *= out_shape[ax];
    }
    Ok((out_shape, index_map(shape, &strides)))
}

fn scatter_sum(g: &[f64], map: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (v, &m) in g.iter().zip(map) {
        out[m] += v;
    }
    out
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        // (gout, a, b) -> (da, db)
        df: fn(f64, f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        let map = broadcast_map(self.shape(), other.shape())?;
        let a = self.data();
        let b = other.data();
        let data: Vec<f64> = match &map {
            None => a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => a.iter().zip(m).map(|(&x, &j)| f(x, b[j])).collect(),
        };
        drop((a, b));
        let b_len = other.numel();
        Ok(Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            &[self, other],
            Box::new(move |g, parents, needs| {
                let a = parents[0].data();
                let b = parents[1].data();
                let bj = |k: usize| map.as_ref().map_or(k, |m| m[k]);
                let mut da = needs[0].then(|| vec![0.0; a.len()]);
                let mut db = needs[1].then(|| vec![0.0; b_len]);
                for k in 0..a.len() {
                    let j = bj(k);
                    let (ga, gb) = df(g[k], a[k], b[j]);
                    if let Some(da) = da.as_mut() {
                        da[k] = ga;
                    }
                    if let Some(db) = db.as_mut() {
                        db[j] += gb;
                    }
                }
                vec![da, db]
            }),
        ))
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        // (gout, x, y) -> dx
        df: fn(f64, f64, f64) -> f64,
    ) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let saved = if self.is_requires_grad() { data.clone() } else { Vec::new() };
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(move |g, parents, _| {
                let x = parents[0].data();
                let dx = g
                    .iter()
                    .zip(x.iter())
                    .zip(&saved)
                    .map(|((&g, &x), &y)| df(g, x, y))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// `self + other`, with `other` broadcast over trailing axes.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| a / b, |g, a, b| (g / b, -g * a / (b * b)))
    }

    pub fn neg(&self) -> Tensor {
        self.unary("neg", |x| -x, |g, _, _| -g)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|&g| g * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |g, x, _| 2.0 * x * g)
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&self) -> Tensor {
        self.unary("abs", f64::abs, |g, x, _| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        })
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |g, _, y| g * y)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&self, eps: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x.max(eps).ln()).collect();
        Tensor::from_op(
            "ln_clamped",
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(move |g, parents, _| {
                let x = parents[0].data();
                let dx = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| if x > eps { g / x } else { 0.0 })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// `max(0, x)`; subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |g, x, _| if x > 0.0 { g } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |g, _, y| g * y * (1.0 - y))
    }

    /// Sum over `axes`. Explicit axes keep their rank (extent 1); `All`
    /// yields shape `[1]`.
    pub fn sum_axes(&self, axes: impl Into<Axes>) -> Result<Tensor> {
        self.reduce(axes.into(), false)
    }

    pub fn mean_axes(&self, axes: impl Into<Axes>) -> Result<Tensor> {
        self.reduce(axes.into(), true)
    }

    pub fn sum(&self) -> Tensor {
        self.reduce(Axes::All, false).expect("full reduction is always valid")
    }

    pub fn mean(&self) -> Tensor {
        self.reduce(Axes::All, true).expect("full reduction is always valid")
    }

    fn reduce(&self, axes: Axes, mean: bool) -> Result<Tensor> {
        let (out_shape, map) = reduce_map(self.shape(), &axes)?;
        let out_len = numel(&out_shape);
        let count = (self.numel() / out_len) as f64;
        let mut data = scatter_sum(&self.data(), &map, out_len);
        if mean {
            data.iter_mut().for_each(|v| *v /= count);
        }
        let factor = if mean { 1.0 / count } else { 1.0 };
        Ok(Tensor::from_op(
            if mean { "mean" } else { "sum" },
            out_shape,
            data,
            &[self],
            Box::new(move |g, _, _| vec![Some(map.iter().map(|&m| g[m] * factor).collect())]),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            &[self],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        for p in parts {
            let ok = p.shape().len() == rank
                && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !ok {
                return Err(Error::Shape(format!(
                    "concat along axis {axis}: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op(
            "concat",
            shape,
            data,
            parts,
            Box::new(move |g, _, needs| {
                let mut out: Vec<Option<Vec<f64>>> = widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &n)| n.then(|| Vec::with_capacity(outer * w)))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (slot, &w) in out.iter_mut().zip(&widths) {
                        if let Some(v) = slot {
                            v.extend_from_slice(&g[off..off + w]);
                        }
                        off += w;
                    }
                }
                out
            }),
        ))
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { axis, rank: shape.len() });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    y[at(k)] /= z;
                }
            }
        }
        drop(x);
        let saved = y.clone();
        Ok(Tensor::from_op(
            "softmax",
            shape,
            y,
            &[self],
            Box::new(move |g, _, _| {
                let y = &saved;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
