//! Differentiable primitives. Each method records one node on the tape.

use std::rc::Rc;

use super::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

/// Static index map `out[o] = in[idx[o]]` applied independently to every leading
/// slice; [`GatherMap::ZERO`] reads an implicit zero. Covers im2col with padding,
/// kernel rotations, image rotations and translations, and axis permutations.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherMap {
    pub in_len: usize,
    pub out_shape: Vec<usize>,
    pub idx: Vec<u32>,
}

impl GatherMap {
    pub const ZERO: u32 = u32::MAX;

    pub fn new(in_len: usize, out_shape: Vec<usize>, idx: Vec<u32>) -> Self {
        assert_eq!(numel(&out_shape), idx.len(), "gather map size");
        assert!(idx.iter().all(|&i| i == Self::ZERO || (i as usize) < in_len));
        Self {
            in_len,
            out_shape,
            idx,
        }
    }

    pub fn out_len(&self) -> usize {
        self.idx.len()
    }

    /// Applies the map to a plain tensor slice.
    pub fn apply<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        self.idx
            .iter()
            .map(|&i| if i == Self::ZERO { T::zero() } else { input[i as usize] })
            .collect()
    }
}

/// Max over fixed windows: `out[o] = max_w in[idx[o * window + w]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolMap {
    pub in_len: usize,
    pub out_shape: Vec<usize>,
    pub window: usize,
    pub idx: Vec<u32>,
}

impl PoolMap {
    pub fn new(in_len: usize, out_shape: Vec<usize>, window: usize, idx: Vec<u32>) -> Self {
        assert!(window > 0);
        assert_eq!(numel(&out_shape) * window, idx.len(), "pool map size");
        assert!(idx.iter().all(|&i| (i as usize) < in_len));
        Self {
            in_len,
            out_shape,
            window,
            idx,
        }
    }
}

fn split_lead(shape: &[usize], lead: usize, inner_len: usize, op: &'static str) -> Result<Vec<usize>> {
    if lead > shape.len() || numel(&shape[lead..]) != inner_len {
        return Err(Error::shape(op, shape, &[inner_len]));
    }
    Ok(shape[..lead].to_vec())
}

impl<'t, T: Scalar> Var<'t, T> {
    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let v = self.value().zip_map(&other.value(), "add", |a, b| a + b)?;
        Ok(self.tape.push(
            v,
            vec![self.id, other.id],
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        ))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let v = self.value().zip_map(&other.value(), "sub", |a, b| a - b)?;
        Ok(self.tape.push(
            v,
            vec![self.id, other.id],
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.scale(-T::one()))]),
        ))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, "mul", |x, y| x * y)?;
        Ok(self.tape.push(
            v,
            vec![self.id, other.id],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, "mul", |x, y| x * y).unwrap()),
                    needs[1].then(|| g.zip_map(&a, "mul", |x, y| x * y).unwrap()),
                ]
            }),
        ))
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, "div", |x, y| x / y)?;
        Ok(self.tape.push(
            v,
            vec![self.id, other.id],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.zip_map(&b, "div", |x, y| x / y).unwrap());
                let gb = needs[1].then(|| {
                    let ratio = a.zip_map(&b, "div", |x, y| x / (y * y)).unwrap();
                    g.zip_map(&ratio, "div", |x, r| -x * r).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::from_f64(c);
        let v = self.value().scale(c);
        self.tape
            .push(v, vec![self.id], Box::new(move |g, _| vec![Some(g.scale(c))]))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::from_f64(c);
        let v = self.value().map(|x| x + c);
        self.tape.push(v, vec![self.id], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn relu(self) -> Var<'t, T> {
        let a = self.value();
        let v = a.map(|x| x.max(T::zero()));
        self.tape.push(
            v,
            vec![self.id],
            Box::new(move |g, _| {
                vec![Some(
                    g.zip_map(&a, "relu", |gv, x| if x > T::zero() { gv } else { T::zero() })
                        .unwrap(),
                )]
            }),
        )
    }

    pub fn ln(self) -> Var<'t, T> {
        let a = self.value();
        let v = a.map(|x| x.ln());
        self.tape.push(
            v,
            vec![self.id],
            Box::new(move |g, _| vec![Some(g.zip_map(&a, "ln", |gv, x| gv / x).unwrap())]),
        )
    }

    /// Sum of all entries (fixed left-to-right order) as a shape-`[]` scalar.
    pub fn sum(self) -> Var<'t, T> {
        let a = self.value();
        let shape = a.shape().to_vec();
        self.tape.push(
            Tensor::scalar(a.sum()),
            vec![self.id],
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Repeats a single-element value over `shape`.
    pub fn broadcast(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.len() != 1 {
            return Err(Error::shape("broadcast", a.shape(), shape));
        }
        let src_shape = a.shape().to_vec();
        Ok(self.tape.push(
            Tensor::full(shape.to_vec(), a.item()),
            vec![self.id],
            Box::new(move |g, _| vec![Some(Tensor::full(src_shape.clone(), g.sum()))]),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let src_shape = a.shape().to_vec();
        let v = (*a).clone().reshape(shape.to_vec())?;
        Ok(self.tape.push(
            v,
            vec![self.id],
            Box::new(move |g, _| vec![Some(g.clone().reshape(src_shape.clone()).unwrap())]),
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        };
        if k != k2 {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), &mut c, n as isize, 1);
        Ok(self.tape.push(
            Tensor::new(vec![m, n], c)?,
            vec![self.id, other.id],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    // g [m,n] * b^T [n,k]
                    let mut out = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), n as isize, 1, b.data(), 1, n as isize, T::zero(), &mut out, k as isize, 1);
                    Tensor::new(vec![m, k], out).unwrap()
                });
                let gb = needs[1].then(|| {
                    // a^T [k,m] * g [m,n]
                    let mut out = vec![T::zero(); k * n];
                    T::gemm(k, m, n, a.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
                    Tensor::new(vec![k, n], out).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[n, k2]) = (a.shape(), b.shape()) else {
            return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
        };
        if k != k2 {
            return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
        }
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), k as isize, 1, b.data(), 1, k as isize, T::zero(), &mut c, n as isize, 1);
        Ok(self.tape.push(
            Tensor::new(vec![m, n], c)?,
            vec![self.id, other.id],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    // g [m,n] * b [n,k]
                    let mut out = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), n as isize, 1, b.data(), k as isize, 1, T::zero(), &mut out, k as isize, 1);
                    Tensor::new(vec![m, k], out).unwrap()
                });
                let gb = needs[1].then(|| {
                    // g^T [n,m] * a [m,k]
                    let mut out = vec![T::zero(); n * k];
                    T::gemm(n, m, k, g.data(), 1, n as isize, a.data(), k as isize, 1, T::zero(), &mut out, k as isize, 1);
                    Tensor::new(vec![n, k], out).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Adds `bias[c]` along axis `axis` (of length `c`).
    pub fn add_bias(self, bias: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        self.same_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        let shape = x.shape().to_vec();
        if axis >= shape.len() || b.len() != shape[axis] {
            return Err(Error::shape("add_bias", &shape, b.shape()));
        }
        let channels = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut v = (*x).clone();
        for (i, val) in v.data_mut().iter_mut().enumerate() {
            *val += b.data()[(i / inner) % channels];
        }
        let bias_shape = b.shape().to_vec();
        Ok(self.tape.push(
            v,
            vec![self.id, bias.id],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![T::zero(); channels];
                    for (i, &gv) in g.data().iter().enumerate() {
                        acc[(i / inner) % channels] += gv;
                    }
                    Tensor::new(bias_shape.clone(), acc).unwrap()
                });
                vec![needs[0].then(|| g.clone()), gb]
            }),
        ))
    }

    /// Batched product `out[i] = a[i] * z[i]` with `z: [batch, K, P]`. `a` is either
    /// shared (`[O, K]`) or per-sample (`[batch, O, K]`).
    pub fn bmm(self, z: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&z);
        let (a, zv) = (self.value(), z.value());
        let &[batch, k, p] = zv.shape() else {
            return Err(Error::shape("bmm", a.shape(), zv.shape()));
        };
        let (shared, o) = match *a.shape() {
            [o, k2] if k2 == k => (true, o),
            [b2, o, k2] if b2 == batch && k2 == k => (false, o),
            _ => return Err(Error::shape("bmm", a.shape(), zv.shape())),
        };
        let a_stride = if shared { 0 } else { o * k };
        let mut out = vec![T::zero(); batch * o * p];
        for i in 0..batch {
            T::gemm(
                o,
                k,
                p,
                &a.data()[i * a_stride..],
                k as isize,
                1,
                &zv.data()[i * k * p..],
                p as isize,
                1,
                T::zero(),
                &mut out[i * o * p..],
                p as isize,
                1,
            );
        }
        let a_shape = a.shape().to_vec();
        Ok(self.tape.push(
            Tensor::new(vec![batch, o, p], out)?,
            vec![self.id, z.id],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut acc = vec![T::zero(); a.len()];
                    for i in 0..batch {
                        // g[i] [o,p] * z[i]^T [p,k]
                        let beta = if shared && i > 0 { T::one() } else { T::zero() };
                        T::gemm(
                            o,
                            p,
                            k,
                            &g.data()[i * o * p..],
                            p as isize,
                            1,
                            &zv.data()[i * k * p..],
                            1,
                            p as isize,
                            beta,
                            &mut acc[i * a_stride..],
                            k as isize,
                            1,
                        );
                    }
                    Tensor::new(a_shape.clone(), acc).unwrap()
                });
                let gz = needs[1].then(|| {
                    let mut acc = vec![T::zero(); batch * k * p];
                    for i in 0..batch {
                        // a[i]^T [k,o] * g[i] [o,p]
                        T::gemm(
                            k,
                            o,
                            p,
                            &a.data()[i * a_stride..],
                            1,
                            k as isize,
                            &g.data()[i * o * p..],
                            p as isize,
                            1,
                            T::zero(),
                            &mut acc[i * k * p..],
                            p as isize,
                            1,
                        );
                    }
                    Tensor::new(vec![batch, k, p], acc).unwrap()
                });
                vec![ga, gz]
            }),
        ))
    }

    /// Applies `map` to every slice below the first `lead` axes.
    pub fn gather(self, map: &Rc<GatherMap>, lead: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut shape = split_lead(x.shape(), lead, map.in_len, "gather")?;
        let outer = numel(&shape);
        shape.extend_from_slice(&map.out_shape);
        let out_len = map.out_len();
        let mut out = Vec::with_capacity(outer * out_len);
        for s in 0..outer {
            out.extend(map.apply(&x.data()[s * map.in_len..(s + 1) * map.in_len]));
        }
        let map = Rc::clone(map);
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            vec![self.id],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); outer * map.in_len];
                for s in 0..outer {
                    let gs = &g.data()[s * out_len..(s + 1) * out_len];
                    let dst = &mut gx[s * map.in_len..(s + 1) * map.in_len];
                    for (&i, &gv) in map.idx.iter().zip(gs) {
                        if i != GatherMap::ZERO {
                            dst[i as usize] += gv;
                        }
                    }
                }
                vec![Some(Tensor::new(in_shape.clone(), gx).unwrap())]
            }),
        ))
    }

    /// Window maximum per `map`, applied below the first `lead` axes. The gradient
    /// goes to the first maximal entry of each window.
    pub fn max_pool(self, map: &Rc<PoolMap>, lead: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut shape = split_lead(x.shape(), lead, map.in_len, "max_pool")?;
        let outer = numel(&shape);
        shape.extend_from_slice(&map.out_shape);
        let out_len = numel(&map.out_shape);
        let mut out = Vec::with_capacity(outer * out_len);
        let mut argmax = Vec::with_capacity(outer * out_len);
        for s in 0..outer {
            let base = s * map.in_len;
            for window in map.idx.chunks(map.window) {
                let mut best = window[0] as usize;
                for &i in &window[1..] {
                    if x.data()[base + i as usize] > x.data()[base + best] {
                        best = i as usize;
                    }
                }
                out.push(x.data()[base + best]);
                argmax.push(base + best);
            }
        }
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            vec![self.id],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(in_shape.clone());
                let d = gx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean over the last `axes` axes.
    pub fn mean_trailing(self, axes: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axes == 0 || axes > x.shape().len() {
            return Err(Error::invalid(format!("mean_trailing({axes}) on shape {:?}", x.shape())));
        }
        let keep = x.shape()[..x.shape().len() - axes].to_vec();
        let inner = numel(&x.shape()[keep.len()..]);
        let outer = numel(&keep);
        let inv = T::from_f64(1.0 / inner as f64);
        let out: Vec<T> = (0..outer)
            .map(|s| x.data()[s * inner..(s + 1) * inner].iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push(
            Tensor::new(keep, out)?,
            vec![self.id],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(outer * inner);
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv * inv, inner));
                }
                vec![Some(Tensor::new(in_shape.clone(), gx).unwrap())]
            }),
        ))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p);
            let s = v.shape();
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(Error::shape("concat", &base, s));
            }
            widths.push(s[axis]);
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for s in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[s * w * inner..(s + 1) * w * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.tape.push(
            Tensor::new(shape, out)?,
            parts.iter().map(|p| p.id).collect(),
            Box::new(move |g, needs| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (j, &w) in widths.iter().enumerate() {
                    grads.push(needs[j].then(|| {
                        let mut gp = Vec::with_capacity(outer * w * inner);
                        for s in 0..outer {
                            let start = (s * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[start..start + w * inner]);
                        }
                        Tensor::new(shapes[j].clone(), gp).unwrap()
                    }));
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let z = self.value();
        let &[batch, classes] = z.shape() else {
            return Err(Error::invalid(format!("cross_entropy expects [batch, classes], got {:?}", z.shape())));
        };
        if labels.len() != batch || labels.iter().any(|&y| y >= classes) {
            return Err(Error::invalid(format!(
                "cross_entropy: {} labels for batch {batch} with {classes} classes",
                labels.len()
            )));
        }
        let mut probs = vec![T::zero(); batch * classes];
        let mut loss = T::zero();
        for i in 0..batch {
            let row = &z.data()[i * classes..(i + 1) * classes];
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut s = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[i * classes + j] = e;
                s += e;
            }
            for p in &mut probs[i * classes..(i + 1) * classes] {
                *p = *p / s;
            }
            loss += s.ln() + m - row[labels[i]];
        }
        let inv = T::from_f64(1.0 / batch as f64);
        let labels = labels.to_vec();
        Ok(self.tape.push(
            Tensor::scalar(loss * inv),
            vec![self.id],
            Box::new(move |g, _| {
                let scale = g.item() * inv;
                let mut gz = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    gz[i * classes + y] = gz[i * classes + y] - T::one();
                }
                for v in &mut gz {
                    *v = *v * scale;
                }
                vec![Some(Tensor::new(vec![batch, classes], gz).unwrap())]
            }),
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let pred = self.value();
        if pred.shape() != target.shape() {
            return Err(Error::shape("mse_loss", pred.shape(), target.shape()));
        }
        let diff = pred.zip_map(target, "mse_loss", |a, b| a - b)?;
        let n = T::from_f64(diff.len() as f64);
        let loss = diff.data().iter().fold(T::zero(), |acc, &d| acc + d * d) / n;
        Ok(self.tape.push(
            Tensor::scalar(loss),
            vec![self.id],
            Box::new(move |g, _| {
                let c = g.item() * T::from_f64(2.0) / n;
                vec![Some(diff.scale(c))]
            }),
        ))
    }
}

/// Mean squared error between a recorded prediction and a constant target.
pub fn mse_loss<'t, T: Scalar>(pred: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    pred.mse(target)
}
