//! Elementwise, reduction and layout ops.

use super::{gemm_nn, gemm_nt, gemm_tn, numel, Tensor};
use crate::error::{Error, Result};

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// For every element of `out`, the flat offset of the broadcast source in `src`.
fn broadcast_offsets(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        let dim = if i >= pad { src[i - pad] } else { 1 };
        strides[i] = if dim == 1 { 0 } else { acc };
        acc *= dim;
    }
    let total = numel(out);
    let mut offsets = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        offsets.push(offset);
        for d in (0..rank).rev() {
            index[d] += 1;
            offset += strides[d];
            if index[d] < out[d] {
                break;
            }
            offset -= strides[d] * out[d];
            index[d] = 0;
        }
    }
    offsets
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        }
    }
}

fn binary(a: &Tensor, b: &Tensor, kind: Binary) -> Result<Tensor> {
    let name = kind.name();
    if a.shape() == b.shape() {
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| kind.apply(x, y)).collect();
        let backward = Box::new(move |g: &[f64], parents: &[Tensor], _: &[f64]| {
            let (pa, pb) = (&parents[0], &parents[1]);
            let ga = pa.requires_grad().then(|| match kind {
                Binary::Add | Binary::Sub => g.to_vec(),
                Binary::Mul => g.iter().zip(pb.data()).map(|(g, y)| g * y).collect(),
            });
            let gb = pb.requires_grad().then(|| match kind {
                Binary::Add => g.to_vec(),
                Binary::Sub => g.iter().map(|g| -g).collect(),
                Binary::Mul => g.iter().zip(pa.data()).map(|(g, x)| g * x).collect(),
            });
            vec![ga, gb]
        });
        return Ok(Tensor::from_op(name, a.shape().to_vec(), data, &[a, b], backward));
    }

    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let oa = broadcast_offsets(&out_shape, a.shape());
    let ob = broadcast_offsets(&out_shape, b.shape());
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = oa.iter().zip(&ob).map(|(&i, &j)| kind.apply(ad[i], bd[j])).collect();
    let backward = Box::new(move |g: &[f64], parents: &[Tensor], _: &[f64]| {
        let (pa, pb) = (&parents[0], &parents[1]);
        let ga = pa.requires_grad().then(|| {
            let mut acc = vec![0.0; pa.numel()];
            for (k, (&i, &j)) in oa.iter().zip(&ob).enumerate() {
                acc[i] += match kind {
                    Binary::Add | Binary::Sub => g[k],
                    Binary::Mul => g[k] * pb.data()[j],
                };
            }
            acc
        });
        let gb = pb.requires_grad().then(|| {
            let mut acc = vec![0.0; pb.numel()];
            for (k, (&i, &j)) in oa.iter().zip(&ob).enumerate() {
                acc[j] += match kind {
                    Binary::Add => g[k],
                    Binary::Sub => -g[k],
                    Binary::Mul => g[k] * pa.data()[i],
                };
            }
            acc
        });
        vec![ga, gb]
    });
    Ok(Tensor::from_op(name, out_shape, data, &[a, b], backward))
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Sub)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Mul)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|g| g * factor).collect())]),
        )
    }

    pub fn add_scalar(&self, value: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + value).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(|g, _, out| vec![Some(g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect())]),
        )
    }

    /// `x · sigmoid(x)`
    pub fn swish(&self) -> Tensor {
        let data = self.data().iter().map(|&v| v * sigmoid_scalar(v)).collect();
        Tensor::from_op(
            "swish",
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(|g, parents, _| {
                let x = parents[0].data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| {
                            let s = sigmoid_scalar(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                )]
            }),
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![total],
            &[self],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            &[self],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Swap the last two axes (rank ≥ 2).
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r} < 2")));
        }
        let (rows, cols) = (self.shape()[r - 2], self.shape()[r - 1]);
        let batch = self.numel() / (rows * cols).max(1);
        let swap = move |src: &[f64]| {
            let mut dst = vec![0.0; src.len()];
            for b in 0..batch {
                let off = b * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        dst[off + j * rows + i] = src[off + i * cols + j];
                    }
                }
            }
            dst
        };
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let data = swap(self.data());
        // gradient of a transpose is the transpose back, dims reversed
        let back = move |g: &[f64]| {
            let mut dst = vec![0.0; g.len()];
            for b in 0..batch {
                let off = b * rows * cols;
                for j in 0..cols {
                    for i in 0..rows {
                        dst[off + i * cols + j] = g[off + j * rows + i];
                    }
                }
            }
            dst
        };
        Ok(Tensor::from_op(
            "transpose",
            shape,
            data,
            &[self],
            Box::new(move |g, _, _| vec![Some(back(g))]),
        ))
    }

    /// Matrix product: `(m,k)·(k,n)` or batched `(b,m,k)·(b,k,n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("incompatible operands {sa:?} and {sb:?}"),
                ))
            }
        };
        let mut out = vec![0.0; batch * m * n];
        for b in 0..batch {
            gemm_nn(
                m,
                k,
                n,
                &self.data()[b * m * k..],
                &other.data()[b * k * n..],
                &mut out[b * m * n..(b + 1) * m * n],
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let backward = Box::new(move |g: &[f64], parents: &[Tensor], _: &[f64]| {
            let (a, bt) = (&parents[0], &parents[1]);
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![0.0; batch * m * k];
                for b in 0..batch {
                    // dA = dC · Bᵀ
                    gemm_nt(
                        m,
                        n,
                        k,
                        &g[b * m * n..],
                        &bt.data()[b * k * n..],
                        &mut ga[b * m * k..(b + 1) * m * k],
                    );
                }
                ga
            });
            let gb = bt.requires_grad().then(|| {
                let mut gb = vec![0.0; batch * k * n];
                for b in 0..batch {
                    // dB = Aᵀ · dC
                    gemm_tn(
                        k,
                        m,
                        n,
                        &a.data()[b * m * k..],
                        &g[b * m * n..],
                        &mut gb[b * k * n..(b + 1) * k * n],
                    );
                }
                gb
            });
            vec![ga, gb]
        });
        Ok(Tensor::from_op("matmul", shape, out, &[self, other], backward))
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len).map(|j| x[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        let backward = Box::new(move |g: &[f64], _: &[Tensor], y: &[f64]| {
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..len {
                        let idx = base + j * inner;
                        gx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op("softmax", shape, out, &[self], backward))
    }
}

/// Concatenate along `axis`; all other dims must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    for p in parts {
        let ok = p.rank() == rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} does not match {:?} off axis {axis}", p.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let row: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * row);
    for o in 0..outer {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let backward = Box::new(move |g: &[f64], parents: &[Tensor], _: &[f64]| {
        let mut grads: Vec<Option<Vec<f64>>> = parents
            .iter()
            .map(|p| p.requires_grad().then(|| Vec::with_capacity(p.numel())))
            .collect();
        for o in 0..outer {
            let mut start = o * row;
            for (slot, &w) in grads.iter_mut().zip(&widths) {
                if let Some(buf) = slot {
                    buf.extend_from_slice(&g[start..start + w]);
                }
                start += w;
            }
        }
        grads
    });
    Ok(Tensor::from_op("concat", shape, out, parts, backward))
}
