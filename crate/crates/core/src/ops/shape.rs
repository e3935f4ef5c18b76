use crate::error::{NumError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.record("sum", Tensor::scalar(s), &[a], |args| {
            let g = args.grad.item();
            vec![Some(Tensor::full(args.inputs[0].shape(), g))]
        })
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.numel().max(1) as f32;
        let m = v.sum() / n;
        self.record("mean", Tensor::scalar(m), &[a], move |args| {
            let g = args.grad.item() / n;
            vec![Some(Tensor::full(args.inputs[0].shape(), g))]
        })
    }

    /// Sums over one axis, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(NumError::InvalidShape {
                op: "sum_axis",
                shape: v.shape().to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, dim, inner) = Tensor::axis_split(v.shape(), axis);
        let mut out_shape = v.shape().to_vec();
        out_shape.remove(axis);
        let mut out = vec![0.0f32; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for k in 0..dim {
                let src = &d[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += x;
                }
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        self.record("sum_axis", out, &[a], move |args| {
            let g = args.grad.data();
            let mut gi = Tensor::zeros(args.inputs[0].shape());
            let gd = gi.data_mut();
            for o in 0..outer {
                for k in 0..dim {
                    gd[(o * dim + k) * inner..(o * dim + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gi)]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.record("reshape", out, &[a], |args| {
            let g = args.grad.clone().reshape(args.inputs[0].shape()).unwrap();
            vec![Some(g)]
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(NumError::InvalidShape {
                op: "transpose",
                shape: v.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let out = transpose2(v);
        self.record("transpose", out, &[a], |args| vec![Some(transpose2(args.grad))])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumError::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(NumError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NumError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            dims.push(s[axis]);
        }
        let (outer, _, inner) = Tensor::axis_split(&first, axis);
        let total: usize = dims.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &d) in parts.iter().zip(&dims) {
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        self.record("concat", out, parts, move |args| {
            let g = args.grad.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(dims.len());
            for (k, &d) in dims.iter().enumerate() {
                if !args.needs(k) {
                    grads.push(None);
                    offset += d;
                    continue;
                }
                let mut gi = Vec::with_capacity(outer * d * inner);
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    gi.extend_from_slice(&g[start..start + d * inner]);
                }
                grads.push(Some(Tensor::new(args.inputs[k].shape(), gi).unwrap()));
                offset += d;
            }
            grads
        })
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() || start + len > v.shape()[axis] {
            return Err(NumError::InvalidShape {
                op: "slice",
                shape: v.shape().to_vec(),
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let (outer, dim, inner) = Tensor::axis_split(v.shape(), axis);
        let mut out_shape = v.shape().to_vec();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * dim + start) * inner;
            out.extend_from_slice(&v.data()[s..s + len * inner]);
        }
        let out = Tensor::new(&out_shape, out)?;
        self.record("slice", out, &[a], move |args| {
            let mut gi = Tensor::zeros(args.inputs[0].shape());
            let g = args.grad.data();
            let gd = gi.data_mut();
            for o in 0..outer {
                let s = (o * dim + start) * inner;
                gd[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gi)]
        })
    }

    /// Selects rows of a rank-2 tensor; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(NumError::InvalidShape {
                op: "gather_rows",
                shape: v.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (n, k) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(NumError::InvalidArgument(format!("row {bad} out of range {n}")));
        }
        let mut out = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            out.extend_from_slice(&v.data()[r * k..(r + 1) * k]);
        }
        let out = Tensor::new(&[rows.len(), k], out)?;
        let rows = rows.to_vec();
        self.record("gather_rows", out, &[a], move |args| {
            let mut gi = Tensor::zeros(args.inputs[0].shape());
            let g = args.grad.data();
            let gd = gi.data_mut();
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..k {
                    gd[r * k + j] += g[i * k + j];
                }
            }
            vec![Some(gi)]
        })
    }

    /// Returns `base` with the listed rows overwritten by the rows of `values`.
    /// Row indices must be distinct.
    pub fn scatter_rows(&mut self, base: Var, rows: &[usize], values: Var) -> Result<Var> {
        let (bv, vv) = (self.value(base), self.value(values));
        if bv.rank() != 2 || vv.rank() != 2 || bv.shape()[1] != vv.shape()[1] || vv.shape()[0] != rows.len() {
            return Err(NumError::ShapeMismatch {
                op: "scatter_rows",
                lhs: bv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let (n, k) = (bv.shape()[0], bv.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(NumError::InvalidArgument(format!("row {bad} out of range {n}")));
        }
        let mut out = bv.clone();
        for (i, &r) in rows.iter().enumerate() {
            out.data_mut()[r * k..(r + 1) * k].copy_from_slice(&vv.data()[i * k..(i + 1) * k]);
        }
        let rows = rows.to_vec();
        self.record("scatter_rows", out, &[base, values], move |args| {
            let g = args.grad;
            let gb = args.needs(0).then(|| {
                let mut gb = g.clone();
                for &r in &rows {
                    gb.data_mut()[r * k..(r + 1) * k].fill(0.0);
                }
                gb
            });
            let gv = args.needs(1).then(|| {
                let mut gv = Vec::with_capacity(rows.len() * k);
                for &r in &rows {
                    gv.extend_from_slice(&g.data()[r * k..(r + 1) * k]);
                }
                Tensor::new(&[rows.len(), k], gv).unwrap()
            });
            vec![gb, gv]
        })
    }

    /// Mean squared difference between two equal-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Blocks gradient flow: returns a constant copy of `a`'s value.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }
}

pub(crate) fn transpose2(v: &Tensor) -> Tensor {
    let (r, c) = (v.shape()[0], v.shape()[1]);
    let d = v.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).unwrap()
}
