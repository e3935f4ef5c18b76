use crate::error::{NumError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Right-hand side of an elementwise op: an equal-shape (or single-element)
/// variable, or a plain scalar.
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Var(Var),
    Scalar(f32),
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Var(v)
    }
}

impl From<f32> for Operand {
    fn from(s: f32) -> Self {
        Operand::Scalar(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Square,
    Abs,
    Sigmoid,
    Softplus,
    Relu,
    Silu,
    Tanh,
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl UnaryOp {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Ln => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::Abs => x.abs(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Exp => y,
            UnaryOp::Ln => 1.0 / x,
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnaryOp::Tanh => 1.0 - y * y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Ln => "ln",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Square => "square",
            UnaryOp::Abs => "abs",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Relu => "relu",
            UnaryOp::Silu => "silu",
            UnaryOp::Tanh => "tanh",
        }
    }
}

fn binary_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

fn apply_binary(op: BinaryOp, a: f32, b: f32) -> f32 {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => a / b,
    }
}

impl Tape {
    /// Elementwise `a op b` where `b` is a scalar, an equal-shape variable, or
    /// a single-element variable broadcast over `a`.
    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: impl Into<Operand>) -> Result<Var> {
        match b.into() {
            Operand::Scalar(s) => self.binary_scalar(op, a, s),
            Operand::Var(b) => self.binary_var(op, a, b),
        }
    }

    fn binary_scalar(&mut self, op: BinaryOp, a: Var, s: f32) -> Result<Var> {
        let av = self.value(a);
        let out = av.map(|x| apply_binary(op, x, s));
        self.record(binary_name(op), out, &[a], move |args| {
            let g = args.grad;
            let ga = match op {
                BinaryOp::Add | BinaryOp::Sub => g.clone(),
                BinaryOp::Mul => g.map(|x| x * s),
                BinaryOp::Div => g.map(|x| x / s),
            };
            vec![Some(ga)]
        })
    }

    fn binary_var(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let name = binary_name(op);
        if av.shape() == bv.shape() {
            let out = av.zip_map(bv, |x, y| apply_binary(op, x, y))?;
            return self.record(name, out, &[a, b], move |args| {
                let (g, x, y) = (args.grad, args.inputs[0], args.inputs[1]);
                let ga = args.needs(0).then(|| match op {
                    BinaryOp::Add | BinaryOp::Sub => g.clone(),
                    BinaryOp::Mul => g.zip_map(y, |g, y| g * y).unwrap(),
                    BinaryOp::Div => g.zip_map(y, |g, y| g / y).unwrap(),
                });
                let gb = args.needs(1).then(|| match op {
                    BinaryOp::Add => g.clone(),
                    BinaryOp::Sub => g.map(|g| -g),
                    BinaryOp::Mul => g.zip_map(x, |g, x| g * x).unwrap(),
                    BinaryOp::Div => {
                        let gx = g.zip_map(x, |g, x| g * x).unwrap();
                        gx.zip_map(y, |gx, y| -gx / (y * y)).unwrap()
                    }
                });
                vec![ga, gb]
            });
        }
        if bv.numel() == 1 {
            let s = bv.item();
            let out = av.map(|x| apply_binary(op, x, s));
            let b_shape = bv.shape().to_vec();
            return self.record(name, out, &[a, b], move |args| {
                let (g, x) = (args.grad, args.inputs[0]);
                let s = args.inputs[1].item();
                let ga = args.needs(0).then(|| match op {
                    BinaryOp::Add | BinaryOp::Sub => g.clone(),
                    BinaryOp::Mul => g.map(|g| g * s),
                    BinaryOp::Div => g.map(|g| g / s),
                });
                let gb = args.needs(1).then(|| {
                    let total: f64 = match op {
                        BinaryOp::Add => g.data().iter().map(|&v| v as f64).sum(),
                        BinaryOp::Sub => -g.data().iter().map(|&v| v as f64).sum::<f64>(),
                        BinaryOp::Mul => g
                            .data()
                            .iter()
                            .zip(x.data())
                            .map(|(&g, &x)| (g * x) as f64)
                            .sum(),
                        BinaryOp::Div => g
                            .data()
                            .iter()
                            .zip(x.data())
                            .map(|(&g, &x)| (-g * x / (s * s)) as f64)
                            .sum(),
                    };
                    Tensor::full(&b_shape, total as f32)
                });
                vec![ga, gb]
            });
        }
        Err(NumError::ShapeMismatch {
            op: name,
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        })
    }

    pub fn add(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| op.apply(x));
        self.record(op.name(), out, &[a], move |args| {
            let (g, x, y) = (args.grad, args.inputs[0], args.output);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&g, &x), &y)| g * op.derivative(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), data).unwrap())]
        })
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Ln, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Silu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, a)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the value was clamped.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var> {
        let out = self.value(a).clamp(lo, hi);
        self.record("clamp", out, &[a], move |args| {
            let g = args
                .grad
                .zip_map(args.inputs[0], |g, x| if x < lo || x > hi { 0.0 } else { g })
                .unwrap();
            vec![Some(g)]
        })
    }

    /// Adds `b` (shape `[x.shape[axis]]`) to every slice of `x` along `axis`.
    pub fn add_along(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        self.along(x, b, axis, false)
    }

    /// Multiplies every slice of `x` along `axis` by the matching entry of `b`.
    pub fn mul_along(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        self.along(x, b, axis, true)
    }

    fn along(&mut self, x: Var, b: Var, axis: usize, multiply: bool) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let op = if multiply { "mul_along" } else { "add_along" };
        if axis >= xv.rank() || bv.rank() != 1 || bv.numel() != xv.shape()[axis] {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (outer, dim, inner) = Tensor::axis_split(xv.shape(), axis);
        let mut out = xv.clone();
        {
            let o = out.data_mut();
            let bd = bv.data();
            for a in 0..outer {
                for d in 0..dim {
                    let base = (a * dim + d) * inner;
                    let s = bd[d];
                    for v in &mut o[base..base + inner] {
                        if multiply {
                            *v *= s;
                        } else {
                            *v += s;
                        }
                    }
                }
            }
        }
        self.record(op, out, &[x, b], move |args| {
            let (g, xv, bv) = (args.grad, args.inputs[0], args.inputs[1]);
            let gd = g.data();
            let gx = args.needs(0).then(|| {
                if multiply {
                    let mut gx = g.clone();
                    let d_ = gx.data_mut();
                    for a in 0..outer {
                        for d in 0..dim {
                            let base = (a * dim + d) * inner;
                            let s = bv.data()[d];
                            for v in &mut d_[base..base + inner] {
                                *v *= s;
                            }
                        }
                    }
                    gx
                } else {
                    g.clone()
                }
            });
            let gb = args.needs(1).then(|| {
                let mut acc = vec![0.0f64; dim];
                for a in 0..outer {
                    for (d, acc) in acc.iter_mut().enumerate() {
                        let base = (a * dim + d) * inner;
                        if multiply {
                            let xd = &xv.data()[base..base + inner];
                            *acc += gd[base..base + inner]
                                .iter()
                                .zip(xd)
                                .map(|(&g, &x)| (g * x) as f64)
                                .sum::<f64>();
                        } else {
                            *acc += gd[base..base + inner].iter().map(|&g| g as f64).sum::<f64>();
                        }
                    }
                }
                Tensor::from_vec(acc.into_iter().map(|v| v as f32).collect())
            });
            vec![gx, gb]
        })
    }
}
