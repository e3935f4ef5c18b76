use crate::error::{NumError, Result};
use crate::ops::linalg::{gemm, MatRef};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (np, pad) = (g.col_cols(), g.pad as isize);
    let mut cols = vec![0.0f32; g.col_rows() * np];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let drow = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        if jj >= 0 && jj < g.w as isize {
                            *d = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (np, pad) = (g.col_cols(), g.pad as isize);
    let mut x = vec![0.0f32; g.c * g.h * g.w];
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * np..(row + 1) * np];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Tape {
    /// 2-D cross-correlation of a `[C×H×W]` input with an `[O×C×kh×kw]`
    /// kernel, zero padding on every side, optional `[O]` bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (iv, kv) = (self.value(input), self.value(kernel));
        if iv.rank() != 3 || kv.rank() != 4 || iv.shape()[0] != kv.shape()[1] {
            return Err(NumError::ShapeMismatch {
                op: "conv2d",
                lhs: iv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(NumError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (c, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
        let (o, kh, kw) = (kv.shape()[0], kv.shape()[2], kv.shape()[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(NumError::InvalidArgument(format!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let g = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let cols = im2col(iv.data(), &g);
        let (kr, np) = (g.col_rows(), g.col_cols());
        let mut out = vec![0.0; o * np];
        gemm(MatRef::new(kv.data(), o, kr), MatRef::new(&cols, kr, np), 0.0, &mut out);
        let mut out = Tensor::new(&[o, ho, wo], out)?;
        let mut inputs = vec![input, kernel];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return Err(NumError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: bv.shape().to_vec(),
                });
            }
            let bd = bv.data().to_vec();
            for (oc, chunk) in out.data_mut().chunks_mut(np).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bd[oc]);
            }
            inputs.push(b);
        }
        let has_bias = bias.is_some();
        self.record("conv2d", out, &inputs, move |args| {
            let gm = MatRef::new(args.grad.data(), o, np);
            let gin = args.needs(0).then(|| {
                let mut gcols = vec![0.0; kr * np];
                gemm(MatRef::new(args.inputs[1].data(), o, kr).t(), gm, 0.0, &mut gcols);
                Tensor::new(&[c, h, w], col2im(&gcols, &g)).unwrap()
            });
            let gk = args.needs(1).then(|| {
                let mut gk = vec![0.0; o * kr];
                gemm(gm, MatRef::new(&cols, kr, np).t(), 0.0, &mut gk);
                Tensor::new(&[o, c, kh, kw], gk).unwrap()
            });
            let mut grads = vec![gin, gk];
            if has_bias {
                grads.push(args.needs(2).then(|| {
                    Tensor::from_vec(
                        args.grad
                            .data()
                            .chunks(np)
                            .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() as f32)
                            .collect(),
                    )
                }));
            }
            grads
        })
    }

    /// Nearest-neighbour upsampling of a `[C×H×W]` map by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 3 || factor == 0 {
            return Err(NumError::InvalidShape {
                op: "upsample_nearest",
                shape: v.shape().to_vec(),
                reason: "expected [C,H,W] and factor > 0".into(),
            });
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let (h2, w2) = (h * factor, w * factor);
        let d = v.data();
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    out[(ch * h2 + i) * w2 + j] = d[(ch * h + i / factor) * w + j / factor];
                }
            }
        }
        let out = Tensor::new(&[c, h2, w2], out)?;
        self.record("upsample_nearest", out, &[x], move |args| {
            let g = args.grad.data();
            let mut gi = vec![0.0; c * h * w];
            for ch in 0..c {
                for i in 0..h2 {
                    for j in 0..w2 {
                        gi[(ch * h + i / factor) * w + j / factor] += g[(ch * h2 + i) * w2 + j];
                    }
                }
            }
            vec![Some(Tensor::new(&[c, h, w], gi).unwrap())]
        })
    }

    /// Non-overlapping `k×k` average pooling of a `[C×H×W]` map.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 3 || k == 0 || !v.shape()[1].is_multiple_of(k) || !v.shape()[2].is_multiple_of(k) {
            return Err(NumError::InvalidShape {
                op: "avg_pool2d",
                shape: v.shape().to_vec(),
                reason: format!("spatial extents must be divisible by {k}"),
            });
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let (h2, w2) = (h / k, w / k);
        let scale = 1.0 / (k * k) as f32;
        let d = v.data();
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[(ch * h2 + i / k) * w2 + j / k] += d[(ch * h + i) * w + j] * scale;
                }
            }
        }
        let out = Tensor::new(&[c, h2, w2], out)?;
        self.record("avg_pool2d", out, &[x], move |args| {
            let g = args.grad.data();
            let mut gi = vec![0.0; c * h * w];
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        gi[(ch * h + i) * w + j] = g[(ch * h2 + i / k) * w2 + j / k] * scale;
                    }
                }
            }
            vec![Some(Tensor::new(&[c, h, w], gi).unwrap())]
        })
    }
}
