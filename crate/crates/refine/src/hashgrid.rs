//! Multiresolution hash-grid texture: per level, trilinear interpolation of
//! hashed corner features; the concatenated features go through a small MLP
//! with a sigmoid head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use trigen_core::nn::{Activation, Bound, Mlp, ParamStore};
use trigen_core::vec3::Vec3;
use trigen_core::{rng, Tape, Tensor, Var};

use crate::error::{RefineError, Result};

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub log2_table_size: u32,
    pub base_resolution: usize,
    pub max_resolution: usize,
    pub hidden: usize,
    pub init_scale: f32,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            features_per_level: 2,
            log2_table_size: 14,
            base_resolution: 4,
            max_resolution: 128,
            hidden: 32,
            init_scale: 1e-4,
        }
    }
}

impl HashGridConfig {
    pub fn table_size(&self) -> usize {
        1 << self.log2_table_size
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        if self.levels <= 1 {
            return self.base_resolution;
        }
        let growth = ((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln()) / (self.levels - 1) as f64;
        (self.base_resolution as f64 * (growth * level as f64).exp()).floor() as usize
    }

    pub fn encoded_width(&self) -> usize {
        self.levels * self.features_per_level
    }
}

/// Table slot of lattice corner `c` at a level of resolution `res`: dense
/// indexing while the level fits in the table, spatial hashing beyond.
fn slot(c: [usize; 3], res: usize, table: usize) -> usize {
    let side = res + 1;
    if side * side * side <= table {
        c[0] + side * (c[1] + side * c[2])
    } else {
        let h = (c[0] as u32).wrapping_mul(PRIMES[0]) ^ (c[1] as u32).wrapping_mul(PRIMES[1]) ^ (c[2] as u32).wrapping_mul(PRIMES[2]);
        h as usize % table
    }
}

/// Per-query, per-level interpolation footprint.
#[derive(Clone, Copy)]
struct Corner8 {
    rows: [usize; 8],
    frac: [f32; 3],
    /// d(lattice coordinate)/d(world coordinate), zero where clamped.
    scale: [f32; 3],
}

#[derive(Clone, Debug)]
pub struct HashGridTexture {
    pub cfg: HashGridConfig,
    pub min: Vec3,
    pub max: Vec3,
    /// `[levels·T × F]` feature tables.
    pub tables: Tensor,
    pub head_store: ParamStore,
    pub head: Mlp,
}

/// A texture recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundTexture {
    pub tables: Var,
    pub head: Bound,
}

impl HashGridTexture {
    pub fn new(cfg: HashGridConfig, min: Vec3, max: Vec3, seed: u64) -> Result<Self> {
        if cfg.levels == 0 || cfg.features_per_level == 0 || cfg.base_resolution == 0 || cfg.max_resolution < cfg.base_resolution {
            return Err(RefineError::Config(format!("hash grid config {cfg:?}")));
        }
        if (0..3).any(|a| max[a] <= min[a]) {
            return Err(RefineError::Config(format!("texture bounds {min:?}..{max:?}")));
        }
        let mut r = rng::derive(seed, 0x7e47);
        let rows = cfg.levels * cfg.table_size();
        let tables = Tensor::from_fn(&[rows, cfg.features_per_level], |_| r.random_range(-cfg.init_scale..=cfg.init_scale));
        let mut head_store = ParamStore::new();
        let head = Mlp::new(
            &mut head_store,
            "head",
            &[cfg.encoded_width(), cfg.hidden, cfg.hidden, 3],
            Activation::Silu,
            &mut r,
        );
        Ok(Self {
            cfg,
            min,
            max,
            tables,
            head_store,
            head,
        })
    }

    /// Zeroes every table entry and head bias.
    pub fn zeroed(mut self) -> Self {
        self.tables.data_mut().fill(0.0);
        self.head.zero_biases(&mut self.head_store);
        self
    }

    /// Zeroed texture whose every lookup returns `rgb` (components in (0, 1)).
    pub fn constant(mut self, rgb: [f32; 3]) -> Self {
        self = self.zeroed();
        if let Some(last) = self.head.layers.last() {
            let b = self.head_store.get_mut(last.bias).data_mut();
            for (dst, c) in b.iter_mut().zip(rgb) {
                let c = c.clamp(1e-6, 1.0 - 1e-6);
                *dst = (c / (1.0 - c)).ln();
            }
        }
        self
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundTexture {
        BoundTexture {
            tables: if trainable {
                tape.leaf(self.tables.clone())
            } else {
                tape.constant(self.tables.clone())
            },
            head: self.head_store.bind(tape, trainable),
        }
    }

    fn footprints(&self, xyz: &[f32]) -> Vec<Corner8> {
        let cfg = &self.cfg;
        let t = cfg.table_size();
        let n = xyz.len() / 3;
        let mut out = Vec::with_capacity(n * cfg.levels);
        for q in 0..n {
            for level in 0..cfg.levels {
                let res = cfg.level_resolution(level);
                let mut base = [0usize; 3];
                let mut frac = [0.0f32; 3];
                let mut scale = [0.0f32; 3];
                for a in 0..3 {
                    let extent = self.max[a] - self.min[a];
                    let u = (xyz[3 * q + a] - self.min[a]) / extent;
                    let (u, inside) = if u < 0.0 {
                        (0.0, false)
                    } else if u > 1.0 {
                        (1.0, false)
                    } else {
                        (u, true)
                    };
                    let g = u * res as f32;
                    let i0 = (g.floor() as usize).min(res - 1);
                    base[a] = i0;
                    frac[a] = g - i0 as f32;
                    scale[a] = if inside { res as f32 / extent } else { 0.0 };
                }
                let mut rows = [0usize; 8];
                for (c, row) in rows.iter_mut().enumerate() {
                    let corner = [base[0] + (c & 1), base[1] + ((c >> 1) & 1), base[2] + ((c >> 2) & 1)];
                    *row = level * t + slot(corner, res, t);
                }
                out.push(Corner8 { rows, frac, scale });
            }
        }
        out
    }

    /// Records the `[N × levels·F]` encoding of `xyz` `[N×3]`,
    /// differentiable in the tables and in `xyz`.
    pub fn encode(&self, tape: &mut Tape, tables: Var, xyz: Var) -> Result<Var> {
        let q = tape.value(xyz);
        if q.rank() != 2 || q.shape()[1] != 3 {
            return Err(RefineError::Config(format!("query shape {:?}", q.shape())));
        }
        let n = q.shape()[0];
        let (levels, f) = (self.cfg.levels, self.cfg.features_per_level);
        let width = levels * f;
        let fps = self.footprints(q.data());
        let tv = tape.value(tables);
        let td = tv.data();
        let rows_total = tv.shape()[0];
        let mut out = vec![0.0f32; n * width];
        for (i, fp) in fps.iter().enumerate() {
            let (query, level) = (i / levels, i % levels);
            let w = weights(fp.frac);
            for (c, &row) in fp.rows.iter().enumerate() {
                for k in 0..f {
                    out[query * width + level * f + k] += w[c] * td[row * f + k];
                }
            }
        }
        let out = Tensor::new(&[n, width], out)?;
        Ok(tape.record("hash_encode", out, &[tables, xyz], move |args| {
            let g = args.grad.data();
            let gt = args.needs(0).then(|| {
                let mut gt = vec![0.0f32; rows_total * f];
                for (i, fp) in fps.iter().enumerate() {
                    let (query, level) = (i / levels, i % levels);
                    let w = weights(fp.frac);
                    for (c, &row) in fp.rows.iter().enumerate() {
                        for k in 0..f {
                            gt[row * f + k] += w[c] * g[query * width + level * f + k];
                        }
                    }
                }
                Tensor::new(&[rows_total, f], gt).unwrap()
            });
            let gx = args.needs(1).then(|| {
                let td = args.inputs[0].data();
                let mut gx = vec![0.0f32; n * 3];
                for (i, fp) in fps.iter().enumerate() {
                    let (query, level) = (i / levels, i % levels);
                    let dw = weight_grads(fp.frac);
                    for a in 0..3 {
                        if fp.scale[a] == 0.0 {
                            continue;
                        }
                        let mut acc = 0.0f32;
                        for (c, &row) in fp.rows.iter().enumerate() {
                            for k in 0..f {
                                acc += dw[a][c] * td[row * f + k] * g[query * width + level * f + k];
                            }
                        }
                        gx[3 * query + a] += acc * fp.scale[a];
                    }
                }
                Tensor::new(&[n, 3], gx).unwrap()
            });
            vec![gt, gx]
        })?)
    }

    /// RGB in (0, 1) at `xyz` `[N×3]`.
    pub fn lookup_var(&self, tape: &mut Tape, bound: &BoundTexture, xyz: Var) -> Result<Var> {
        let feats = self.encode(tape, bound.tables, xyz)?;
        let logits = self.head.forward(tape, &bound.head, feats)?;
        Ok(tape.sigmoid(logits)?)
    }

    /// Value-only lookup at plain points.
    pub fn lookup(&self, points: &[Vec3]) -> Result<Vec<[f32; 3]>> {
        if points.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xyz = tape.constant(Tensor::new(&[points.len(), 3], points.iter().flatten().copied().collect())?);
        let rgb = self.lookup_var(&mut tape, &bound, xyz)?;
        Ok(tape.value(rgb).data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn num_params(&self) -> usize {
        self.tables.numel() + self.head_store.num_scalars()
    }
}

/// Trilinear weights for corner bit pattern `c = x | y<<1 | z<<2`.
fn weights(f: [f32; 3]) -> [f32; 8] {
    let mut w = [0.0f32; 8];
    for (c, wc) in w.iter_mut().enumerate() {
        let mut v = 1.0;
        for (a, &fa) in f.iter().enumerate() {
            v *= if (c >> a) & 1 == 1 { fa } else { 1.0 - fa };
        }
        *wc = v;
    }
    w
}

/// `∂w_c/∂f_a` for every axis `a` and corner `c`.
fn weight_grads(f: [f32; 3]) -> [[f32; 8]; 3] {
    let mut out = [[0.0f32; 8]; 3];
    for (a, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let mut prod = if (c >> a) & 1 == 1 { 1.0 } else { -1.0 };
            for (b, &fb) in f.iter().enumerate() {
                if b != a {
                    prod *= if (c >> b) & 1 == 1 { fb } else { 1.0 - fb };
                }
            }
            *v = prod;
        }
    }
    out
}
