//! Procedural objects, analytic ground-truth renders and the dataset
//! manifest.
//!
//! Manifest rows are JSON objects, one per line:
//!
//! | field        | meaning                                             |
//! |--------------|-----------------------------------------------------|
//! | `id`         | unique object id, `obj00000`, `obj00001`, …         |
//! | `split`      | `train` or `val` (every tenth object is `val`)      |
//! | `caption`    | template caption naming kind(s) and color(s)        |
//! | `resolution` | square image size in pixels                         |
//! | `seed`       | seed the object was sampled from                    |
//! | `object`     | full object parameters                              |
//! | `views`      | list of `{image, camera}`; `image` is relative      |
//!
//! Images are 8-bit RGB PNGs rendered over white.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use trigen_core::rng;
use trigen_core::vec3::{self, Vec3};

use crate::camera::{intersect_unit_cube, Camera, Ray};
use crate::error::{Error, Result};
use crate::fitting::MultiViewSample;
use crate::image::Image;

/// Rays per pixel edge used for ground-truth anti-aliasing.
pub const GT_SUPERSAMPLE: usize = 2;
const LIGHT_DIR: Vec3 = [0.0, 1.0, 0.0];
const AMBIENT: f32 = 0.75;
const DIFFUSE: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedColor {
    Red,
    Green,
    Blue,
    Yellow,
    Orange,
    Purple,
    Cyan,
    Gray,
}

impl NamedColor {
    pub const ALL: [NamedColor; 8] = [
        NamedColor::Red,
        NamedColor::Green,
        NamedColor::Blue,
        NamedColor::Yellow,
        NamedColor::Orange,
        NamedColor::Purple,
        NamedColor::Cyan,
        NamedColor::Gray,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NamedColor::Red => "red",
            NamedColor::Green => "green",
            NamedColor::Blue => "blue",
            NamedColor::Yellow => "yellow",
            NamedColor::Orange => "orange",
            NamedColor::Purple => "purple",
            NamedColor::Cyan => "cyan",
            NamedColor::Gray => "gray",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            NamedColor::Red => [0.85, 0.12, 0.10],
            NamedColor::Green => [0.15, 0.70, 0.20],
            NamedColor::Blue => [0.12, 0.25, 0.85],
            NamedColor::Yellow => [0.95, 0.85, 0.15],
            NamedColor::Orange => [0.95, 0.50, 0.10],
            NamedColor::Purple => [0.55, 0.20, 0.75],
            NamedColor::Cyan => [0.10, 0.75, 0.80],
            NamedColor::Gray => [0.50, 0.50, 0.50],
        }
    }

    /// Palette entry closest to `rgb` in Euclidean distance.
    pub fn nearest(rgb: [f32; 3], candidates: &[NamedColor]) -> NamedColor {
        *candidates
            .iter()
            .min_by(|a, b| {
                let da = vec3::distance(a.rgb(), rgb);
                let db = vec3::distance(b.rgb(), rgb);
                da.total_cmp(&db)
            })
            .expect("non-empty candidate list")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Primitive {
    Sphere { radius: f32 },
    Box { half: [f32; 3] },
    /// Ring in the xz-plane around the y axis.
    Torus { major: f32, minor: f32 },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Sphere { .. } => "sphere",
            Primitive::Box { .. } => "box",
            Primitive::Torus { .. } => "torus",
        }
    }

    pub fn sdf(&self, p: Vec3) -> f32 {
        match *self {
            Primitive::Sphere { radius } => vec3::norm(p) - radius,
            Primitive::Box { half } => {
                let q = [p[0].abs() - half[0], p[1].abs() - half[1], p[2].abs() - half[2]];
                let outside = vec3::norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Primitive::Torus { major, minor } => {
                let ring = (p[0] * p[0] + p[2] * p[2]).sqrt() - major;
                (ring * ring + p[1] * p[1]).sqrt() - minor
            }
        }
    }

    /// Half-extent along each axis.
    pub fn extent(&self) -> Vec3 {
        match *self {
            Primitive::Sphere { radius } => [radius; 3],
            Primitive::Box { half } => half,
            Primitive::Torus { major, minor } => [major + minor, minor, major + minor],
        }
    }

    pub fn volume(&self) -> f32 {
        use std::f32::consts::PI;
        match *self {
            Primitive::Sphere { radius } => 4.0 / 3.0 * PI * radius.powi(3),
            Primitive::Box { half } => 8.0 * half[0] * half[1] * half[2],
            Primitive::Torus { major, minor } => 2.0 * PI * PI * major * minor * minor,
        }
    }

    fn scaled(&self, s: f32) -> Self {
        match *self {
            Primitive::Sphere { radius } => Primitive::Sphere { radius: radius * s },
            Primitive::Box { half } => Primitive::Box { half: half.map(|h| h * s) },
            Primitive::Torus { major, minor } => Primitive::Torus {
                major: major * s,
                minor: minor * s,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub primitive: Primitive,
    pub center: Vec3,
    pub color: NamedColor,
}

impl Part {
    pub fn sdf(&self, p: Vec3) -> f32 {
        self.primitive.sdf(vec3::sub(p, self.center))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Empty,
    Sphere,
    Box,
    Torus,
    Union,
}

/// An analytic object inside the unit cube: zero, one or two parts. With
/// two parts the first is the larger one and sets the dominant color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralObject {
    pub seed: u64,
    pub parts: Vec<Part>,
}

fn random_primitive(kind: usize, rng: &mut impl Rng) -> Primitive {
    match kind {
        0 => Primitive::Sphere {
            radius: rng.random_range(0.35..0.7),
        },
        1 => Primitive::Box {
            half: [
                rng.random_range(0.25..0.55),
                rng.random_range(0.25..0.55),
                rng.random_range(0.25..0.55),
            ],
        },
        _ => Primitive::Torus {
            major: rng.random_range(0.4..0.6),
            minor: rng.random_range(0.14..0.22),
        },
    }
}

/// Deterministic object from a seed; kinds are drawn uniformly among
/// sphere, box, torus and union-of-two.
pub fn sample_object(seed: u64) -> ProceduralObject {
    let mut rng = rng::seeded(seed);
    let kind = rng.random_range(0..4usize);
    let color = NamedColor::ALL[rng.random_range(0..NamedColor::ALL.len())];
    if kind < 3 {
        return ProceduralObject::single(random_primitive(kind, &mut rng), color, seed);
    }
    let axis = rng.random_range(0..3usize);
    let offset = rng.random_range(0.25..0.35f32);
    let mut parts = Vec::with_capacity(2);
    for (i, sign) in [1.0f32, -1.0].into_iter().enumerate() {
        let prim = random_primitive(rng.random_range(0..3usize), &mut rng).scaled(0.6);
        let mut center = [0.0; 3];
        center[axis] = sign * offset;
        let c = if i == 0 {
            color
        } else {
            NamedColor::ALL[rng.random_range(0..NamedColor::ALL.len())]
        };
        parts.push(Part {
            primitive: prim,
            center,
            color: c,
        });
    }
    if parts[1].primitive.volume() > parts[0].primitive.volume() {
        parts.swap(0, 1);
    }
    ProceduralObject { seed, parts }
}

impl ProceduralObject {
    pub fn empty(seed: u64) -> Self {
        Self { seed, parts: Vec::new() }
    }

    pub fn single(primitive: Primitive, color: NamedColor, seed: u64) -> Self {
        Self {
            seed,
            parts: vec![Part {
                primitive,
                center: [0.0; 3],
                color,
            }],
        }
    }

    pub fn sphere(radius: f32, color: NamedColor) -> Self {
        Self::single(Primitive::Sphere { radius }, color, 0)
    }

    pub fn kind(&self) -> ObjectKind {
        match self.parts.as_slice() {
            [] => ObjectKind::Empty,
            [p] => match p.primitive {
                Primitive::Sphere { .. } => ObjectKind::Sphere,
                Primitive::Box { .. } => ObjectKind::Box,
                Primitive::Torus { .. } => ObjectKind::Torus,
            },
            _ => ObjectKind::Union,
        }
    }

    pub fn dominant_color(&self) -> Option<NamedColor> {
        self.parts.first().map(|p| p.color)
    }

    /// Signed distance; `+∞` for the empty object.
    pub fn sdf(&self, p: Vec3) -> f32 {
        self.parts.iter().map(|part| part.sdf(p)).fold(f32::INFINITY, f32::min)
    }

    fn closest_part(&self, p: Vec3) -> Option<&Part> {
        self.parts.iter().min_by(|a, b| a.sdf(p).total_cmp(&b.sdf(p)))
    }

    /// True if every part stays within `[-margin, margin]³`.
    pub fn fits_in_cube(&self, margin: f32) -> bool {
        self.parts.iter().all(|part| {
            let e = part.primitive.extent();
            (0..3).all(|a| part.center[a].abs() + e[a] <= margin)
        })
    }

    pub fn caption(&self) -> String {
        match self.parts.as_slice() {
            [] => String::new(),
            [p] => format!("a {} {}", p.color.name(), p.primitive.name()),
            [a, b, ..] => format!(
                "a {} {} joined with a {} {}",
                a.color.name(),
                a.primitive.name(),
                b.color.name(),
                b.primitive.name()
            ),
        }
    }

    fn normal(&self, p: Vec3) -> Vec3 {
        let h = 1e-3;
        let mut n = [0.0; 3];
        for a in 0..3 {
            let (mut lo, mut hi) = (p, p);
            lo[a] -= h;
            hi[a] += h;
            n[a] = self.sdf(hi) - self.sdf(lo);
        }
        vec3::normalize(n)
    }

    /// Sphere-traces one ray; returns the shaded color or `None` on a miss.
    pub fn trace(&self, ray: &Ray) -> Option<[f32; 3]> {
        if self.parts.is_empty() {
            return None;
        }
        let (t0, t1) = intersect_unit_cube(ray)?;
        let mut t = t0;
        for _ in 0..256 {
            let p = ray.at(t);
            let d = self.sdf(p);
            if d < 1e-4 {
                let part = self.closest_part(p)?;
                let shade = AMBIENT + DIFFUSE * vec3::dot(self.normal(p), LIGHT_DIR);
                return Some(part.color.rgb().map(|c| c * shade));
            }
            t += d;
            if t > t1 {
                return None;
            }
        }
        None
    }
}

/// Anti-aliased analytic render over white. Shading is albedo times an
/// ambient term plus a diffuse term from a light fixed above the object,
/// so radiance depends on the surface point only, never on the view.
pub fn render_gt(obj: &ProceduralObject, cam: &Camera) -> Result<Image> {
    cam.validate()?;
    cam.ensure_outside_unit_cube()?;
    let n = GT_SUPERSAMPLE;
    let inv = 1.0 / (n * n) as f32;
    let mut img = Image::filled(cam.width, cam.height, [1.0; 3]);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let mut acc = [0.0f32; 3];
            for sy in 0..n {
                for sx in 0..n {
                    let px = x as f32 + (sx as f32 + 0.5) / n as f32;
                    let py = y as f32 + (sy as f32 + 0.5) / n as f32;
                    let c = obj.trace(&cam.ray_at(px, py)).unwrap_or([1.0; 3]);
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            img.set_pixel(x, y, acc.map(|c| c * inv));
        }
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub image: String,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub split: Split,
    pub caption: String,
    pub resolution: usize,
    pub seed: u64,
    pub object: ProceduralObject,
    pub views: Vec<ViewRecord>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_objects: usize,
    pub n_views: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_objects: 8,
            n_views: 10,
            resolution: 64,
            seed: 0,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Seed of the `index`-th object of a dataset.
pub fn object_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

/// Orbit cameras with uniform azimuth and elevation in `[-30°, 60°]`.
pub fn sample_cameras(n_views: usize, resolution: usize, rng: &mut impl Rng) -> Result<Vec<Camera>> {
    (0..n_views)
        .map(|_| {
            let az = rng.random_range(0.0..360.0f32);
            let el = rng.random_range(-30.0..60.0f32);
            Camera::orbit(az, el, resolution)
        })
        .collect()
}

/// Renders an object from the given cameras into a fitting sample.
pub fn render_sample(id: &str, obj: &ProceduralObject, cameras: &[Camera]) -> Result<MultiViewSample> {
    let views = cameras
        .iter()
        .map(|c| Ok((*c, render_gt(obj, c)?.quantized())))
        .collect::<Result<Vec<_>>>()?;
    MultiViewSample::new(id, views, Some(obj.caption()))
}

/// Generates objects, renders every view to PNG and writes the manifest.
pub fn build_manifest(cfg: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if cfg.n_views < 2 {
        return Err(Error::Config(format!("need at least 2 views, got {}", cfg.n_views)));
    }
    if cfg.resolution < 32 {
        return Err(Error::Config(format!("resolution must be at least 32, got {}", cfg.resolution)));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join("images"))?;
    let mut rows = Vec::with_capacity(cfg.n_objects);
    for i in 0..cfg.n_objects {
        let seed = object_seed(cfg.seed, i);
        let obj = sample_object(seed);
        let id = format!("obj{i:05}");
        let mut cam_rng = rng::derive(seed, 1);
        let cameras = sample_cameras(cfg.n_views, cfg.resolution, &mut cam_rng)?;
        let mut views = Vec::with_capacity(cfg.n_views);
        for (v, cam) in cameras.into_iter().enumerate() {
            let rel = format!("images/{id}_{v:02}.png");
            render_gt(&obj, &cam)?.save_png(out_dir.join(&rel))?;
            views.push(ViewRecord { image: rel, camera: cam });
        }
        rows.push(ManifestRow {
            id,
            split: if i % 10 == 9 { Split::Val } else { Split::Train },
            caption: obj.caption(),
            resolution: cfg.resolution,
            seed,
            object: obj,
            views,
        });
    }
    let manifest = DatasetManifest { rows };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for row in &self.rows {
            serde_json::to_writer(&mut f, row)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let f = BufReader::new(fs::File::open(path)?);
        let mut rows = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(&line)?);
        }
        Ok(Self { rows })
    }

    /// Loads every row's images into fitting samples.
    pub fn load_samples(&self, root: impl AsRef<Path>) -> Result<Vec<MultiViewSample>> {
        let root: PathBuf = root.as_ref().to_path_buf();
        self.rows
            .iter()
            .map(|row| {
                let views = row
                    .views
                    .iter()
                    .map(|v| Ok((v.camera, Image::load_png(root.join(&v.image))?)))
                    .collect::<Result<Vec<_>>>()?;
                MultiViewSample::new(&row.id, views, Some(row.caption.clone()))
            })
            .collect()
    }
}
