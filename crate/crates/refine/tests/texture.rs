use trigen_core::gradcheck::gradient_error;
use trigen_core::{rng, Tape, Tensor, Var};
use trigen_refine::hashgrid::{HashGridConfig, HashGridTexture};
use trigen_refine::raster::{chw_to_image, image_to_chw, rasterize, render_image, render_textured, render_vertex_colors};
use trigen_refine::Mesh;
use trigen_stage1::synthdata::{render_gt, NamedColor, ProceduralObject};
use trigen_stage1::Camera;

const HASH_FD_TOL: f32 = 1e-3;
const RENDER_FD_TOL: f32 = 1e-2;
const FD_H: f32 = 1e-3;

fn small_cfg() -> HashGridConfig {
    HashGridConfig {
        levels: 4,
        features_per_level: 2,
        log2_table_size: 9,
        base_resolution: 2,
        max_resolution: 16,
        hidden: 8,
        init_scale: 0.5,
    }
}

fn texture(seed: u64) -> HashGridTexture {
    HashGridTexture::new(small_cfg(), [-1.0; 3], [1.0; 3], seed).unwrap()
}

#[test]
fn zero_tables_and_biases_give_mid_grey() {
    let tex = HashGridTexture::new(HashGridConfig::default(), [-1.0; 3], [1.0; 3], 3).unwrap().zeroed();
    for rgb in tex.lookup(&[[0.1, -0.3, 0.7], [0.0; 3], [1.0, 1.0, 1.0]]).unwrap() {
        assert_eq!(rgb, [0.5, 0.5, 0.5]);
    }
}

#[test]
fn lookups_are_deterministic_and_bounded() {
    let tex = texture(5);
    let mut r = rng::seeded(9);
    let pts: Vec<[f32; 3]> = (0..200).map(|_| {
        let t = Tensor::uniform(&[3], -1.2, 1.2, &mut r);
        [t.data()[0], t.data()[1], t.data()[2]]
    }).collect();
    let a = tex.lookup(&pts).unwrap();
    let b = tex.lookup(&pts).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().flatten().all(|&c| (0.0..=1.0).contains(&c)));
    let twice = tex.lookup(&[pts[0], pts[0]]).unwrap();
    assert_eq!(twice[0], twice[1]);
}

#[test]
fn constant_texture_returns_its_color() {
    let tex = texture(1).constant([0.2, 0.6, 0.9]);
    for rgb in tex.lookup(&[[0.3, 0.3, 0.3], [-0.9, 0.1, 0.5]]).unwrap() {
        for (c, want) in rgb.iter().zip([0.2, 0.6, 0.9]) {
            assert!((c - want).abs() < 1e-5);
        }
    }
}

#[test]
fn level_resolutions_grow_geometrically() {
    let cfg = HashGridConfig::default();
    assert_eq!(cfg.level_resolution(0), cfg.base_resolution);
    assert!(cfg.level_resolution(cfg.levels - 1).abs_diff(cfg.max_resolution) <= 1);
    for l in 1..cfg.levels {
        assert!(cfg.level_resolution(l) > cfg.level_resolution(l - 1));
    }
}

fn random_points(n: usize, seed: u64) -> Tensor {
    // Keep away from cell faces so finite differences stay in one cell.
    let mut r = rng::seeded(seed);
    Tensor::uniform(&[n, 3], -0.95, 0.95, &mut r)
}

#[test]
fn hash_encoding_gradients_match_finite_differences() {
    let tex = texture(11);
    for seed in 0..20u64 {
        let pts = random_points(6, 100 + seed);
        let inputs = [tex.tables.clone(), pts];
        let f = |tape: &mut Tape, x: &[Var]| tex.encode(tape, x[0], x[1]).unwrap();
        let e_tab = gradient_error(f, &inputs, 0, seed, FD_H);
        assert!(e_tab < HASH_FD_TOL, "instance {seed}: table rel err {e_tab}");
    }
}

#[test]
fn hash_encoding_position_gradients_match_finite_differences() {
    let tex = texture(12);
    let mut checked = 0;
    for seed in 0..40u64 {
        let pts = random_points(1, 300 + seed);
        // Skip queries within FD reach of a lattice plane at any level.
        let near_plane = (0..tex.cfg.levels).any(|l| {
            let res = tex.cfg.level_resolution(l) as f32;
            pts.data().iter().any(|&x| {
                let g = (x + 1.0) / 2.0 * res;
                (g - g.round()).abs() < 4.0 * FD_H * res
            })
        });
        if near_plane {
            continue;
        }
        let inputs = [tex.tables.clone(), pts];
        let f = |tape: &mut Tape, x: &[Var]| tex.encode(tape, x[0], x[1]).unwrap();
        let e = gradient_error(f, &inputs, 1, seed, FD_H);
        assert!(e < HASH_FD_TOL, "instance {seed}: position rel err {e}");
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} usable instances");
}

#[test]
fn rasterizer_matches_shared_projection_silhouette() {
    let cam = Camera::orbit(30.0, 15.0, 64).unwrap();
    let ico = Mesh::icosphere(0.5, 4);
    let frags = rasterize(&ico.vertices, &ico.faces, &cam);
    let gt = render_gt(&ProceduralObject::sphere(0.5, NamedColor::Red), &cam).unwrap();
    let gt_count = gt.data().chunks_exact(3).filter(|p| p.iter().any(|&c| c < 0.999)).count();
    let r_mesh = (frags.len() as f32 / std::f32::consts::PI).sqrt();
    let r_gt = (gt_count as f32 / std::f32::consts::PI).sqrt();
    let r_proj = cam.sphere_pixel_radius(0.5);
    assert!((r_mesh - r_gt).abs() < 1.0, "mesh {r_mesh}px vs reference {r_gt}px");
    assert!((r_mesh - r_proj).abs() < 1.0, "mesh {r_mesh}px vs projected {r_proj}px");
    // Per-pixel agreement away from the rim.
    let mask = frags.coverage_mask();
    let disagree = mask
        .iter()
        .zip(gt.data().chunks_exact(3))
        .filter(|(m, p)| **m != p.iter().any(|&c| c < 0.999))
        .count();
    assert!((disagree as f32) < 2.0 * std::f32::consts::PI * r_gt, "{disagree} pixels disagree");
}

#[test]
fn depth_test_keeps_nearest_surface() {
    let cam = Camera::orbit(0.0, 0.0, 32).unwrap();
    let near = Mesh::icosphere(0.3, 2).translated([0.0, 0.0, 0.6]);
    let far = Mesh::icosphere(0.3, 2).translated([0.0, 0.0, -0.6]);
    let merged = near.clone().merged(&far);
    let mut colors = vec![[1.0, 0.0, 0.0]; near.vertices.len()];
    colors.extend(vec![[0.0, 0.0, 1.0]; far.vertices.len()]);
    let img = render_vertex_colors(&merged.vertices, &merged.faces, &colors, &cam).unwrap();
    let centre = img.pixel(16, 16);
    let cam_z = cam.position()[2];
    let want = if cam_z > 0.0 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
    for (c, w) in centre.iter().zip(want) {
        assert!((c - w).abs() < 1e-5, "{centre:?}");
    }
}

#[test]
fn constant_red_sphere_renders_red_on_white() {
    let cam = Camera::orbit(45.0, 20.0, 32).unwrap();
    let ico = Mesh::icosphere(0.5, 3);
    let tex = texture(2).constant([0.9, 0.1, 0.1]);
    let img = render_image(&ico.vertices, &ico.faces, &cam, &tex).unwrap();
    let frags = rasterize(&ico.vertices, &ico.faces, &cam);
    let mask = frags.coverage_mask();
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        let want = if mask[i] { [0.9, 0.1, 0.1] } else { [1.0, 1.0, 1.0] };
        for (c, w) in px.iter().zip(want) {
            assert!((c - w).abs() < 1e-4);
        }
    }
    assert!(mask.iter().any(|&m| m) && mask.iter().any(|&m| !m));
}

#[test]
fn empty_mesh_renders_background() {
    let cam = Camera::orbit(0.0, 0.0, 8).unwrap();
    let img = render_image(&[], &[], &cam, &texture(0)).unwrap();
    assert!(img.data().iter().all(|&c| c == 1.0));
}

#[test]
fn chw_layout_round_trips() {
    let cam = Camera::orbit(10.0, 10.0, 12).unwrap();
    let ico = Mesh::icosphere(0.5, 2);
    let img = render_image(&ico.vertices, &ico.faces, &cam, &texture(4)).unwrap();
    let back = chw_to_image(&image_to_chw(&img)).unwrap();
    assert_eq!(back, img);
}

#[test]
fn rendered_texture_gradient_matches_finite_differences() {
    let cam = Camera::orbit(20.0, 10.0, 16).unwrap();
    let ico = Mesh::icosphere(0.6, 2);
    let tex = texture(21);
    let pos = Tensor::new(&[ico.vertices.len(), 3], ico.vertices.iter().flatten().copied().collect()).unwrap();
    let inputs = [tex.tables.clone()];
    let f = |tape: &mut Tape, x: &[Var]| {
        let head = tex.head_store.bind(tape, false);
        let bound = trigen_refine::BoundTexture { tables: x[0], head };
        let p = tape.constant(pos.clone());
        render_textured(tape, p, &ico.faces, &cam, &tex, &bound).unwrap()
    };
    let e = gradient_error(f, &inputs, 0, 3, FD_H);
    assert!(e < RENDER_FD_TOL, "render texture rel err {e}");
}
