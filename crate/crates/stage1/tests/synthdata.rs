use std::collections::HashSet;

use sha2::{Digest, Sha256};
use trigen_stage1::camera::Camera;
use trigen_stage1::image::{psnr, Image};
use trigen_stage1::synthdata::*;

#[test]
fn sampling_is_deterministic() {
    assert_eq!(sample_object(42), sample_object(42));
    assert_ne!(sample_object(42), sample_object(43));
}

#[test]
fn hundred_seeds_cover_at_least_three_kinds() {
    let kinds: HashSet<_> = (0..100).map(|s| sample_object(s).kind()).collect();
    assert!(kinds.len() >= 3, "{kinds:?}");
}

#[test]
fn sampled_objects_fit_in_the_unit_cube() {
    for s in 0..200 {
        let obj = sample_object(s);
        assert!(obj.fits_in_cube(0.95), "seed {s}: {obj:?}");
    }
}

#[test]
fn sphere_sdf_at_origin() {
    let obj = ProceduralObject::sphere(0.3, NamedColor::Red);
    assert!((obj.sdf([0.0; 3]) + 0.3).abs() < 1e-7);
}

#[test]
fn primitive_sdfs_vanish_on_their_surfaces() {
    let b = Primitive::Box { half: [0.3, 0.4, 0.5] };
    assert!(b.sdf([0.3, 0.0, 0.0]).abs() < 1e-6);
    assert!((b.sdf([0.0, 0.0, 0.0]) + 0.3).abs() < 1e-6);
    let t = Primitive::Torus { major: 0.5, minor: 0.1 };
    assert!(t.sdf([0.6, 0.0, 0.0]).abs() < 1e-6);
    assert!((t.sdf([0.5, 0.0, 0.0]) + 0.1).abs() < 1e-6);
}

#[test]
fn empty_object_renders_white() {
    let img = render_gt(&ProceduralObject::empty(0), &Camera::orbit(0.0, 0.0, 32).unwrap()).unwrap();
    assert!(img.data().iter().all(|&v| v == 1.0));
}

#[test]
fn centered_sphere_disk_radius_matches_projection() {
    let cam = Camera::orbit(0.0, 0.0, 64).unwrap();
    let r = 0.5;
    let img = render_gt(&ProceduralObject::sphere(r, NamedColor::Blue), &cam).unwrap();
    // Count pixels at least half covered: the red channel is 1 on the
    // background and at most 0.12 on the blue sphere.
    let mut coverage = 0.0;
    for y in 0..64 {
        for x in 0..64 {
            if img.pixel(x, y)[0] < 0.56 {
                coverage += 1.0;
            }
        }
    }
    let measured = (coverage / std::f32::consts::PI).sqrt();
    let predicted = cam.sphere_pixel_radius(r);
    assert!((measured - predicted).abs() < 1.0, "measured {measured}, predicted {predicted}");
}

#[test]
fn opposite_azimuths_of_a_symmetric_object_mirror() {
    let obj = ProceduralObject::single(Primitive::Torus { major: 0.5, minor: 0.18 }, NamedColor::Orange, 0);
    let a = render_gt(&obj, &Camera::orbit(30.0, 25.0, 48).unwrap()).unwrap();
    let b = render_gt(&obj, &Camera::orbit(210.0, 25.0, 48).unwrap()).unwrap();
    let p = psnr(&a, &b.flip_horizontal()).unwrap();
    assert!(p > 40.0, "psnr {p}");
}

#[test]
fn caption_names_kind_and_dominant_color() {
    for s in 0..100 {
        let obj = sample_object(s);
        let cap = obj.caption();
        let first = &obj.parts[0];
        assert!(cap.starts_with(&format!("a {} {}", first.color.name(), first.primitive.name())), "{cap}");
        for part in &obj.parts {
            assert!(cap.contains(part.primitive.name()));
            assert!(cap.contains(part.color.name()));
        }
        if obj.parts.len() == 2 {
            assert!(obj.parts[0].primitive.volume() >= obj.parts[1].primitive.volume());
        }
    }
}

fn sha(path: &std::path::Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn one_object_ten_views() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        n_objects: 1,
        n_views: 10,
        resolution: 32,
        seed: 3,
    };
    let m = build_manifest(&cfg, dir.path()).unwrap();
    assert_eq!(m.rows.len(), 1);
    assert_eq!(std::fs::read_dir(dir.path().join("images")).unwrap().count(), 10);
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert_eq!(DatasetManifest::read(dir.path().join(MANIFEST_FILE)).unwrap(), m);
}

#[test]
fn zero_objects_is_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        n_objects: 0,
        ..DatasetConfig::default()
    };
    let m = build_manifest(&cfg, dir.path()).unwrap();
    assert!(m.rows.is_empty());
    assert_eq!(std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap(), "");
}

#[test]
fn rerun_is_byte_identical_and_images_rerender_exactly() {
    let cfg = DatasetConfig {
        n_objects: 3,
        n_views: 2,
        resolution: 32,
        seed: 11,
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = build_manifest(&cfg, a.path()).unwrap();
    build_manifest(&cfg, b.path()).unwrap();
    assert_eq!(sha(&a.path().join(MANIFEST_FILE)), sha(&b.path().join(MANIFEST_FILE)));
    let ids: HashSet<_> = m.rows.iter().map(|r| r.id.clone()).collect();
    assert_eq!(ids.len(), 3);
    // Cameras read back from JSON reproduce every stored image.
    let back = DatasetManifest::read(a.path().join(MANIFEST_FILE)).unwrap();
    for row in &back.rows {
        for v in &row.views {
            let stored = Image::load_png(a.path().join(&v.image)).unwrap();
            let again = render_gt(&row.object, &v.camera).unwrap().quantized();
            assert_eq!(stored, again);
        }
    }
}

#[test]
fn manifest_validates_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = DatasetConfig {
        n_objects: 1,
        n_views: 1,
        resolution: 32,
        seed: 0,
    };
    assert!(build_manifest(&cfg, dir.path()).is_err());
    cfg.n_views = 2;
    cfg.resolution = 16;
    assert!(build_manifest(&cfg, dir.path()).is_err());
    let file = dir.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    cfg.resolution = 32;
    assert!(build_manifest(&cfg, &file).is_err());
}
