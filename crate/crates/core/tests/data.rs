use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use tridiff::data::{
    build_dataset, generate_record, load_dataset, parse_caption, random_scene, raytrace, raytrace_rays,
    surface_samples, DatasetConfig, Primitive, PrimitiveKind, SceneSpec, BACKGROUND, PALETTE,
};
use tridiff::geometry::{generate_rays, normalize_poses_with_transform, CameraIntrinsics, CameraPose, Vec3};

fn separated(a: &Primitive, b: &Primitive) -> bool {
    use PrimitiveKind::*;
    let sphere_box = |s: &Primitive, c: &Primitive| {
        let d2: f64 = (0..3)
            .map(|k| {
                let q = s.center[k].clamp(c.center[k] - c.size[k], c.center[k] + c.size[k]);
                (s.center[k] - q).powi(2)
            })
            .sum();
        d2 > s.radius().powi(2)
    };
    match (a.kind, b.kind) {
        (Sphere, Sphere) => (a.center - b.center).norm() > a.radius() + b.radius(),
        (Box, Box) => (0..3).any(|k| (a.center[k] - b.center[k]).abs() > a.size[k] + b.size[k]),
        (Sphere, Box) => sphere_box(a, b),
        (Box, Sphere) => sphere_box(b, a),
    }
}

#[test]
fn sphere_silhouette_matches_the_projected_radius() {
    for (radius, res) in [(0.5, 64), (0.3, 96), (0.8, 128)] {
        let scene = SceneSpec::from_primitives(0, vec![Primitive::sphere(Vec3::zeros(), radius, 2)]);
        let intr = CameraIntrinsics::square(50.0, res);
        let img = raytrace(&scene, &intr, &CameraPose::canonical()).unwrap();
        let hits = img.pixels.iter().filter(|p| **p != BACKGROUND).count();
        assert!(img.pixels.iter().all(|p| *p == BACKGROUND || *p == PALETTE[2].1));

        let distance = CameraPose::canonical().position.norm();
        let expected = (radius / distance).asin().tan() / 25f64.to_radians().tan() * res as f64 / 2.0;
        let measured = (hits as f64 / std::f64::consts::PI).sqrt();
        assert!((measured - expected).abs() < 1.0, "radius {radius}: {measured} px vs {expected} px");
        // The widest row spans the diameter.
        let widest = (0..res)
            .map(|row| (0..res).filter(|&col| img.get(col, row) != BACKGROUND).count())
            .max()
            .unwrap();
        assert!((widest as f64 / 2.0 - expected).abs() < 1.0);
    }
}

#[test]
fn random_scenes_cover_the_vocabulary_and_stay_valid() {
    let mut colors = BTreeSet::new();
    let mut kinds = BTreeSet::new();
    let mut counts = BTreeSet::new();
    let mut failures = 0;
    for seed in 0..1000 {
        let Ok(scene) = random_scene(seed) else {
            failures += 1;
            continue;
        };
        counts.insert(scene.primitives.len());
        for (i, p) in scene.primitives.iter().enumerate() {
            assert!(p.within_unit_box(), "seed {seed}");
            colors.insert(p.color);
            kinds.insert(p.kind.name());
            for q in &scene.primitives[i + 1..] {
                assert!(separated(p, q), "seed {seed}: overlapping primitives");
            }
        }
        let parsed = parse_caption(&scene.caption).unwrap();
        let expected: Vec<_> = scene.primitives.iter().map(|p| (p.kind, p.color)).collect();
        assert_eq!(parsed, expected, "seed {seed}");
    }
    assert!(failures < 10, "{failures} placement failures");
    assert_eq!(colors.len(), PALETTE.len());
    assert_eq!(kinds.len(), 2);
    assert_eq!(counts, BTreeSet::from([1, 2, 3, 4]));
}

#[test]
fn box_surface_samples_are_area_weighted() {
    let half = Vec3::new(0.3, 0.2, 0.1);
    let center = Vec3::new(0.1, -0.2, 0.05);
    let scene = SceneSpec::from_primitives(0, vec![Primitive::cuboid(center, half, 0)]);
    let n = 20_000;
    let samples = surface_samples(&scene, n, 9);
    assert_eq!(samples.len(), n);

    // Faces ordered -X, +X, -Y, +Y, -Z, +Z.
    let mut counts = [0usize; 6];
    for p in &samples {
        let d = p - center;
        let face = (0..3)
            .find(|&a| (d[a].abs() - half[a]).abs() < 1e-9)
            .expect("sample lies on a face");
        for a in 0..3 {
            assert!(d[a].abs() <= half[a] + 1e-9);
        }
        counts[2 * face + usize::from(d[face] > 0.0)] += 1;
    }
    let areas = [
        4.0 * half.y * half.z,
        4.0 * half.y * half.z,
        4.0 * half.x * half.z,
        4.0 * half.x * half.z,
        4.0 * half.x * half.y,
        4.0 * half.x * half.y,
    ];
    let total: f64 = areas.iter().sum();
    for (count, area) in counts.iter().zip(areas) {
        let p = area / total;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*count as f64 - mean).abs() < 3.0 * sd, "{count} vs {mean} +- {sd}");
    }
}

#[test]
fn sphere_surface_samples_lie_on_the_visible_union() {
    let a = Primitive::sphere(Vec3::new(-0.2, 0.0, 0.0), 0.3, 0);
    let b = Primitive::sphere(Vec3::new(0.2, 0.0, 0.0), 0.3, 1);
    let scene = SceneSpec::from_primitives(0, vec![a.clone(), b.clone()]);
    for p in surface_samples(&scene, 2000, 4) {
        let on_a = ((p - a.center).norm() - 0.3).abs() < 1e-9;
        let on_b = ((p - b.center).norm() - 0.3).abs() < 1e-9;
        // A sample on one sphere is never buried inside the other.
        assert!((on_a && !b.contains(&p)) || (on_b && !a.contains(&p)));
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn regeneration_is_byte_identical_and_loads_back() {
    let cfg = DatasetConfig {
        num_scenes: 3,
        views_per_scene: 4,
        resolution: 16,
        seed: 21,
        ..DatasetConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    build_dataset(&cfg, &a).unwrap();
    build_dataset(&cfg, &b).unwrap();
    let snapshot = files(&a);
    assert_eq!(snapshot.len(), 1 + 3 * 4);
    assert_eq!(snapshot, files(&b));

    let dataset = load_dataset(&a).unwrap();
    assert_eq!(dataset.len(), 3);
    for i in 0..3 {
        let loaded = dataset.record(i).unwrap();
        let fresh = generate_record(&cfg, i).unwrap();
        assert_eq!(loaded.scene.caption, fresh.scene.caption);
        for (l, f) in loaded.views.iter().zip(&fresh.views) {
            assert_eq!(l.image, f.image.quantized());
            assert!((l.camera.pose.position - f.camera.pose.position).norm() < 1e-12);
        }
    }
}

#[test]
fn normalized_frame_renders_match_world_renders() {
    let cfg = DatasetConfig {
        views_per_scene: 5,
        resolution: 48,
        seed: 40,
        ..DatasetConfig::default()
    };
    for index in 0..4 {
        let record = generate_record(&cfg, index).unwrap();
        let poses: Vec<CameraPose> = record.views.iter().map(|v| v.camera.pose).collect();
        let cond = index % poses.len();
        let (normalized, transform) = normalize_poses_with_transform(&poses, cond).unwrap();
        for (view, pose) in record.views.iter().zip(&normalized) {
            let rays = generate_rays(&view.camera.intrinsics, pose).unwrap();
            let img = raytrace_rays(&record.scene, &rays, Some(&transform));
            assert_eq!(img.to_bytes(), view.image.to_bytes(), "scene {index}");
        }
    }
}
