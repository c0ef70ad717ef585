use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use randstream::scene::{
    Camera, Intrinsics, SceneConfig, SceneSampler, SuperShapeParams, object_to_pixel, sample_camera, sample_rotation,
    sample_upper_hemisphere, supershape_mesh,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn sphere_parameters_give_unit_sphere() {
    for m in [0.0, 1.0, 4.0, 7.0, 12.0] {
        let p = SuperShapeParams::from_array([m, 1.0, 1.0, 2.0, 2.0, 2.0, m, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let mesh = supershape_mesh(&p, 32, 32);
        assert!(!mesh.vertices.is_empty());
        for v in &mesh.vertices {
            let r = Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64).norm();
            assert!((r - 1.0).abs() < 1e-6, "m={m}: |v| = {r}");
        }
    }
}

#[test]
fn extreme_parameters_give_finite_meshes() {
    let mut r = rng(3);
    let cfg = SceneConfig::default();
    for _ in 0..50 {
        let curve = |r: &mut ChaCha8Rng| {
            [
                cfg.occluder_m.sample(r),
                cfg.occluder_ab.sample(r),
                cfg.occluder_ab.sample(r),
                cfg.occluder_n.sample(r),
                cfg.occluder_n.sample(r),
                cfg.occluder_n.sample(r),
            ]
        };
        let (a, b) = (curve(&mut r), curve(&mut r));
        let mut p = [0.0; 12];
        p[..6].copy_from_slice(&a);
        p[6..].copy_from_slice(&b);
        let mesh = supershape_mesh(&SuperShapeParams::from_array(p), 16, 16);
        assert!(mesh.vertices.iter().flatten().all(|c| c.is_finite()));
    }
}

#[test]
fn projection_principal_point_and_hand_fixture() {
    let k = Intrinsics {
        focal: 500.0,
        cx: 320.0,
        cy: 256.0,
        width: 640,
        height: 512,
    };
    let cam = Camera::look_at(Vector3::new(0.0, 0.0, 5.0), Vector3::zeros(), 0.0, k);
    let px = object_to_pixel(&cam, &[Vector3::zeros(), Vector3::new(0.5, 0.0, 0.0), Vector3::new(0.0, 0.0, 6.0)]);
    assert!((px[0].u - 320.0).abs() < 1e-9 && (px[0].v - 256.0).abs() < 1e-9);
    assert!(px[0].in_front);
    assert!((px[1].u - 370.0).abs() < 1e-6 && (px[1].v - 256.0).abs() < 1e-6);
    assert!(!px[2].in_front);

    // Any sampled camera keeps the origin on its optical axis.
    let cfg = SceneConfig::default();
    let mut r = rng(11);
    for _ in 0..200 {
        let cam = sample_camera(&mut r, &cfg);
        let p = cam.project(&Vector3::zeros());
        assert!((p.u - cfg.intrinsics.cx).abs() < 1e-9 && (p.v - cfg.intrinsics.cy).abs() < 1e-9);
    }
}

#[test]
fn camera_positions_on_hemisphere_shell() {
    let mut cfg = SceneConfig::default();
    cfg.camera_radius.lo = 8.0;
    cfg.camera_radius.hi = 12.0;
    let mut r = rng(5);
    for _ in 0..2000 {
        let cam = sample_camera(&mut r, &cfg);
        let n = cam.position.norm();
        assert!(cam.position.z >= 0.0);
        assert!((8.0 - 1e-9..=12.0 + 1e-9).contains(&n));
        let axis_residual = cam.position.normalize() + cam.forward();
        assert!(axis_residual.norm() < 1e-6);
    }
}

#[test]
fn hemisphere_mean_height_is_half() {
    let mut r = rng(7);
    let n = 100_000;
    let mean: f64 = (0..n).map(|_| sample_upper_hemisphere(&mut r).z).sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 0.005, "E[z] = {mean}");

    let mut cfg = SceneConfig::default();
    cfg.camera_radius.lo = 10.0;
    cfg.camera_radius.hi = 10.0;
    let mean: f64 = (0..n).map(|_| sample_camera(&mut r, &cfg).position.z).sum::<f64>() / n as f64;
    assert!((mean - 5.0).abs() < 0.05, "E[z] = {mean}");
}

#[test]
fn rotations_average_to_zero() {
    let mut r = rng(13);
    let n = 20_000;
    let mut sum = Matrix3::zeros();
    for _ in 0..n {
        let q = sample_rotation(&mut r);
        assert!((q.norm() - 1.0).abs() < 1e-12);
        sum += q.to_rotation_matrix().into_inner();
    }
    let mean = sum / n as f64;
    assert!(mean.iter().all(|x| x.abs() < 0.02), "{mean}");
}

#[test]
fn class_frequencies_follow_probs() {
    let mut cfg = SceneConfig::with_classes(3);
    cfg.class_probs = vec![0.2, 0.3, 0.5];
    cfg.objects_per_scene = 1;
    cfg.occluder_prob = 0.0;
    cfg.mesh_res = 6;
    let sampler = SceneSampler::new(cfg.clone()).unwrap();
    let mut r = rng(17);
    let n = 10_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let s = sampler.sample(&mut r);
        counts[s.instances[0].class_id().unwrap() as usize] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&cfg.class_probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // chi-square, 2 degrees of freedom, p = 0.01
    assert!(chi2 < 9.21, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn settled_scenes_rest_on_ground() {
    let cfg = SceneConfig {
        mesh_res: 12,
        ..SceneConfig::default()
    };
    let sampler = SceneSampler::new(cfg).unwrap();
    let mut r = rng(19);
    let (mut flagged, mut total) = (0, 0);
    for _ in 0..300 {
        let s = sampler.sample(&mut r);
        for inst in &s.instances {
            assert!(inst.min_z().abs() < 1e-6, "min z {}", inst.min_z());
        }
        flagged += s.unresolved_overlaps;
        total += s.instances.len();
    }
    assert!((flagged as f64) < 0.05 * total as f64, "{flagged} of {total} flagged");
}

#[test]
fn sparse_scenes_have_disjoint_footprints() {
    let cfg = SceneConfig {
        objects_per_scene: 2,
        occluder_prob: 0.0,
        placement_radius: 50.0,
        mesh_res: 8,
        ..SceneConfig::default()
    };
    let sampler = SceneSampler::new(cfg).unwrap();
    let mut r = rng(23);
    for _ in 0..1000 {
        let s = sampler.sample(&mut r);
        assert_eq!(s.unresolved_overlaps, 0);
        let (a, b) = (&s.instances[0], &s.instances[1]);
        let d = (a.translation.x - b.translation.x).hypot(a.translation.y - b.translation.y);
        assert!(d >= a.footprint_radius() + b.footprint_radius());
    }
}

#[test]
fn sampling_is_deterministic() {
    let sampler = SceneSampler::new(SceneConfig {
        mesh_res: 8,
        ..SceneConfig::default()
    })
    .unwrap();
    let a: Vec<_> = {
        let mut r = rng(29);
        (0..5).map(|_| sampler.sample(&mut r)).collect()
    };
    let b: Vec<_> = {
        let mut r = rng(29);
        (0..5).map(|_| sampler.sample(&mut r)).collect()
    };
    assert_eq!(a, b);
}
