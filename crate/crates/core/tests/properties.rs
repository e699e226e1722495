mod support;

use candle_core::{DType, Device, Tensor};
use facemotion::eval::{psnr, ssim, Image};
use facemotion::expr_vae::{interpolate, kl_to_standard_normal, reparameterize, GaussianParams, LatentCode};
use facemotion::geometry::{
    compose_keypoints, dense_flow_tensor, invert_augment_points, AugmentTransform, KeypointSet, MotionParams, Rotation,
};
use facemotion::losses::{
    canonical_consistency_loss, deformation_prior_loss, equivariance_loss, expression_consistency_loss,
    feature_matching_loss, keypoint_prior_loss, landmark_loss, lsgan_g_loss, mean_point_distance, LossConfig,
    NUM_LANDMARKS,
};
use proptest::collection::vec;
use proptest::prelude::*;

fn point() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-1.0..1.0f64)
}

fn angles() -> impl Strategy<Value = (f64, f64, f64)> {
    use std::f64::consts::PI;
    (-PI..PI, -PI / 2.0..PI / 2.0, -PI..PI)
}

fn transform() -> impl Strategy<Value = AugmentTransform> {
    (-0.8..0.8f64, 0.5..2.0f64, prop::array::uniform2(-0.5..0.5f64))
        .prop_map(|(a, s, t)| AugmentTransform::new(a, s, t).unwrap())
}

fn rigid(r: Rotation, f: f64, t: [f64; 2], k: usize) -> MotionParams {
    MotionParams { rotation: r, translation: t, scale: f, deformation: vec![[0.0; 3]; k] }
}

fn pairwise(p: &[[f64; 3]]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            out.push(((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2) + (p[i][2] - p[j][2]).powi(2)).sqrt());
        }
    }
    out
}

fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn scalar(t: Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rigid_motion_scales_distances(pts in vec(point(), 2..20), (y, p, r) in angles(), f in 0.1..4.0f64, t in prop::array::uniform2(-2.0..2.0f64)) {
        let pc = KeypointSet::new(pts.clone()).unwrap();
        let out = compose_keypoints(&pc, &rigid(Rotation::from_euler(y, p, r), f, t, pts.len())).unwrap();
        for (a, b) in pairwise(out.points()).iter().zip(pairwise(&pts)) {
            prop_assert!((a - f * b).abs() < 1e-5);
        }
    }

    #[test]
    fn translation_leaves_shape_unchanged(pts in vec(point(), 2..20), (y, p, r) in angles(), t1 in prop::array::uniform2(-2.0..2.0f64), t2 in prop::array::uniform2(-2.0..2.0f64)) {
        let pc = KeypointSet::new(pts.clone()).unwrap();
        let rot = Rotation::from_euler(y, p, r);
        let a = compose_keypoints(&pc, &rigid(rot, 1.3, t1, pts.len())).unwrap();
        let b = compose_keypoints(&pc, &rigid(rot, 1.3, t2, pts.len())).unwrap();
        for (x, z) in pairwise(a.points()).iter().zip(pairwise(b.points())) {
            prop_assert!((x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn rotations_compose(pts in vec(point(), 1..20), a1 in angles(), a2 in angles(), f in 0.1..4.0f64) {
        let pc = KeypointSet::new(pts.clone()).unwrap();
        let (r1, r2) = (Rotation::from_euler(a1.0, a1.1, a1.2), Rotation::from_euler(a2.0, a2.1, a2.2));
        let k = pts.len();
        let twice = compose_keypoints(&compose_keypoints(&pc, &rigid(r1, f, [0.0; 2], k)).unwrap(), &rigid(r2, 1.0, [0.0; 2], k)).unwrap();
        let once = compose_keypoints(&pc, &rigid(r2.compose(&r1), f, [0.0; 2], k)).unwrap();
        for (a, b) in twice.points().iter().flatten().zip(once.points().iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn dense_flow_stays_in_candidate_hull(c in vec(-3.0..3.0f64, 4 * 3 * 3 * 2), m in vec(0.0..1.0f64, 4 * 3 * 3)) {
        let cand = tensor(c, &[1, 4, 3, 3, 2]);
        let raw = tensor(m, &[1, 4, 3, 3]);
        let masks = (&raw + 1e-3).unwrap();
        let masks = masks.broadcast_div(&masks.sum_keepdim(1).unwrap()).unwrap();
        let flow = dense_flow_tensor(&cand, &masks).unwrap();
        let below = scalar((cand.min(1).unwrap() - &flow).unwrap().max_all().unwrap());
        let above = scalar((&flow - cand.max(1).unwrap()).unwrap().max_all().unwrap());
        prop_assert!(below <= 1e-12 && above <= 1e-12);
    }

    #[test]
    fn augment_points_round_trip(t in transform(), pts in vec(prop::array::uniform2(-1.0..1.0f64), 1..30)) {
        let fwd: Vec<[f64; 2]> = pts.iter().map(|p| t.apply_point(*p)).collect();
        let back = invert_augment_points(&fwd, &t);
        for (a, b) in back.iter().zip(&pts) {
            prop_assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn equivariant_keypoints_have_zero_loss(t1 in transform(), t2 in transform(), v in vec(-1.0..1.0f64, 2 * 10 * 2)) {
        let p = tensor(v, &[2, 10, 2]);
        let ts = [t1, t2];
        let p_t = support::forward_points(&p, &ts).unwrap();
        prop_assert!(scalar(equivariance_loss(&p, &p_t, &ts).unwrap()) < 1e-9);
    }

    #[test]
    fn keypoint_prior_ignores_order(v in vec(-0.5..0.5f64, 12 * 3), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let cfg = LossConfig::default();
        let rows: Vec<Vec<f64>> = v.chunks(3).map(|c| c.to_vec()).collect();
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = scalar(keypoint_prior_loss(&tensor(rows.concat(), &[1, 12, 3]), &cfg).unwrap());
        let b = scalar(keypoint_prior_loss(&tensor(shuffled.concat(), &[1, 12, 3]), &cfg).unwrap());
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-12 * a.max(1.0));
    }

    #[test]
    fn losses_nonnegative_and_zero_at_identity(a in vec(-1.0..1.0f64, 2 * 8 * 3), b in vec(-1.0..1.0f64, 2 * 8 * 3)) {
        let (x, y) = (tensor(a.clone(), &[2, 8, 3]), tensor(b, &[2, 8, 3]));
        prop_assert!(scalar(canonical_consistency_loss(&x, &y).unwrap()) >= 0.0);
        prop_assert_eq!(scalar(canonical_consistency_loss(&x, &x).unwrap()), 0.0);
        prop_assert_eq!(scalar(mean_point_distance(&x, &x).unwrap()), 0.0);
        prop_assert!(scalar(deformation_prior_loss(&y).unwrap()) >= 0.0);
        prop_assert_eq!(scalar(deformation_prior_loss(&x.zeros_like().unwrap()).unwrap()), 0.0);
        let (f, g) = (x.reshape((2, 24)).unwrap(), y.reshape((2, 24)).unwrap());
        let cos = scalar(expression_consistency_loss(&f, &g).unwrap());
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&cos));
        prop_assert!(scalar(expression_consistency_loss(&f, &(&f * 3.0).unwrap()).unwrap()).abs() < 1e-12);
        prop_assert_eq!(scalar(feature_matching_loss(std::slice::from_ref(&x), std::slice::from_ref(&x)).unwrap()), 0.0);
        prop_assert!(scalar(feature_matching_loss(std::slice::from_ref(&x), std::slice::from_ref(&y)).unwrap()) >= 0.0);
        prop_assert_eq!(scalar(lsgan_g_loss(&x.ones_like().unwrap()).unwrap()), 0.0);
    }

    #[test]
    fn landmark_loss_zero_on_identical_sets(v in vec(-1.0..1.0f64, NUM_LANDMARKS * 2), w in vec(-1.0..1.0f64, NUM_LANDMARKS * 2)) {
        let cfg = LossConfig::default();
        let (a, b) = (tensor(v, &[1, NUM_LANDMARKS, 2]), tensor(w, &[1, NUM_LANDMARKS, 2]));
        prop_assert_eq!(scalar(landmark_loss(&a, &a, &cfg).unwrap()), 0.0);
        prop_assert!(scalar(landmark_loss(&a, &b, &cfg).unwrap()) > 0.0);
    }

    #[test]
    fn kl_is_nonnegative(mu in vec(-3.0..3.0f64, 1..16), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let sigma: Vec<f64> = mu.iter().map(|_| rng.random_range(0.05..4.0)).collect();
        let g = GaussianParams::new(mu, sigma).unwrap();
        prop_assert!(kl_to_standard_normal(&g) >= 0.0);
    }

    #[test]
    fn reparameterize_is_affine_in_epsilon(mu in vec(-3.0..3.0f64, 8), s in vec(0.05..3.0f64, 8), e1 in vec(-3.0..3.0f64, 8), e2 in vec(-3.0..3.0f64, 8)) {
        let g = GaussianParams::new(mu, s).unwrap();
        let z = |e: &[f64]| reparameterize(&g, e).unwrap().values().to_vec();
        let sum: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| a + b).collect();
        let (a, b, zero, ab) = (z(&e1), z(&e2), z(&[0.0; 8]), z(&sum));
        for i in 0..8 {
            prop_assert!((a[i] + b[i] - zero[i] - ab[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_path_is_monotone(zs in vec(-3.0..3.0f64, 6), zd in vec(-3.0..3.0f64, 6)) {
        let (s, d) = (LatentCode::new(zs.clone()).unwrap(), LatentCode::new(zd.clone()).unwrap());
        let (a0, a1) = (interpolate(&s, &d, 0.0).unwrap(), interpolate(&s, &d, 1.0).unwrap());
        prop_assert_eq!(a0.values(), &zs[..]);
        prop_assert_eq!(a1.values(), &zd[..]);
        let path: Vec<Vec<f64>> = (0..=10).map(|i| interpolate(&s, &d, i as f64 / 10.0).unwrap().values().to_vec()).collect();
        for w in path.windows(2) {
            for i in 0..6 {
                let step = w[1][i] - w[0][i];
                prop_assert!(step * (zd[i] - zs[i]) >= -1e-12);
            }
        }
    }

    #[test]
    fn image_metrics_are_symmetric(a in vec(0.0..1.0f64, 3 * 6 * 6), b in vec(0.0..1.0f64, 3 * 6 * 6)) {
        let (x, y) = (Image::new(3, 6, 6, a).unwrap(), Image::new(3, 6, 6, b).unwrap());
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn geometry_sweep_within_tolerance() {
    let rep = support::geometry_invariants(200, 42).unwrap();
    assert!(rep.worst() < 1e-5, "{rep:?}");
}

#[test]
fn augment_tensor_inverse_matches_points() {
    let mut rng = support::rng(3);
    let p = support::uniform(&mut rng, &[3, 7, 2], -1.0, 1.0);
    assert!(support::check_inverse(&p, &support::transforms(4, 3)).unwrap() < 1e-12);
}

#[test]
fn grad_check_catches_a_wrong_backward() {
    // backward through x.detach() * x sees half the true gradient
    let rep = support::grad_check(
        "halved",
        9,
        5,
        |r| vec![support::uniform(r, &[4], 0.5, 1.0)],
        |t| Ok((t[0].detach() * &t[0])?.sum_all()?),
    )
    .unwrap();
    assert!(rep.max_rel_err > 0.4, "{rep:?}");
}
