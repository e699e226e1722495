#![allow(dead_code)]

//! Checks shared by the acceptance gate and the integration tests.

use candle_core::{DType, Device, Tensor, Var};
use facemotion::expr_vae::kl_tensor;
use facemotion::geometry::{
    compose_keypoints, dense_flow_tensor, identity_grid, invert_points_tensor, project_orthographic_tensor,
    sparse_motion_tensor, warp, AugmentTransform, KeypointSet, MotionParams, Rotation,
};
use facemotion::losses::{
    canonical_consistency_loss, deformation_prior_loss, equivariance_loss, expression_consistency_loss,
    feature_matching_loss, keypoint_prior_loss, landmark_loss, lsgan_d_loss, lsgan_g_loss, perceptual_multiscale,
    total_loss, LossConfig, LossTerms, SurrogatePerceptual, NUM_LANDMARKS,
};
use facemotion::nets::GeneratorOutput;
use facemotion::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    use std::f64::consts::PI;
    Rotation::from_euler(rng.random_range(-PI..PI), rng.random_range(-PI / 2.0..PI / 2.0), rng.random_range(-PI..PI))
}

pub fn random_points(rng: &mut ChaCha8Rng, k: usize) -> Vec<[f64; 3]> {
    (0..k).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect()
}

// ---------------------------------------------------------------- geometry

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn pairwise(p: &[[f64; 3]]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            out.push(dist(p[i], p[j]));
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst-case errors of the four geometric invariants over `n` random instances.
#[derive(Debug, Default)]
pub struct GeometryReport {
    pub rigidity: f64,
    pub translation: f64,
    pub composition: f64,
    /// Largest amount by which a dense flow leaves the per-pixel candidate hull.
    pub convexity: f64,
}

impl GeometryReport {
    pub fn worst(&self) -> f64 {
        self.rigidity.max(self.translation).max(self.composition).max(self.convexity)
    }
}

pub fn geometry_invariants(n: usize, seed: u64) -> Result<GeometryReport> {
    let mut rng = rng(seed);
    let mut rep = GeometryReport::default();
    for _ in 0..n {
        let k = rng.random_range(2..24);
        let pc = KeypointSet::new(random_points(&mut rng, k))?;
        let f = rng.random_range(0.2..3.0);
        let r1 = random_rotation(&mut rng);
        let t1 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let rigid = |rotation: Rotation, scale: f64, translation: [f64; 2]| MotionParams {
            rotation,
            translation,
            scale,
            deformation: vec![[0.0; 3]; k],
        };

        // rigidity
        let moved = compose_keypoints(&pc, &rigid(r1, f, t1))?;
        let want: Vec<f64> = pairwise(pc.points()).iter().map(|d| d * f).collect();
        rep.rigidity = rep.rigidity.max(max_abs_diff(&pairwise(moved.points()), &want));

        // translation does not change shape
        let t2 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let other = compose_keypoints(&pc, &rigid(r1, f, t2))?;
        rep.translation = rep.translation.max(max_abs_diff(&pairwise(moved.points()), &pairwise(other.points())));

        // R2 (R1 f p) = (R2 R1) f p
        let r2 = random_rotation(&mut rng);
        let first = compose_keypoints(&pc, &rigid(r1, f, [0.0, 0.0]))?;
        let twice = compose_keypoints(&first, &rigid(r2, 1.0, [0.0, 0.0]))?;
        let once = compose_keypoints(&pc, &rigid(r2.compose(&r1), f, [0.0, 0.0]))?;
        let a: Vec<f64> = twice.points().concat();
        let b: Vec<f64> = once.points().concat();
        rep.composition = rep.composition.max(max_abs_diff(&a, &b));

        // convex combination of candidate flows
        let (kc, h, w) = (rng.random_range(1..6), 4, 5);
        let cand = uniform(&mut rng, &[1, kc + 1, h, w, 2], -2.0, 2.0);
        let logits = uniform(&mut rng, &[1, kc + 1, h, w], -4.0, 4.0);
        let masks = candle_nn_softmax(&logits)?;
        let flow = dense_flow_tensor(&cand, &masks)?;
        let lo = cand.min(1)?;
        let hi = cand.max(1)?;
        let below = (lo - &flow)?.relu()?.max_all()?.to_scalar::<f64>()?;
        let above = (&flow - hi)?.relu()?.max_all()?.to_scalar::<f64>()?;
        rep.convexity = rep.convexity.max(below).max(above);
    }
    Ok(rep)
}

/// Softmax over axis 1.
fn candle_nn_softmax(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_POINTS: usize = 20;
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Coordinates probed per input tensor and point.
const COORDS_PER_INPUT: usize = 6;
/// Relative errors use `max(|analytic|, |numeric|, GRAD_FLOOR)` as the denominator,
/// so gradients that are zero up to rounding compare absolutely.
const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug)]
pub struct GradReport {
    pub name: &'static str,
    pub points: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
}

/// Central-difference check of `f` at `points` random inputs from `gen`.
pub fn grad_check(
    name: &'static str,
    seed: u64,
    points: usize,
    gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<GradReport> {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for _ in 0..points {
        let inputs = gen(&mut rng);
        let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
        let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let loss = f(&tensors)?;
        let grads = loss.backward()?;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = match grads.get(vars[i].as_tensor()) {
                Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
                None => vec![0.0; input.elem_count()],
            };
            let base = input.flatten_all()?.to_vec1::<f64>()?;
            let n = base.len();
            let picks: Vec<usize> =
                if n <= COORDS_PER_INPUT { (0..n).collect() } else { (0..COORDS_PER_INPUT).map(|_| rng.random_range(0..n)).collect() };
            for j in picks {
                let eval = |delta: f64| -> Result<f64> {
                    let mut v = base.clone();
                    v[j] += delta;
                    let mut probe = inputs.clone();
                    probe[i] = Tensor::from_vec(v, input.shape(), &Device::Cpu)?;
                    Ok(f(&probe)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
                };
                let a = analytic[j];
                let rel = |numeric: f64| (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
                // a stencil straddling a relu/abs/bilinear kink is retried at a finer step
                let mut err = f64::INFINITY;
                for h in [FD_STEP, FD_STEP / 10.0] {
                    err = err.min(rel((eval(h)? - eval(-h)?) / (2.0 * h)));
                    if err < GRAD_TOLERANCE {
                        break;
                    }
                }
                worst = worst.max(err);
                coordinates += 1;
            }
        }
    }
    Ok(GradReport { name, points, coordinates, max_rel_err: worst })
}

fn pick_transforms(rng: &mut ChaCha8Rng, b: usize) -> Vec<AugmentTransform> {
    (0..b)
        .map(|_| {
            AugmentTransform::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(0.85..1.15),
                [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)],
            )
            .unwrap()
        })
        .collect()
}

/// Every loss term, the weighted total, the KL term and the compose → flow → warp chain.
pub fn gradient_suite(points: usize) -> Result<Vec<GradReport>> {
    let cfg = LossConfig::default();
    let mut out = Vec::new();

    let extractor = SurrogatePerceptual::new(2, 11, DType::F64)?;
    out.push(grad_check(
        "perceptual",
        1,
        points,
        |r| vec![uniform(r, &[1, 3, 8, 8], -1.0, 1.0), uniform(r, &[1, 3, 16, 16], -1.0, 1.0), uniform(r, &[1, 3, 16, 16], -1.0, 1.0)],
        |t| {
            let gen = GeneratorOutput { images: vec![t[0].clone(), t[1].clone()] };
            let truth = vec![t[2].avg_pool2d(2)?, t[2].clone()];
            perceptual_multiscale(&gen, &truth, &extractor)
        },
    )?);
    out.push(grad_check(
        "lsgan_d",
        2,
        points,
        |r| vec![uniform(r, &[2, 1, 3, 3], -2.0, 2.0), uniform(r, &[2, 1, 3, 3], -2.0, 2.0)],
        |t| lsgan_d_loss(&t[0], &t[1]),
    )?);
    out.push(grad_check("lsgan_g", 3, points, |r| vec![uniform(r, &[2, 1, 3, 3], -2.0, 2.0)], |t| lsgan_g_loss(&t[0]))?);
    out.push(grad_check(
        "feature_matching",
        4,
        points,
        |r| {
            vec![
                uniform(r, &[2, 4, 3, 3], -1.0, 1.0),
                uniform(r, &[2, 4, 3, 3], -1.0, 1.0),
                uniform(r, &[2, 8, 2, 2], -1.0, 1.0),
                uniform(r, &[2, 8, 2, 2], -1.0, 1.0),
            ]
        },
        |t| feature_matching_loss(&[t[0].clone(), t[2].clone()], &[t[1].clone(), t[3].clone()]),
    )?);
    let transforms = pick_transforms(&mut rng(5), 2);
    out.push(grad_check(
        "equivariance",
        5,
        points,
        |r| vec![uniform(r, &[2, 10, 2], -1.0, 1.0), uniform(r, &[2, 10, 2], -1.0, 1.0)],
        |t| equivariance_loss(&t[0], &t[1], &transforms),
    )?);
    out.push(grad_check(
        "keypoint_prior",
        6,
        points,
        |r| vec![uniform(r, &[2, 10, 3], -0.5, 0.5)],
        |t| keypoint_prior_loss(&t[0], &cfg),
    )?);
    out.push(grad_check(
        "deformation_prior",
        7,
        points,
        |r| vec![uniform(r, &[2, 10, 3], -1.0, 1.0)],
        |t| deformation_prior_loss(&t[0]),
    )?);
    out.push(grad_check(
        "expression",
        8,
        points,
        |r| vec![uniform(r, &[2, 16], -1.0, 1.0), uniform(r, &[2, 16], -1.0, 1.0)],
        |t| expression_consistency_loss(&t[0], &t[1]),
    )?);
    out.push(grad_check(
        "canonical",
        9,
        points,
        |r| vec![uniform(r, &[2, 10, 3], -1.0, 1.0), uniform(r, &[2, 10, 3], -1.0, 1.0)],
        |t| canonical_consistency_loss(&t[0], &t[1]),
    )?);
    let lm_cfg = LossConfig { lambda_face: 1.0, lambda_mouth: 2.0, lambda_pupil: 0.5, ..LossConfig::default() };
    out.push(grad_check(
        "landmark",
        10,
        points,
        |r| vec![uniform(r, &[1, NUM_LANDMARKS, 2], -1.0, 1.0), uniform(r, &[1, NUM_LANDMARKS, 2], -1.0, 1.0)],
        |t| landmark_loss(&t[0], &t[1], &lm_cfg),
    )?);
    let mut weighted = LossConfig::default();
    weighted.weights.gan = 0.3;
    weighted.weights.landmark = 2.5;
    out.push(grad_check(
        "total",
        12,
        points,
        |r| (0..9).map(|_| uniform(r, &[], -1.0, 1.0)).collect(),
        |t| {
            let terms = LossTerms {
                perceptual: Some(t[0].clone()),
                gan: Some(t[1].clone()),
                feature_matching: Some(t[2].clone()),
                equivariance: Some(t[3].clone()),
                keypoint_prior: Some(t[4].clone()),
                deformation_prior: Some(t[5].clone()),
                expression: Some(t[6].clone()),
                canonical: Some(t[7].clone()),
                landmark: Some(t[8].clone()),
            };
            total_loss(&terms, &weighted)
        },
    )?);
    out.push(grad_check(
        "kl",
        13,
        points,
        |r| vec![uniform(r, &[4, 8], -1.0, 1.0), uniform(r, &[4, 8], -1.0, 1.0)],
        |t| Ok(kl_tensor(&t[0], &t[1])?.mean_all()?),
    )?);
    out.push(warp_chain(points)?);
    Ok(out)
}

/// compose keypoints → local affine candidates → mask-weighted flow → bilinear warp.
fn warp_chain(points: usize) -> Result<GradReport> {
    let (k, s) = (4, 8);
    let grid = identity_grid(s, s, DType::F64, &Device::Cpu)?;
    let mut r0 = rng(14);
    let r_s = Tensor::from_vec(random_rotation(&mut r0).0.concat(), (1, 3, 3), &Device::Cpu)?;
    let r_d = Tensor::from_vec(random_rotation(&mut r0).0.concat(), (1, 3, 3), &Device::Cpu)?;
    let weights = uniform(&mut r0, &[1, 3, s, s], -1.0, 1.0);
    grad_check(
        "compose_flow_warp",
        15,
        points,
        |r| {
            vec![
                uniform(r, &[1, k, 3], -0.6, 0.6),  // canonical
                uniform(r, &[1, k, 3], -0.1, 0.1),  // deformation
                uniform(r, &[1, 1], 0.7, 1.0),      // scale
                uniform(r, &[1, 2], -0.1, 0.1),     // translation
                uniform(r, &[1, 2, 2], -0.2, 0.2),  // jacobian offset
                uniform(r, &[1, k + 1, s, s], -2.0, 2.0), // mask logits
                uniform(r, &[1, 3, s, s], -1.0, 1.0), // source image
            ]
        },
        |t| {
            let zero = t[1].zeros_like()?;
            let p_s = facemotion::geometry::compose_keypoints_tensor(&t[0], &r_s, &t[2], &t[3], &zero)?;
            let p_d = facemotion::geometry::compose_keypoints_tensor(&t[0], &r_d, &t[2], &t[3], &t[1])?;
            let (p_s, p_d) = (project_orthographic_tensor(&p_s)?, project_orthographic_tensor(&p_d)?);
            let eye = Tensor::eye(2, DType::F64, &Device::Cpu)?.unsqueeze(0)?;
            let jac = (eye + &t[4])?;
            let cand = sparse_motion_tensor(&grid, &p_s, &p_d, &jac)?;
            let cand = Tensor::cat(&[&grid.unsqueeze(0)?.unsqueeze(0)?, &cand], 1)?;
            let masks = candle_nn_softmax(&t[5])?;
            let flow = dense_flow_tensor(&cand, &masks)?;
            let out = warp(&t[6], &flow)?;
            Ok((out * &weights)?.sum_all()?)
        },
    )
}

pub fn transforms(seed: u64, b: usize) -> Vec<AugmentTransform> {
    pick_transforms(&mut rng(seed), b)
}

/// Applies each batch element's transform to its points, `(B,K,2)`.
pub fn forward_points(p: &Tensor, ts: &[AugmentTransform]) -> Result<Tensor> {
    let (b, k, _) = p.dims3()?;
    let v = p.to_vec3::<f64>()?;
    let mut out = Vec::with_capacity(b * k * 2);
    for (rows, t) in v.iter().zip(ts) {
        for q in rows {
            out.extend(t.apply_point([q[0], q[1]]));
        }
    }
    Ok(Tensor::from_vec(out, (b, k, 2), &Device::Cpu)?)
}

pub fn check_inverse(p: &Tensor, ts: &[AugmentTransform]) -> Result<f64> {
    let back = invert_points_tensor(&forward_points(p, ts)?, ts)?;
    Ok((back - p)?.abs()?.max_all()?.to_scalar::<f64>()?)
}
