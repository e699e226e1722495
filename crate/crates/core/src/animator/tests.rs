use super::*;
use crate::expr_vae::VaeConfig;
use crate::pipeline::{synthetic_dataset, SyntheticConfig};

fn animator(with_vae: bool) -> Animator {
    let cfg = RunConfig::toy();
    let state = TrainState::new(&cfg).unwrap();
    let vae = with_vae.then(|| VaeState::new(&VaeConfig::default(), 3, 0.5, 0.9, 1e-8).unwrap());
    Animator::new(state, vae, "test".into())
}

fn frames() -> Vec<FrameInput> {
    let ds = synthetic_dataset(&SyntheticConfig { sequences: 2, frames_per_sequence: 2, ..Default::default() }, 64).unwrap();
    ds.iter().flat_map(|s| s.frames.iter().map(|f| FrameInput::from_frame(&f.image, f.meta.as_ref()))).collect()
}

/// `R_z(roll)·R_y(yaw)·R_x(pitch)` written out by hand.
fn rot(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut o = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        o
    };
    mul(rz, mul(ry, rx))
}

fn expected_2d(pc: &KeypointSet, r: [[f64; 3]; 3], f: f64, t: [f64; 2], delta: &[[f64; 3]]) -> Vec<[f64; 2]> {
    pc.points()
        .iter()
        .zip(delta)
        .map(|(p, d)| {
            let q = [f * (p[0] + d[0]), f * (p[1] + d[1]), f * (p[2] + d[2])];
            [
                r[0][0] * q[0] + r[0][1] * q[1] + r[0][2] * q[2] + t[0],
                r[1][0] * q[0] + r[1][1] * q[1] + r[1][2] * q[2] + t[1],
            ]
        })
        .collect()
}

fn max_diff(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    a.iter().zip(b).flat_map(|(p, q)| [(p[0] - q[0]).abs(), (p[1] - q[1]).abs()]).fold(0.0, f64::max)
}

#[test]
fn neutral_request_reproduces_canonical_keypoints() {
    let a = animator(false);
    let src = frames().remove(0);
    let pc = a.canonical_keypoints(&src).unwrap();
    let out = a.edit_attributes(&EditRequest::neutral(src.clone())).unwrap();
    assert_eq!(out.keypoints, pc);
    let canon = a.canonical_face(&src).unwrap();
    assert_eq!(
        canon.image.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        out.image.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    );
    assert_eq!(out.image.dims(), &[3, 64, 64]);
}

#[test]
fn attribute_overrides_follow_geometry() {
    let a = animator(false);
    let src = frames().remove(0);
    let pc = a.canonical_keypoints(&src).unwrap();
    let zero = vec![[0.0; 3]; pc.len()];
    let cases = [
        (0.3, 0.0, 0.0, 1.0, [0.0, 0.0]),
        (0.0, -0.25, 0.0, 1.0, [0.0, 0.0]),
        (0.0, 0.0, 0.4, 1.0, [0.0, 0.0]),
        (0.0, 0.0, 0.0, 1.3, [0.0, 0.0]),
        (0.1, 0.2, -0.3, 0.8, [0.05, -0.1]),
    ];
    for (yaw, pitch, roll, scale, t) in cases {
        let req = EditRequest {
            yaw: Some(yaw),
            pitch: Some(pitch),
            roll: Some(roll),
            scale: Some(scale),
            translation: Some(t),
            ..EditRequest::neutral(src.clone())
        };
        let out = a.edit_attributes(&req).unwrap();
        let want = expected_2d(&pc, rot(yaw, pitch, roll), scale, t, &zero);
        assert!(max_diff(&out.keypoints_2d, &want) < 1e-5);
    }
    let base = a.edit_attributes(&EditRequest::neutral(src.clone())).unwrap();
    let moved = a.edit_attributes(&EditRequest { translation: Some([0.2, -0.1]), ..EditRequest::neutral(src) }).unwrap();
    let shifted: Vec<_> = base.keypoints_2d.iter().map(|p| [p[0] + 0.2, p[1] - 0.1]).collect();
    assert!(max_diff(&moved.keypoints_2d, &shifted) < 1e-12);
}

#[test]
fn driving_defaults_and_expression_sources() {
    let a = animator(false);
    let fs = frames();
    let (src, drv) = (&fs[0], &fs[1]);
    let req = EditRequest { source: Some(src.clone()), driving: Some(drv.clone()), ..EditRequest::default() };
    let edited = a.edit_attributes(&req).unwrap();
    let reenacted = a.reenact(src, drv, &ReenactOptions::default()).unwrap();
    assert_eq!(edited.keypoints, reenacted.keypoints);
    let [y, p, r] = drv.pose.unwrap();
    let yaw_only = EditRequest { yaw: Some(y + 0.1), ..req.clone() };
    let out = a.edit_attributes(&yaw_only).unwrap();
    assert_eq!(out.motion.rotation, Rotation::from_euler(y + 0.1, p, r));
    for expr in [ExpressionSource::Source, ExpressionSource::Neutral] {
        let out = a.edit_attributes(&EditRequest { expression: Some(expr), ..req.clone() }).unwrap();
        assert_eq!(out.motion.rotation, Rotation::from_euler(y, p, r));
    }
}

#[test]
fn request_validation() {
    let a = animator(false);
    let src = frames().remove(0);
    let bad = [
        EditRequest::default(),
        EditRequest { expression: Some(ExpressionSource::Driving), ..EditRequest::neutral(src.clone()) },
        EditRequest { alpha: Some(0.5), ..EditRequest::neutral(src.clone()) },
        EditRequest { expression: Some(ExpressionSource::VaeLatent), ..EditRequest::neutral(src.clone()) },
        EditRequest { scale: Some(0.0), ..EditRequest::neutral(src.clone()) },
        EditRequest { yaw: Some(f64::NAN), ..EditRequest::neutral(src.clone()) },
    ];
    for req in bad {
        assert!(matches!(a.edit_attributes(&req), Err(Error::InvalidArgument(_))), "{req:?}");
    }
    let latent = EditRequest {
        expression: Some(ExpressionSource::VaeLatent),
        latent: Some(vec![0.0; 64]),
        ..EditRequest::neutral(src.clone())
    };
    assert!(matches!(a.edit_attributes(&latent), Err(Error::MissingVae)));
    assert!(matches!(a.interpolate_expression(&src, &src, 0.5), Err(Error::MissingVae)));
    let wrong = FrameInput::new(Tensor::zeros((3, 32, 32), DType::F32, &Device::Cpu).unwrap());
    assert!(matches!(a.canonical_face(&wrong), Err(Error::Shape(_))));
}

#[test]
fn interpolation_endpoints_and_determinism() {
    let a = animator(true);
    let fs = frames();
    let (src, drv) = (&fs[0], &fs[3]);
    let (z_s, z_d) = a.latent_codes(src, drv).unwrap();
    let at0 = a.interpolate_expression(src, drv, 0.0).unwrap();
    let at1 = a.interpolate_expression(src, drv, 1.0).unwrap();
    assert_eq!(at0.latent, z_s);
    assert_eq!(at1.latent, z_d);
    assert_eq!(at0.feature, a.decode_feature(&z_s).unwrap());
    assert_eq!(at1.feature, a.decode_feature(&z_d).unwrap());
    let again = a.interpolate_expression(src, drv, 1.0).unwrap();
    assert_eq!(again.deformation, at1.deformation);
    assert!(a.interpolate_expression(src, drv, 1.5).is_err());
    let via_edit = a
        .edit_attributes(&EditRequest {
            source: Some(src.clone()),
            driving: Some(drv.clone()),
            expression: Some(ExpressionSource::VaeLatent),
            alpha: Some(1.0),
            ..EditRequest::default()
        })
        .unwrap();
    assert_eq!(via_edit.keypoints, at1.keypoints);
}

#[test]
fn relative_pose_with_reference_equal_to_source_is_absolute() {
    let a = animator(false);
    let fs = frames();
    let (src, drv) = (&fs[0], &fs[1]);
    let abs = a.reenact(src, drv, &ReenactOptions::default()).unwrap();
    let rel = a
        .reenact(src, drv, &ReenactOptions { pose: PoseTransfer::Relative, reference: Some(src.clone()), ..Default::default() })
        .unwrap();
    assert!(max_diff(&abs.keypoints_2d, &rel.keypoints_2d) < 1e-9);
    assert!(a.reenact(src, drv, &ReenactOptions { pose: PoseTransfer::Relative, ..Default::default() }).is_err());
    let cross = a.reenact(src, &fs[2], &ReenactOptions { mode: ReenactMode::CrossIdentity, ..Default::default() }).unwrap();
    let own = a.reenact(src, src, &ReenactOptions::default()).unwrap();
    assert_eq!(cross.motion.scale, own.motion.scale);
}
