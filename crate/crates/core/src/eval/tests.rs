use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn psnr_cases() {
    let a = random_image(3, 8, 8, 1);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    // constant offset of 0.1 gives MSE 0.01
    let b = Image { data: a.data.iter().map(|v| v + 0.1).collect(), ..a.clone() };
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    let c = random_image(3, 8, 8, 2);
    assert_eq!(psnr(&a, &c).unwrap(), psnr(&c, &a).unwrap());
    assert!(psnr(&a, &random_image(3, 8, 9, 2)).is_err());
}

#[test]
fn psnr_decreases_with_noise() {
    let clean = random_image(3, 16, 16, 3);
    let mut last = f64::INFINITY;
    for sigma in [0.01, 0.05, 0.1] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, sigma).unwrap();
        let noisy = Image { data: clean.data.iter().map(|v| v + normal.sample(&mut rng)).collect(), ..clean.clone() };
        let p = psnr(&clean, &noisy).unwrap();
        assert!(p < last);
        last = p;
    }
}

/// Two-pass windowed statistics over an explicitly collected, normalized window.
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let r = 5isize;
    let mut total = 0.0;
    for c in 0..a.channels {
        for y in 0..a.height as isize {
            for x in 0..a.width as isize {
                let mut win = Vec::new();
                for yy in (y - r).max(0)..=(y + r).min(a.height as isize - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(a.width as isize - 1) {
                        let d2 = ((yy - y).pow(2) + (xx - x).pow(2)) as f64;
                        let i = c * a.height * a.width + yy as usize * a.width + xx as usize;
                        win.push(((-d2 / (2.0 * 1.5 * 1.5)).exp(), a.data[i], b.data[i]));
                    }
                }
                let z: f64 = win.iter().map(|t| t.0).sum();
                let ma: f64 = win.iter().map(|t| t.0 * t.1).sum::<f64>() / z;
                let mb: f64 = win.iter().map(|t| t.0 * t.2).sum::<f64>() / z;
                let va: f64 = win.iter().map(|t| t.0 * (t.1 - ma).powi(2)).sum::<f64>() / z;
                let vb: f64 = win.iter().map(|t| t.0 * (t.2 - mb).powi(2)).sum::<f64>() / z;
                let cov: f64 = win.iter().map(|t| t.0 * (t.1 - ma) * (t.2 - mb)).sum::<f64>() / z;
                let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    total / (a.channels * a.height * a.width) as f64
}

#[test]
fn ssim_cases() {
    let a = random_image(1, 8, 8, 5);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let inv = Image { data: a.data.iter().map(|v| 1.0 - v).collect(), ..a.clone() };
    assert!(ssim(&a, &inv).unwrap() < 1.0);
    for seed in 0..5 {
        let (x, y) = (random_image(1, 8, 8, 10 + seed), random_image(1, 8, 8, 20 + seed));
        assert!((ssim(&x, &y).unwrap() - ssim_oracle(&x, &y)).abs() < 1e-6);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
    }
    let (x, y) = (random_image(3, 13, 9, 1), random_image(3, 13, 9, 2));
    assert!((ssim(&x, &y).unwrap() - ssim_oracle(&x, &y)).abs() < 1e-6);
}

#[test]
fn keypoint_distance_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a: Vec<[f64; 2]> = (0..20).map(|_| [rng.random(), rng.random()]).collect();
    assert_eq!(keypoint_distance(&a, &a).unwrap(), 0.0);
    let shifted: Vec<_> = a.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
    assert!((keypoint_distance(&a, &shifted).unwrap() - 5.0).abs() < 1e-12);
    let b: Vec<[f64; 2]> = (0..20).map(|_| [rng.random(), rng.random()]).collect();
    let oracle = a.iter().zip(&b).map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1])).sum::<f64>() / 20.0;
    assert!((keypoint_distance(&a, &b).unwrap() - oracle).abs() < 1e-12);
    assert!(keypoint_distance(&a, &b[..19]).is_err());
}

#[test]
fn ground_truth_against_itself() {
    let ds = crate::pipeline::synthetic_dataset(
        &crate::pipeline::SyntheticConfig { sequences: 2, frames_per_sequence: 3, ..Default::default() },
        64,
    )
    .unwrap();
    let mut records = Vec::new();
    for seq in ds.iter() {
        for (i, f) in seq.frames.iter().enumerate() {
            let kp: Vec<[f64; 2]> = f.meta.as_ref().unwrap().landmarks.clone();
            let (p, s, l, k) = score_frame(&f.image, &f.image, &kp, &kp).unwrap();
            assert_eq!((p, l, k), (PSNR_CAP, 0.0, 0.0));
            assert!((s - 1.0).abs() < 1e-12);
            records.push(FrameRecord {
                source_sequence: seq.name.clone(),
                driving_sequence: seq.name.clone(),
                driving_index: i,
                psnr: p,
                ssim: s + i as f64 * 1e-3,
                l1: l,
                keypoint_distance: k,
            });
        }
    }
    let report = EvalReport::new(Protocol::SameIdentity, 2, "x".into(), records.clone());
    let mean_ssim = records.iter().map(|r| r.ssim).sum::<f64>() / records.len() as f64;
    assert!((report.aggregate.ssim - mean_ssim).abs() < 1e-9);
    assert_eq!(report.aggregate.frames, 6);
    let table = report.to_table();
    for name in UNAVAILABLE_METRICS {
        assert!(table.contains(name));
    }
    let lines = report.to_jsonl().unwrap();
    assert_eq!(lines.lines().count(), 7);
    assert!(lines.lines().last().unwrap().contains("\"aggregate\""));
}
