use dclr_core::augment::{self, Policy};
use dclr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[3, h, w], (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn default_views_differ_from_source_and_each_other() {
    let x = noise(1, 32, 32);
    let differs = |a: &Tensor, b: &Tensor| a.max_abs_diff(b).unwrap() > 0.0;
    let hits = (0..100u64)
        .filter(|&seed| {
            let pair = augment::sample_pair(&x, &Policy::default(), seed, 0).unwrap();
            differs(&pair.x_i, &x) && differs(&pair.x_j, &x) && differs(&pair.x_i, &pair.x_j)
        })
        .count();
    assert!(hits >= 99, "only {hits}/100 seeds produced distinct views");
}

#[test]
fn equal_streams_give_equal_views() {
    let x = noise(2, 16, 16);
    let view = |seed| augment::augment_view(&x, &Policy::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    for seed in 0..10 {
        assert_eq!(view(seed), view(seed));
    }
}

#[test]
fn blur_preserves_the_image_mean() {
    for seed in 0..20 {
        let x = noise(100 + seed, 32, 32);
        let sigma = 0.3 + 0.1 * seed as f32;
        let y = augment::gaussian_blur(&x, sigma).unwrap();
        let (mx, my) = (x.mean() as f64, y.mean() as f64);
        assert!((mx - my).abs() < 1e-4, "sigma {sigma}: mean {mx} became {my}");
    }
}

#[test]
fn blurred_impulse_is_a_centred_gaussian() {
    let (n, c) = (31usize, 15usize);
    let mut x = Tensor::zeros(&[3, n, n]).unwrap();
    for ch in 0..3 {
        x.data_mut()[(ch * n + c) * n + c] = 1.0;
    }
    let sigma = 1.5f64;
    let y = augment::gaussian_blur(&x, sigma as f32).unwrap();
    let peak = y.data()[c * n + c] as f64;
    let mut best = (0usize, 0usize, f32::MIN);
    for yy in 0..n {
        for xx in 0..n {
            let v = y.data()[yy * n + xx];
            if v > best.2 {
                best = (yy, xx, v);
            }
            let (dy, dx) = (yy as f64 - c as f64, xx as f64 - c as f64);
            if dy.abs() > 3.0 * sigma || dx.abs() > 3.0 * sigma {
                continue;
            }
            let expected = peak * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            assert!((v as f64 - expected).abs() < 1e-6, "({yy},{xx}): {v} vs {expected}");
        }
    }
    assert_eq!((best.0, best.1), (c, c));
}

#[test]
fn contrast_example() {
    // grey image whose mean is 0.4: pixel 0.8 at factor 0.5 goes to 0.6
    let mut d = vec![0.0f32; 12];
    for ch in 0..3 {
        d[ch * 4] = 0.8;
        d[ch * 4 + 1] = 0.8;
    }
    let out = augment::adjust_contrast(&Tensor::new(&[3, 2, 2], d).unwrap(), 0.5).unwrap();
    assert!((out.data()[0] - 0.6).abs() < 1e-6);
    assert!((out.data()[2] - 0.2).abs() < 1e-6);
}
